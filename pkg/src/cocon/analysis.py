"""Embedding export and the qualitative analyses run on it.

Everything downstream of :func:`export_embeddings` works on an
:class:`EmbeddingStore`, so analyses can be rerun from disk without models.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from cocon.data import SyntheticSceneConfig, block_frame_indices, generate_clip
from cocon.model import ViewModel, spatial_max

CONTEXT = "context"


# --------------------------------------------------------------------------
# Embedding store
# --------------------------------------------------------------------------


@dataclass
class EmbeddingStore:
    """Unit vectors with one record per row: video, view, block (or context), label."""

    vectors: np.ndarray
    records: list = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.records):
            raise ValueError("vectors must be (n, D) with one record per row")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def views(self) -> list:
        return sorted({r["view"] for r in self.records})

    def select(self, view: str, block=CONTEXT) -> tuple[list, np.ndarray, np.ndarray]:
        """(video ids, vectors, labels) for one view and block kind."""
        rows = [i for i, r in enumerate(self.records) if r["view"] == view and r["block"] == block]
        if not rows:
            raise KeyError(f"no {block} vectors for view {view!r}")
        ids = [self.records[i]["video"] for i in rows]
        labels = np.array([-1 if self.records[i]["label"] is None else self.records[i]["label"] for i in rows])
        return ids, self.vectors[rows], labels

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.vectors.astype("<f4").tofile(directory / "vectors.f32")
        manifest = {
            "dim": self.dim,
            "count": len(self),
            "dtype": "<f4",
            "provenance": self.provenance,
            "records": self.records,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest))
        return directory

    @classmethod
    def load(cls, directory) -> "EmbeddingStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        vectors = np.fromfile(directory / "vectors.f32", dtype="<f4").reshape(manifest["count"], manifest["dim"])
        return cls(vectors, manifest["records"], manifest.get("provenance", ""))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


@torch.no_grad()
def export_embeddings(
    models: dict,
    views: dict,
    labels=None,
    ids=None,
    provenance: str = "",
    batch: int = 32,
) -> EmbeddingStore:
    """Context vector per clip and view plus one pooled vector per block.

    ``views`` maps view id to blocks ``(n, N, K, H, W, C)``.
    """
    missing = [v for v in views if v not in models]
    if missing:
        raise KeyError(f"no model for views {missing}")
    n = len(next(iter(views.values())))
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    labels = [None] * n if labels is None else [int(y) for y in labels]
    vectors, records = [], []
    for view, blocks in views.items():
        model = models[view]
        was = model.training
        model.eval()
        ctx, pooled = [], []
        for start in range(0, n, batch):
            x = torch.from_numpy(np.asarray(blocks[start : start + batch], dtype=np.float32))
            z = model.encode(x)
            ctx.append(spatial_max(model.aggregator(z)[:, -1]))
            pooled.append(spatial_max(z))
        model.train(was)
        ctx = _unit(torch.cat(ctx).numpy())
        pooled = _unit(torch.cat(pooled).numpy())
        for i in range(n):
            vectors.append(ctx[i])
            records.append({"video": ids[i], "view": view, "block": CONTEXT, "label": labels[i]})
            for j in range(pooled.shape[1]):
                vectors.append(pooled[i, j])
                records.append({"video": ids[i], "view": view, "block": j, "label": labels[i]})
    return EmbeddingStore(np.stack(vectors), records, provenance)


# --------------------------------------------------------------------------
# Pairwise similarity statistics
# --------------------------------------------------------------------------


def similarity_histograms(store: EmbeddingStore, view: str, bins: int = 20) -> dict:
    """Cosine similarity of every clip pair, split into same-class and cross-class."""
    _, x, labels = store.select(view)
    counts = {c: int((labels == c).sum()) for c in np.unique(labels)}
    lonely = [int(c) for c, k in counts.items() if k < 2]
    if lonely:
        warnings.warn(f"classes {lonely} have fewer than 2 samples; no same-class pairs for them")
    sims = x @ x.T
    iu, ju = np.triu_indices(len(x), k=1)
    pair = sims[iu, ju]
    same = labels[iu] == labels[ju]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    same_hist, _ = np.histogram(pair[same], bins=edges)
    cross_hist, _ = np.histogram(pair[~same], bins=edges)
    mean_same = float(pair[same].mean()) if same.any() else float("nan")
    mean_cross = float(pair[~same].mean()) if (~same).any() else float("nan")
    return {
        "view": view,
        "edges": edges.tolist(),
        "same": same_hist.tolist(),
        "cross": cross_hist.tolist(),
        "mean_same": mean_same,
        "mean_cross": mean_cross,
        "separation": mean_same - mean_cross,
        "skipped_classes": lonely,
    }


def save_histograms(result: dict, path) -> Path:
    """CSV of the two histograms next to a JSON summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = result["edges"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "same", "cross"])
        for i in range(len(edges) - 1):
            w.writerow([edges[i], edges[i + 1], result["same"][i], result["cross"][i]])
    summary = {k: result[k] for k in ("view", "mean_same", "mean_cross", "separation", "skipped_classes")}
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    return path


def class_similarity(x: np.ndarray, labels: np.ndarray, classes, per_video: bool = False) -> np.ndarray:
    """Class-by-class cosine similarity.

    Centroid mode compares re-normalized class means; per-video mode averages
    the similarity over all video pairs of the two classes.
    """
    if per_video:
        sims = x @ x.T
        out = np.zeros((len(classes), len(classes)))
        for i, a in enumerate(classes):
            for j, b in enumerate(classes):
                out[i, j] = sims[np.ix_(labels == a, labels == b)].mean()
        return out
    cent = _unit(np.stack([x[labels == c].mean(0) for c in classes]))
    return cent @ cent.T


@dataclass
class ConsistencyResult:
    top_m: int
    min_shared: int
    neighbors: dict  # view -> {class: [neighbor classes, most similar first]}
    consistent: dict  # class -> neighbor classes shared by every view
    count: int  # classes with at least min_shared consistent neighbors

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def class_consistency(
    store: EmbeddingStore,
    top_m: int = 4,
    min_shared: int = 3,
    views=None,
    per_video: bool = False,
) -> ConsistencyResult:
    """Nearest classes per view and their agreement across views."""
    views = list(views or store.views)
    if len(views) < 2:
        raise ValueError("class consistency needs at least two views")
    neighbors = {}
    classes = None
    for view in views:
        _, x, labels = store.select(view)
        present = sorted(int(c) for c in np.unique(labels))
        if classes is None:
            classes = present
        elif present != classes:
            raise ValueError("views cover different classes")
        if top_m >= len(classes):
            raise ValueError(f"top_m={top_m} needs more than {len(classes)} classes")
        sim = class_similarity(x, labels, classes, per_video)
        table = {}
        for i, c in enumerate(classes):
            order = [j for j in np.argsort(-sim[i], kind="stable") if j != i]
            table[c] = [classes[j] for j in order[:top_m]]
        neighbors[view] = table
    consistent = {}
    for c in classes:
        shared = set(neighbors[views[0]][c])
        for view in views[1:]:
            shared &= set(neighbors[view][c])
        consistent[c] = [n for n in neighbors[views[0]][c] if n in shared]
    count = sum(len(s) >= min_shared for s in consistent.values())
    return ConsistencyResult(top_m, min_shared, neighbors, consistent, count)


def null_consistency(num_classes: int, top_m: int, num_views: int = 2) -> float:
    """Expected shared neighbours per class when every view ranks at random."""
    others = num_classes - 1
    return others * (top_m / others) ** num_views


def nearest_neighbors(store: EmbeddingStore, query, k: int, view: str) -> list[tuple[int, float]]:
    """Top-k clips by cosine similarity of context vectors, query excluded."""
    ids, x, _ = store.select(view)
    if query not in ids:
        raise KeyError(f"video {query!r} not in store")
    if k >= len(ids):
        raise ValueError(f"k={k} must be smaller than the store size {len(ids)}")
    q = ids.index(query)
    sims = x @ x[q]
    order = [i for i in np.argsort(-sims, kind="stable") if i != q][:k]
    return [(ids[i], float(sims[i])) for i in order]


def precision_at_k(store: EmbeddingStore, view: str, k: int) -> float:
    """Mean fraction of same-label clips among each query's k neighbours."""
    ids, _, labels = store.select(view)
    lookup = dict(zip(ids, labels))
    hits = []
    for q in ids:
        nn = nearest_neighbors(store, q, k, view)
        hits.append(np.mean([lookup[i] == lookup[q] for i, _ in nn]))
    return float(np.mean(hits))


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows onto the two leading principal components."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


# --------------------------------------------------------------------------
# Soft temporal alignment
# --------------------------------------------------------------------------


@dataclass
class AlignmentMap:
    similarity: np.ndarray  # raw cosine similarity, (B_a, B_b)
    matrix: np.ndarray  # row-normalized, optionally smoothed
    normalization: str = "row_softmax"
    temperature: float = 0.1
    smoothed: bool = False
    smoothing_window: int = 0

    @property
    def metadata(self) -> dict:
        return {
            "shape": list(self.matrix.shape),
            "normalization": self.normalization,
            "temperature": self.temperature,
            "smoothed": self.smoothed,
            "smoothing_window": self.smoothing_window,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, self.matrix, delimiter=",")
        path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=2))
        return path


def _row_softmax(s: np.ndarray, temperature: float) -> np.ndarray:
    e = np.exp((s - s.max(1, keepdims=True)) / temperature)
    return e / e.sum(1, keepdims=True)


def align_features(
    feats_a: np.ndarray,
    feats_b: np.ndarray,
    temperature: float = 0.1,
    smooth: bool = False,
    window: int = 3,
) -> AlignmentMap:
    """Alignment map between two sequences of block vectors."""
    sim = _unit(np.asarray(feats_a, dtype=np.float64)) @ _unit(np.asarray(feats_b, dtype=np.float64)).T
    m = _row_softmax(sim, temperature)
    if smooth:
        m = ndimage.uniform_filter(m, size=window, mode="nearest")
        m = m / m.sum(1, keepdims=True)
    return AlignmentMap(sim, m, temperature=temperature, smoothed=smooth, smoothing_window=window if smooth else 0)


@torch.no_grad()
def block_features(model: ViewModel, blocks: np.ndarray) -> np.ndarray:
    """Pooled latent of every block of one clip ``(B, K, H, W, C)`` -> ``(B, D)``."""
    was = model.training
    model.eval()
    z = model.encode(torch.from_numpy(np.asarray(blocks, dtype=np.float32))[None])
    model.train(was)
    return spatial_max(z)[0].numpy()


def align_videos(
    model: ViewModel,
    blocks_a: np.ndarray,
    blocks_b: np.ndarray,
    num_blocks: int = 18,
    temperature: float = 0.1,
    smooth: bool = False,
) -> AlignmentMap:
    for name, b in (("a", blocks_a), ("b", blocks_b)):
        if len(b) < num_blocks:
            raise ValueError(f"clip {name} has {len(b)} blocks, {num_blocks} needed")
    fa = block_features(model, blocks_a[:num_blocks])
    fb = block_features(model, blocks_b[:num_blocks])
    return align_features(fa, fb, temperature, smooth)


def render_blocks(
    config: SyntheticSceneConfig,
    num_blocks: int,
    block_frames: int,
    stride: int,
    view: str,
) -> np.ndarray:
    """Render just the frames needed for ``num_blocks`` blocks of one view."""
    idx = block_frame_indices(num_blocks, block_frames, stride)
    need = int(idx.max()) + 1
    if config.num_frames < need:
        config = SyntheticSceneConfig(**{**asdict(config), "num_frames": need})
    clip = generate_clip(config, frame_indices=idx.ravel())
    arr = clip.views[view]
    return arr.reshape(num_blocks, block_frames, *arr.shape[1:])


def diagonal_profile(similarity: np.ndarray) -> np.ndarray:
    """Mean similarity at each lag |i - j| of a square map."""
    n = len(similarity)
    return np.array([np.diagonal(similarity, lag).mean() for lag in range(n)])


def autocorrelation_peak(profile: np.ndarray, min_lag: int = 1, tol: float = 0.25) -> int:
    """Fundamental lag of a lag profile: the shortest strong local maximum.

    A local maximum counts as strong when it comes within ``tol`` times the
    profile's range (lag 0 excluded) of the highest one. Harmonics of the
    period are about as high as the period itself and long lags average
    few entries, so the shortest strong peak is the robust choice.
    Returns -1 when the profile has no interior local maximum.
    """
    profile = np.asarray(profile, dtype=np.float64)
    peaks = [
        lag
        for lag in range(max(min_lag, 1), len(profile) - 1)
        if profile[lag] > profile[lag - 1] and profile[lag] >= profile[lag + 1]
    ]
    if not peaks:
        return -1
    best = max(profile[lag] for lag in peaks)
    spread = np.ptp(profile[1:])
    return min(lag for lag in peaks if profile[lag] >= best - tol * spread)
