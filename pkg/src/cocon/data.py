"""Synthetic multi-view sprite videos, block sampling and augmentation.

Each clip shows one striped sprite moving over a background (flat grey unless
tint or texture is enabled) with a class-specific motion pattern. Four aligned views are rendered from the same
trajectory:

* ``rgb``       appearance, carries per-clip nuisance (shape, size, colour, stripes)
* ``flow``      analytic motion field in pixels per source frame
* ``mask``      binary sprite occupancy with dropout noise
* ``keypoints`` Gaussian heatmap at a jittered sprite centre, with misses

Arrays are channels-last: a clip view is ``(T, H, W, C)`` and sampled blocks
``(N, K, H, W, C)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

PATTERNS = (
    "circular",
    "linear",
    "zigzag",
    "bounce",
    "spiral",
    "shake",
    "grow_shrink",
    "pendulum",
)
STATIC = "static"
VIEWS = ("rgb", "flow", "mask", "keypoints")
FLOW_SCALE = 4.0  # flow view stores pixels / FLOW_SCALE


class LabelLeakError(RuntimeError):
    """Labelled data reached a self-supervised code path."""


@dataclass(frozen=True)
class SyntheticSceneConfig:
    label: int
    seed: int
    frame_size: int = 64
    num_frames: int = 24
    num_classes: int = 8
    views: tuple = ("rgb", "flow")
    period: float | None = None  # frames; drawn per clip when None
    pattern: str | None = None  # overrides the class pattern, e.g. "static"
    pixel_noise: float = 0.03
    background_texture: float = 0.0
    tint_spread: float = 0.0
    flow_noise: float = 0.15
    mask_dropout: float = 0.1
    keypoint_miss: float = 0.1

    def __post_init__(self):
        if self.frame_size < 8:
            raise ValueError(f"degenerate frame size {self.frame_size}")
        if self.num_frames < 1:
            raise ValueError("num_frames must be positive")
        if not 0 <= self.label < self.num_classes:
            raise ValueError(f"class id {self.label} outside [0, {self.num_classes})")
        if self.num_classes > len(PATTERNS):
            raise ValueError(f"at most {len(PATTERNS)} motion classes are available")
        unknown = set(self.views) - set(VIEWS)
        if unknown:
            raise ValueError(f"unknown views {sorted(unknown)}")

    @property
    def pattern_name(self) -> str:
        return self.pattern or PATTERNS[self.label]


@dataclass
class MultiViewClip:
    views: dict
    label: int | None
    seed: int
    positions: np.ndarray  # (T + 1, 2) sprite centre as (x, y)
    scales: np.ndarray  # (T + 1,)
    frame_indices: np.ndarray

    def without_label(self) -> "MultiViewClip":
        return replace(self, label=None)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


def _trajectory(pattern: str, t: np.ndarray, size: int, rng: np.random.Generator, period: float | None):
    """Sprite centre (x, y) and scale at (fractional) frame times ``t``."""
    center = size * rng.uniform(0.4, 0.6, 2)
    amp = size * rng.uniform(0.2, 0.28)
    period = period or rng.uniform(14.0, 22.0)
    omega = 2 * math.pi / period
    phase = rng.uniform(0, 2 * math.pi)
    theta = rng.uniform(0, 2 * math.pi)
    direction = np.array([math.cos(theta), math.sin(theta)])
    normal = np.array([-direction[1], direction[0]])
    spin = rng.choice([-1.0, 1.0])
    span = max(float(t.max()), 1.0)
    scale = np.ones_like(t, dtype=np.float64)
    tt = t[:, None]

    if pattern == STATIC:
        pos = np.repeat(center[None], len(t), 0)
    elif pattern == "circular":
        ang = spin * omega * t + phase
        pos = center + amp * np.stack([np.cos(ang), np.sin(ang)], 1)
    elif pattern == "linear":
        pos = center + (tt / span - 0.5) * 1.6 * amp * direction
    elif pattern == "zigzag":
        tri = 2 * np.abs(2 * ((t / period + phase / (2 * math.pi)) % 1.0) - 1) - 1
        pos = center + (tt / span - 0.5) * 1.4 * amp * direction + 0.5 * amp * tri[:, None] * normal
    elif pattern == "bounce":
        hop = np.abs(np.sin(omega * t / 2 + phase))
        drift = (t / span - 0.5) * 0.6 * amp * spin
        pos = np.stack([center[0] + drift, size * 0.72 - 1.2 * amp * hop], 1)
    elif pattern == "spiral":
        ang = spin * omega * t + phase
        radius = amp * (0.25 + 0.75 * t / span)
        pos = center + radius[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    elif pattern == "shake":
        fast = 2 * math.pi / rng.uniform(3.0, 5.0)
        pos = center + 0.22 * amp * np.sin(fast * tt + phase) * direction
    elif pattern == "grow_shrink":
        pos = np.repeat(center[None], len(t), 0)
        scale = 1.0 + 0.55 * np.sin(omega * t + phase)
    elif pattern == "pendulum":
        pivot = np.array([center[0], size * 0.12])
        length = size * 0.55
        ang = 0.7 * np.sin(omega * t + phase)
        pos = pivot + length * np.stack([np.sin(ang), np.cos(ang)], 1)
    else:
        raise ValueError(f"unknown motion pattern {pattern!r}")
    return pos, scale


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def _shape_distance(shape: str, qx, qy):
    if shape == "circle":
        return np.sqrt(qx**2 + qy**2)
    if shape == "square":
        return np.maximum(np.abs(qx), np.abs(qy))
    return np.abs(qx) + np.abs(qy)  # diamond


def _background(size: int, rng: np.random.Generator, texture: float, tint_spread: float) -> np.ndarray:
    noise = rng.normal(size=(size, size, 3))
    tex = ndimage.gaussian_filter(noise, sigma=(rng.uniform(2.0, 5.0),) * 2 + (0,))
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-8) - 0.5
    tint = 0.5 + rng.uniform(-tint_spread, tint_spread, 3)
    return np.clip(tint + texture * tex * rng.uniform(0.5, 1.0), 0, 1)


def generate_clip(config: SyntheticSceneConfig, frame_indices=None) -> MultiViewClip:
    """Render a clip deterministically from ``config.seed``.

    ``frame_indices`` restricts rendering to a subset of the ``num_frames``
    source frames (flow is analytic, so no neighbouring frames are needed).
    """
    rng = np.random.default_rng(config.seed)
    size = config.frame_size
    if frame_indices is None:
        frame_indices = np.arange(config.num_frames)
    frame_indices = np.asarray(frame_indices)

    # appearance and nuisance draws happen first so every class shares them
    shape = rng.choice(["circle", "square", "diamond"])
    radius = size * rng.uniform(0.08, 0.12)
    color = rng.uniform(0.0, 0.35, 3)
    stripe_freq = rng.uniform(0.6, 1.2)
    background = _background(size, rng, config.background_texture, config.tint_spread)
    kp_sigma = size * 0.05

    t_all = np.arange(config.num_frames + 1, dtype=np.float64)
    pos, scale = _trajectory(config.pattern_name, t_all, size, rng, config.period)
    margin = radius * 1.6
    pos = np.clip(pos, margin, size - margin)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = {v: [] for v in config.views}
    for t in frame_indices:
        # per-frame noise stream, so rendering a subset of frames reproduces them exactly
        noise_rng = np.random.default_rng([config.seed, 1, int(t)])
        qx = (xs - pos[t, 0]) / scale[t]
        qy = (ys - pos[t, 1]) / scale[t]
        inside = _shape_distance(shape, qx, qy) <= radius
        if "rgb" in out:
            tex = 0.75 + 0.25 * np.cos(stripe_freq * qx)
            sprite = color[None, None] * tex[..., None]
            frame = np.where(inside[..., None], sprite, background)
            frame = frame + config.pixel_noise * noise_rng.normal(size=frame.shape)
            out["rgb"].append(np.clip(frame, 0, 1))
        if "flow" in out:
            dst_x = pos[t + 1, 0] + qx * scale[t + 1]
            dst_y = pos[t + 1, 1] + qy * scale[t + 1]
            flow = np.stack([(dst_x - xs) * inside, (dst_y - ys) * inside], -1) / FLOW_SCALE
            flow = flow + config.flow_noise * noise_rng.normal(size=flow.shape)
            out["flow"].append(flow)
        if "mask" in out:
            m = inside.copy()
            if noise_rng.random() < config.mask_dropout:
                m[:] = False
            else:
                m &= noise_rng.random(m.shape) >= config.mask_dropout
            out["mask"].append(m[..., None].astype(np.float64))
        if "keypoints" in out:
            centre = pos[t] + noise_rng.normal(scale=size * 0.02, size=2)
            heat = np.exp(-((xs - centre[0]) ** 2 + (ys - centre[1]) ** 2) / (2 * kp_sigma**2))
            if noise_rng.random() < config.keypoint_miss:
                heat[:] = 0
            out["keypoints"].append(heat[..., None])

    views = {v: np.stack(frames).astype(np.float32) for v, frames in out.items()}
    return MultiViewClip(
        views=views,
        label=config.label,
        seed=config.seed,
        positions=pos,
        scales=scale,
        frame_indices=frame_indices,
    )


def flow_pixels(flow_view: np.ndarray) -> np.ndarray:
    return flow_view * FLOW_SCALE


def warp_error(frame_t: np.ndarray, frame_next: np.ndarray, flow_px: np.ndarray, mask: np.ndarray) -> float:
    """Mean |frame_next(x + flow(x)) - frame_t(x)| over pixels selected by ``mask``."""
    size_y, size_x = mask.shape
    ys, xs = np.mgrid[0:size_y, 0:size_x].astype(np.float64)
    coords = [ys + flow_px[..., 1], xs + flow_px[..., 0]]
    errs = []
    for c in range(frame_t.shape[-1]):
        warped = ndimage.map_coordinates(frame_next[..., c], coords, order=1, mode="nearest")
        errs.append(np.abs(warped - frame_t[..., c])[mask])
    return float(np.mean(np.concatenate(errs))) if mask.any() else 0.0


def reverse_clip(clip: MultiViewClip) -> MultiViewClip:
    """Time-reversed copy; flow vectors point backwards so they are negated."""
    views = {}
    for v, arr in clip.views.items():
        rev = arr[::-1].copy()
        views[v] = -rev if v == "flow" else rev
    return replace(clip, views=views, frame_indices=clip.frame_indices[::-1].copy())


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------


def block_frame_indices(num_blocks: int, block_frames: int, stride: int, offset: int = 0) -> np.ndarray:
    """Source-frame index of every (block, frame) slot, shape (N, K)."""
    idx = offset + stride * np.arange(num_blocks * block_frames)
    return idx.reshape(num_blocks, block_frames)


def frames_needed(num_blocks: int, block_frames: int, stride: int) -> int:
    return num_blocks * block_frames * stride


def sample_blocks(clip: MultiViewClip, num_blocks: int, block_frames: int, stride: int, offset: int = 0) -> dict:
    """Subsample every ``stride``-th frame and cut N disjoint blocks of K frames.

    Returns ``{view: (N, K, H, W, C)}``; every view uses the same frame indices.
    """
    total = len(clip.frame_indices)
    need = offset + frames_needed(num_blocks, block_frames, stride)
    if need > total:
        raise ValueError(f"clip has {total} frames, {need} needed")
    idx = block_frame_indices(num_blocks, block_frames, stride, offset)
    return {v: arr[idx] for v, arr in clip.views.items()}


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    crop: bool = True
    crop_scale: tuple = (0.7, 1.0)
    flip: bool = True
    color_jitter: float = 0.1
    grey_prob: float = 0.1
    color_views: tuple = ("rgb",)

    @classmethod
    def off(cls) -> "AugmentationPolicy":
        return cls(crop=False, flip=False, color_jitter=0.0, grey_prob=0.0)


def _crop_resize(x: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Crop a (..., H, W, C) array to a square and resize back to H x W."""
    size = x.shape[-2]
    lead = x.shape[:-3]
    c = x.shape[-1]
    patch = x[..., top : top + side, left : left + side, :]
    t = torch.from_numpy(np.ascontiguousarray(patch)).reshape(-1, side, side, c).permute(0, 3, 1, 2)
    t = F.interpolate(t.float(), size=(size, size), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).reshape(*lead, size, size, c).numpy().astype(x.dtype)


def _jitter_frames(frames: np.ndarray, strength: float, grey_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and greying, drawn independently per frame."""
    frames = frames.astype(np.float32)
    n = frames.shape[0]
    shape = (n, 1, 1, 1)
    if strength > 0:
        lo, hi = 1 - strength, 1 + strength
        frames = frames * rng.uniform(lo, hi, shape).astype(np.float32)
        mean = frames.mean(axis=(1, 2, 3), keepdims=True)
        frames = (frames - mean) * rng.uniform(lo, hi, shape).astype(np.float32) + mean
        grey = frames.mean(-1, keepdims=True)
        frames = grey + (frames - grey) * rng.uniform(lo, hi, shape).astype(np.float32)
    if grey_prob > 0:
        pick = rng.random(n) < grey_prob
        frames[pick] = frames[pick].mean(-1, keepdims=True)
    return np.clip(frames, 0, 1)


def augment(blocks: dict, policy: AugmentationPolicy, rng: np.random.Generator) -> dict:
    """Augment one clip's blocks ``{view: (N, K, H, W, C)}``.

    Crop and flip parameters are drawn once and applied to every frame of
    every view. Flow is rescaled with the crop and its x-component negated on
    flips. Colour jitter and greying are drawn per frame, colour views only.
    """
    out = dict(blocks)
    size = next(iter(blocks.values())).shape[-2]
    if policy.crop:
        lo, hi = policy.crop_scale
        side = int(round(size * rng.uniform(lo, hi)))
        side = min(max(side, 2), size)
        top, left = rng.integers(0, size - side + 1, 2)
        if side < size:
            for v, arr in out.items():
                arr = _crop_resize(arr, top, left, side)
                if v == "flow":
                    arr = arr * (size / side)
                out[v] = arr
    if policy.flip and rng.random() < 0.5:
        out = {v: flip_view(v, arr) for v, arr in out.items()}
    if policy.color_jitter > 0 or policy.grey_prob > 0:
        for v in policy.color_views:
            if v not in out:
                continue
            arr = out[v]
            frames = _jitter_frames(arr.reshape(-1, *arr.shape[-3:]), policy.color_jitter, policy.grey_prob, rng)
            out[v] = frames.reshape(arr.shape).astype(arr.dtype)
    return out


def flip_view(view: str, arr: np.ndarray) -> np.ndarray:
    """Horizontal mirror; for flow the x-component also changes sign."""
    flipped = arr[..., ::-1, :].copy()
    if view == "flow":
        flipped[..., 0] = -flipped[..., 0]
    return flipped


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class ClipRecord:
    id: int
    seed: int
    label: int
    split: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "seed": self.seed, "class": self.label, "split": self.split})

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        d = json.loads(line)
        return cls(id=d["id"], seed=d["seed"], label=d["class"], split=d["split"])


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_json() + "\n" for r in self.records))
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        return cls([ClipRecord.from_json(line) for line in lines if line.strip()])


def make_dataset(
    num_clips: int,
    num_classes: int,
    split_seed: int = 0,
    fractions: tuple = (0.7, 0.1, 0.2),
) -> DatasetManifest:
    """Class-balanced train/val/test manifest with unique clip seeds."""
    if num_classes < 1:
        raise ValueError("need at least one class")
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three values summing to 1")
    rng = np.random.default_rng(split_seed)
    seeds = rng.choice(2**31 - 1, size=num_clips, replace=False)
    per_class = [num_clips // num_classes + (c < num_clips % num_classes) for c in range(num_classes)]
    records, k = [], 0
    for c, count in enumerate(per_class):
        n_train = int(round(count * fractions[0]))
        n_val = int(round(count * fractions[1]))
        splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val)
        for s in splits:
            records.append(ClipRecord(id=k, seed=int(seeds[k]), label=c, split=s))
            k += 1
    return DatasetManifest(records)


@dataclass
class ClipArrays:
    """Pre-sampled blocks of many clips: ``views[v]`` is (n, N, K, H, W, C)."""

    views: dict
    labels: np.ndarray | None
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def unlabeled(self) -> "ClipArrays":
        return ClipArrays(self.views, None, self.ids)

    def select_views(self, views) -> "ClipArrays":
        return ClipArrays({v: self.views[v] for v in views}, self.labels, self.ids)

    def subset(self, index) -> "ClipArrays":
        labels = None if self.labels is None else self.labels[index]
        return ClipArrays({v: a[index] for v, a in self.views.items()}, labels, self.ids[index])

    def batch(self, index, views=None) -> dict:
        views = views or list(self.views)
        return {v: self.views[v][index].astype(np.float32) for v in views}


def require_unlabeled(arrays: ClipArrays) -> ClipArrays:
    if arrays.labels is not None:
        raise LabelLeakError("self-supervised training received labelled clips")
    return arrays


def build_arrays(
    records: list,
    views: tuple,
    frame_size: int,
    num_blocks: int,
    block_frames: int,
    stride: int,
    num_classes: int,
    dtype=np.float16,
    **scene_kwargs,
) -> ClipArrays:
    """Render only the sampled frames of every clip and stack the blocks."""
    total = frames_needed(num_blocks, block_frames, stride)
    idx = block_frame_indices(num_blocks, block_frames, stride).ravel()
    out = {v: [] for v in views}
    for r in records:
        cfg = SyntheticSceneConfig(
            label=r.label,
            seed=r.seed,
            frame_size=frame_size,
            num_frames=total,
            num_classes=num_classes,
            views=tuple(views),
            **scene_kwargs,
        )
        clip = generate_clip(cfg, frame_indices=idx)
        for v in views:
            arr = clip.views[v].reshape(num_blocks, block_frames, *clip.views[v].shape[1:])
            out[v].append(arr.astype(dtype))
    labels = np.array([r.label for r in records], dtype=np.int64)
    ids = np.array([r.id for r in records], dtype=np.int64)
    return ClipArrays({v: np.stack(a) for v, a in out.items()}, labels, ids)
