"""View encoders, the recurrent aggregator and the future-prediction rollout.

Tensors are channels-last throughout: a clip is ``(B, N, K, H, W, C)``, a
latent map sequence ``(B, T, H', W', D)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cocon.losses import ContractViolation, DensePredictionBatch, ViewEmbeddingBatch, l2_normalize

VIEW_CHANNELS = {"rgb": 3, "flow": 2, "mask": 1, "keypoints": 1}


@dataclass
class EncoderSpec:
    view_id: str
    channels: int
    width: int = 16
    depth: int = 3
    dim: int = 32
    hidden: int | None = None
    dropout: float = 0.1
    frame_size: int = 64
    block_frames: int = 3
    latent_size: int = 4
    max_pred_steps: int = 8

    def __post_init__(self):
        if self.frame_size % 4 or self.frame_size // 4 < self.latent_size:
            raise ValueError(f"frame_size {self.frame_size} cannot reach latent size {self.latent_size}")
        s = self.frame_size // 4
        while s > self.latent_size:
            if s % 2:
                raise ValueError(f"frame_size {self.frame_size} is not reducible to {self.latent_size}")
            s //= 2
        if s != self.latent_size:
            raise ValueError(f"frame_size {self.frame_size} is not reducible to {self.latent_size}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def hidden_dim(self) -> int:
        return self.hidden or self.dim


class BlockEncoder(nn.Module):
    """Small 3D conv stack mapping a (K, H, W, C) block to a (H', W', D) map."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        w = spec.width
        layers = [nn.Conv3d(spec.channels, w, (1, 4, 4), stride=(1, 4, 4)), nn.BatchNorm3d(w), nn.ReLU()]
        size, c, n_conv = spec.frame_size // 4, w, 1
        while size > spec.latent_size:
            layers += [
                nn.Conv3d(c, 2 * c, 3, stride=(1, 2, 2), padding=1, padding_mode="replicate"),
                nn.BatchNorm3d(2 * c),
                nn.ReLU(),
            ]
            c, size, n_conv = 2 * c, size // 2, n_conv + 1
        while n_conv < spec.depth:
            layers += [nn.Conv3d(c, c, 3, padding=1, padding_mode="replicate"), nn.BatchNorm3d(c), nn.ReLU()]
            n_conv += 1
        self.features = nn.Sequential(*layers)
        # collapses the K frames of a block
        self.project = nn.Conv3d(c, spec.dim, (spec.block_frames, 1, 1))
        self.spec = spec

    def forward(self, blocks: torch.Tensor) -> torch.Tensor:
        # (B, N, K, H, W, C) -> (B, N, H', W', D)
        b, n, k, h, w, c = blocks.shape
        x = blocks.reshape(b * n, k, h, w, c).permute(0, 4, 1, 2, 3)
        x = self.project(self.features(x))
        x = x.squeeze(2).permute(0, 2, 3, 1)
        return x.reshape(b, n, *x.shape[1:])


class ConvGRU(nn.Module):
    """Single-layer GRU with 1x1 kernels, weights shared over spatial positions."""

    def __init__(self, input_dim: int, hidden_dim: int, dropout: float = 0.1):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.gates = nn.Linear(input_dim + hidden_dim, 2 * hidden_dim)
        self.candidate = nn.Linear(input_dim + hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def step(self, x: torch.Tensor, h: torch.Tensor | None) -> torch.Tensor:
        if h is None:
            h = x.new_zeros(*x.shape[:-1], self.hidden_dim)
        reset, update = torch.sigmoid(self.gates(torch.cat([x, h], -1))).chunk(2, -1)
        cand = torch.tanh(self.candidate(torch.cat([x, reset * h], -1)))
        h = (1 - update) * h + update * cand
        return self.dropout(h)

    def forward(self, z: torch.Tensor, h: torch.Tensor | None = None) -> torch.Tensor:
        """Hidden state after each step of ``z`` (B, T, H', W', D)."""
        if z.shape[1] < 1:
            raise ContractViolation("aggregator needs at least one block")
        states = []
        for t in range(z.shape[1]):
            h = self.step(z[:, t], h)
            states.append(h)
        return torch.stack(states, 1)


def spatial_max(x: torch.Tensor) -> torch.Tensor:
    """Max over the two spatial axes preceding the channel axis."""
    return x.amax(dim=(-3, -2))


class ViewModel(nn.Module):
    """Encoder f, aggregator g and predictor phi for a single view."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.encoder = BlockEncoder(spec)
        self.aggregator = ConvGRU(spec.dim, spec.hidden_dim, spec.dropout)
        self.predictor = nn.Sequential(
            nn.Linear(spec.hidden_dim, spec.hidden_dim),
            nn.ReLU(),
            nn.Linear(spec.hidden_dim, spec.dim),
        )

    def check_input(self, blocks: torch.Tensor):
        s = self.spec
        if blocks.dim() != 6:
            raise ContractViolation("blocks must have shape (B, N, K, H, W, C)")
        if tuple(blocks.shape[2:]) != (s.block_frames, s.frame_size, s.frame_size, s.channels):
            raise ContractViolation(
                f"view {s.view_id!r} expects blocks (K, H, W, C) = "
                f"{(s.block_frames, s.frame_size, s.frame_size, s.channels)}, got {tuple(blocks.shape[2:])}"
            )

    def encode(self, blocks: torch.Tensor) -> torch.Tensor:
        self.check_input(blocks)
        return self.encoder(blocks)

    def context(self, z: torch.Tensor) -> torch.Tensor:
        """Pooled context c_t after the last block of ``z``."""
        return spatial_max(self.aggregator(z)[:, -1])

    def rollout(self, hidden: torch.Tensor, steps: int) -> torch.Tensor:
        """Predict ``steps`` future latent maps, feeding each prediction back."""
        if steps < 1:
            raise ContractViolation("steps must be >= 1")
        if steps > self.spec.max_pred_steps:
            raise ContractViolation(f"steps {steps} exceeds maximum {self.spec.max_pred_steps}")
        preds = []
        h = hidden
        for i in range(steps):
            pred = self.predictor(h)
            preds.append(pred)
            if i + 1 < steps:
                h = self.aggregator.step(pred, h)
        return torch.stack(preds, 1)

    def forward(self, blocks: torch.Tensor, pred_steps: int) -> dict:
        """Encode a clip, roll out predictions for its last ``pred_steps`` blocks."""
        z = self.encode(blocks)
        n = z.shape[1]
        if not 1 <= pred_steps < n:
            raise ContractViolation(f"pred_steps must be in [1, {n - 1}]")
        hidden = self.aggregator(z[:, : n - pred_steps])
        pred = self.rollout(hidden[:, -1], pred_steps)
        return {
            "z": z,
            "pred": pred,
            "target": z[:, n - pred_steps :],
            "pooled": spatial_max(z),
            "context": spatial_max(hidden[:, -1]),
        }


def instance_embedding(pooled: torch.Tensor, unit: str = "clip") -> torch.Tensor:
    """Cooperative-loss embeddings from pooled block features (B, N, D).

    ``clip`` averages the block features of each clip; ``block`` keeps one
    row per (clip, block).
    """
    if unit == "clip":
        return l2_normalize(pooled.mean(1), dim=-1)
    if unit == "block":
        return l2_normalize(pooled.reshape(-1, pooled.shape[-1]), dim=-1)
    raise ValueError(f"unknown embedding unit {unit!r}")


class MultiViewModel(nn.Module):
    """One independent ViewModel per view; no parameters are shared."""

    def __init__(self, specs: list[EncoderSpec]):
        super().__init__()
        dims = {s.dim for s in specs}
        if len(dims) != 1:
            raise ContractViolation("all views must share the embedding dim D")
        self.views = nn.ModuleDict({s.view_id: ViewModel(s) for s in specs})

    @classmethod
    def from_views(cls, models: dict) -> "MultiViewModel":
        obj = cls.__new__(cls)
        nn.Module.__init__(obj)
        obj.views = nn.ModuleDict(models)
        return obj

    @property
    def view_ids(self) -> list[str]:
        return list(self.views.keys())

    def forward(
        self,
        clip: dict,
        pred_steps: int,
        instance_ids: list | None = None,
        tau: float = 0.005,
        unit: str = "clip",
    ) -> tuple[dict, dict]:
        """Per-view DensePredictionBatch and ViewEmbeddingBatch for a clip batch."""
        missing = [v for v in self.views if v not in clip]
        if missing:
            raise ContractViolation(f"missing views: {missing}")
        dense, emb = {}, {}
        for view, model in self.views.items():
            out = model(clip[view], pred_steps)
            dense[view] = DensePredictionBatch(out["pred"], out["target"], tau)
            h = instance_embedding(out["pooled"], unit)
            ids = instance_ids
            if ids is None:
                ids = list(range(h.shape[0]))
            elif unit == "block":
                n = out["pooled"].shape[1]
                ids = [(i, j) for i in ids for j in range(n)]
            emb[view] = ViewEmbeddingBatch(view, h, list(ids))
        return dense, emb


# --------------------------------------------------------------------------
# Checkpoints: named float32 little-endian arrays plus a JSON manifest
# --------------------------------------------------------------------------


def _state_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def save_view(model: ViewModel, directory, phase: str, step: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "params.npz", **_state_arrays(model))
    manifest = {
        "view_id": model.spec.view_id,
        "spec": asdict(model.spec),
        "phase": phase,
        "step": int(step),
        "format": "npz/<f4",
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_view(directory) -> tuple[ViewModel, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    model = ViewModel(EncoderSpec(**manifest["spec"]))
    state = model.state_dict()
    with np.load(directory / "params.npz") as arrays:
        loaded = {k: torch.from_numpy(arrays[k].copy()).to(state[k].dtype) for k in state}
    model.load_state_dict(loaded)
    return model, manifest


def save_models(models: dict, directory, phase: str, step: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    for view, model in models.items():
        save_view(model, directory / view, phase, step, extra)
    return directory


def load_models(directory, views: list[str] | None = None) -> dict:
    directory = Path(directory)
    if views is None:
        views = sorted(p.name for p in directory.iterdir() if (p / "manifest.json").exists())
    models = {}
    for view in views:
        if not (directory / view / "manifest.json").exists():
            raise FileNotFoundError(f"checkpoint for view {view!r} missing under {directory}")
        models[view], _ = load_view(directory / view)
    return models


def save_optimizer(optimizer: torch.optim.Optimizer, path) -> None:
    """Adam-style state as flat float32 arrays; hyper-parameters as JSON."""
    path = Path(path)
    sd = optimizer.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().astype("<f4")
    np.savez(path.with_suffix(".npz"), **arrays)
    path.with_suffix(".json").write_text(json.dumps(sd["param_groups"]))


def load_optimizer(optimizer: torch.optim.Optimizer, path) -> None:
    path = Path(path)
    groups = json.loads(path.with_suffix(".json").read_text())
    state: dict = {}
    with np.load(path.with_suffix(".npz")) as arrays:
        for name in arrays.files:
            idx, key = name.split("/", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(arrays[name].copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def zero_final_layer(model: ViewModel) -> None:
    nn.init.zeros_(model.encoder.project.weight)
    nn.init.zeros_(model.encoder.project.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def pool_latent(z: torch.Tensor) -> torch.Tensor:
    """Stacked spatial max-pooling; equal to ``spatial_max`` (exact)."""
    # two successive 2x2 max-pools reduce 4x4 to 1x1
    x = z.movedim(-1, -3)
    lead = x.shape[:-3]
    x = x.reshape(-1, *x.shape[-3:])
    while x.shape[-1] > 1 or x.shape[-2] > 1:
        x = F.max_pool2d(x, kernel_size=2, ceil_mode=True)
    return x.reshape(*lead, x.shape[-3])
