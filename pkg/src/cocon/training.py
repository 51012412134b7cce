"""Two-phase training: independent per-view CPC, then joint cooperative training."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from cocon.config import ExperimentConfig
from cocon.data import AugmentationPolicy, ClipArrays, augment, require_unlabeled
from cocon.losses import (
    DensePredictionBatch,
    cocon_loss,
    coop_loss,
    cosine_distance,
    cpc_nce_loss,
)
from cocon.model import (
    VIEW_CHANNELS,
    EncoderSpec,
    MultiViewModel,
    ViewModel,
    instance_embedding,
    save_models,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def view_seed(seed: int, view: str) -> int:
    """Stable per-view seed; independent of which other views exist."""
    return (seed * 1_000_003 + zlib.crc32(view.encode())) % (2**31 - 1)


def make_spec(cfg: ExperimentConfig, view: str) -> EncoderSpec:
    return EncoderSpec(
        view_id=view,
        channels=VIEW_CHANNELS[view],
        width=cfg.model.width,
        depth=cfg.model.depth,
        dim=cfg.model.D,
        hidden=cfg.model.hidden,
        dropout=cfg.model.dropout,
        frame_size=cfg.data.frame_size,
        block_frames=cfg.data.K,
        max_pred_steps=max(cfg.model.pred_steps, 1),
    )


def init_view_model(cfg: ExperimentConfig, view: str, seed: int | None = None) -> ViewModel:
    torch.manual_seed(view_seed(cfg.train.seed if seed is None else seed, view))
    return ViewModel(make_spec(cfg, view))


# --------------------------------------------------------------------------
# Metrics and learning-rate schedule
# --------------------------------------------------------------------------


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    path: Path | None = None

    def add(self, **record):
        if self.records and "step" in record:
            last = [r["step"] for r in self.records if r.get("phase") == record.get("phase") and "step" in r]
            if last and record["step"] < last[-1]:
                raise ValueError("step indices must be monotone")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def where(self, **match) -> list:
        return [r for r in self.records if all(r.get(k) == v for k, v in match.items())]

    @classmethod
    def read(cls, path) -> "MetricsLog":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` when validation loss stalls.

    A loss counts as an improvement when it beats the best so far by the
    relative ``threshold``. After ``patience`` epochs without improvement the
    rate decays and the counter resets; at most ``max_decays`` decays happen.
    """

    def __init__(self, patience: int = 3, threshold: float = 1e-3, factor: float = 0.1, max_decays: int = 2):
        self.patience = patience
        self.threshold = threshold
        self.factor = factor
        self.max_decays = max_decays
        self.best = math.inf
        self.bad_epochs = 0
        self.decays = 0

    def step(self, val_loss: float) -> bool:
        if self.best == math.inf or val_loss < self.best * (1 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience and self.decays < self.max_decays:
            self.decays += 1
            self.bad_epochs = 0
            return True
        return False


def lr_schedule_step(val_losses, patience: int = 3, threshold: float = 1e-3, max_decays: int = 2) -> list[bool]:
    """Replay a validation-loss history; True marks epochs that decay the lr."""
    if len(val_losses) < 1:
        raise ValueError("at least one epoch is required")
    sched = PlateauSchedule(patience, threshold, max_decays=max_decays)
    return [sched.step(float(v)) for v in val_losses]


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def make_policy(enabled: bool) -> AugmentationPolicy:
    return AugmentationPolicy() if enabled else AugmentationPolicy.off()


def ssl_batch(
    arrays: ClipArrays,
    index: np.ndarray,
    views: list[str],
    num_blocks: int,
    rng: np.random.Generator | None,
    policy: AugmentationPolicy,
) -> dict:
    """Tensors (B, N, K, H, W, C) per view; random block offset per clip when rng given."""
    total = next(iter(arrays.views.values())).shape[1]
    out = {v: [] for v in views}
    for i in index:
        offset = int(rng.integers(0, total - num_blocks + 1)) if rng is not None else 0
        blocks = {v: arrays.views[v][i, offset : offset + num_blocks].astype(np.float32) for v in views}
        if rng is not None:
            blocks = augment(blocks, policy, rng)
        for v in views:
            out[v].append(blocks[v])
    return {v: torch.from_numpy(np.stack(a)) for v, a in out.items()}


def _batches(n: int, batch: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    # the final short batch is dropped so every step sees a full negative pool
    return [order[i : i + batch] for i in range(0, n - batch + 1, batch)] or [order]


def _check_finite(value: torch.Tensor, where: dict):
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at {where}")


def _adam(params, cfg: ExperimentConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


def _set_lr(optimizer, factor: float) -> float:
    for group in optimizer.param_groups:
        group["lr"] *= factor
    return optimizer.param_groups[0]["lr"]


# --------------------------------------------------------------------------
# Phase 1
# --------------------------------------------------------------------------


def cpc_loss_for(model: ViewModel, blocks: torch.Tensor, cfg: ExperimentConfig) -> torch.Tensor:
    out = model(blocks, cfg.model.pred_steps)
    return cpc_nce_loss(DensePredictionBatch(out["pred"], out["target"], cfg.loss.tau))


@torch.no_grad()
def validation_cpc(model: ViewModel, arrays: ClipArrays, cfg: ExperimentConfig, view: str) -> float:
    if len(arrays) == 0:
        return float("nan")
    was = model.training
    model.eval()
    losses, b = [], cfg.train.batch
    policy = AugmentationPolicy.off()
    for start in range(0, len(arrays), b):
        idx = np.arange(start, min(start + b, len(arrays)))
        if len(idx) < 2:
            continue
        blocks = ssl_batch(arrays, idx, [view], cfg.data.N, None, policy)[view]
        losses.append(float(cpc_loss_for(model, blocks, cfg)) * len(idx))
    model.train(was)
    return sum(losses) / len(arrays)


def train_view_cpc(
    cfg: ExperimentConfig,
    view: str,
    train: ClipArrays,
    val: ClipArrays | None = None,
    epochs: int | None = None,
    log_: MetricsLog | None = None,
    model: ViewModel | None = None,
) -> ViewModel:
    """CPC-only training of one view with its own seed, data order and optimizer."""
    require_unlabeled(train)
    seed = view_seed(cfg.train.seed, view)
    model = model or init_view_model(cfg, view)
    torch.manual_seed(seed + 1)
    rng = np.random.default_rng(seed)
    policy = make_policy(cfg.train.augment)
    optimizer = _adam(model.parameters(), cfg)
    sched = PlateauSchedule(cfg.train.patience, 1e-3, cfg.train.decay_factor, cfg.train.max_decays)
    epochs = cfg.train.phase1_epochs if epochs is None else epochs
    step = 0
    model.train()
    for epoch in range(epochs):
        for idx in _batches(len(train), cfg.train.batch, rng):
            blocks = ssl_batch(train, idx, [view], cfg.data.N, rng, policy)[view]
            loss = cpc_loss_for(model, blocks, cfg)
            _check_finite(loss, {"phase": "phase1", "view": view, "epoch": epoch, "step": step})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if log_ is not None:
                log_.add(phase=f"phase1/{view}", kind="train", step=step, epoch=epoch, cpc=loss.item(), total=loss.item())
            step += 1
        if val is not None and len(val):
            v = validation_cpc(model, val, cfg, view)
            if log_ is not None:
                log_.add(phase=f"phase1/{view}", kind="val", epoch=epoch, step=step, val_loss=v)
            if sched.step(v):
                lr = _set_lr(optimizer, cfg.train.decay_factor)
                if log_ is not None:
                    log_.add(phase=f"phase1/{view}", kind="lr", epoch=epoch, step=step, lr=lr)
    model.eval()
    return model


def train_phase1(
    cfg: ExperimentConfig,
    train: ClipArrays,
    val: ClipArrays | None = None,
    out_dir=None,
    log_: MetricsLog | None = None,
    views: list[str] | None = None,
) -> dict:
    """Independent CPC training of every view; optionally checkpointed."""
    models = {}
    for view in views or cfg.data.views:
        log.info("phase 1: training view %s", view)
        models[view] = train_view_cpc(cfg, view, train.select_views([view]), val and val.select_views([view]), log_=log_)
        if out_dir is not None:
            steps = cfg.train.phase1_epochs * max(len(train) // cfg.train.batch, 1)
            save_models({view: models[view]}, out_dir, "phase1", steps)
    return models


# --------------------------------------------------------------------------
# Phase 2
# --------------------------------------------------------------------------


def joint_objective(
    model: MultiViewModel,
    clip: dict,
    cfg: ExperimentConfig,
    ablation: str,
    instance_ids=None,
):
    dense, emb = model(clip, cfg.model.pred_steps, instance_ids, cfg.loss.tau, cfg.loss.unit)
    weights = cfg.loss.weights()
    cpc = {v: cpc_nce_loss(d) for v, d in dense.items()}
    views = list(emb.values())
    coop = coop_loss(views, weights) if len(views) >= 2 else {}
    return cocon_loss(cpc, coop if coop else 0.0, weights, ablation=ablation)


@torch.no_grad()
def validation_joint(model: MultiViewModel, arrays: ClipArrays, cfg: ExperimentConfig, ablation: str) -> float:
    if len(arrays) == 0:
        return float("nan")
    was = model.training
    model.eval()
    total, count = 0.0, 0
    policy = AugmentationPolicy.off()
    for start in range(0, len(arrays), cfg.train.batch):
        idx = np.arange(start, min(start + cfg.train.batch, len(arrays)))
        if len(idx) < 2:
            continue
        clip = ssl_batch(arrays, idx, model.view_ids, cfg.data.N, None, policy)
        rep = joint_objective(model, clip, cfg, ablation, list(arrays.ids[idx]))
        total += float(rep.total) * len(idx)
        count += len(idx)
    model.train(was)
    return total / max(count, 1)


@torch.no_grad()
def matched_cross_view_distance(model: MultiViewModel, arrays: ClipArrays, cfg: ExperimentConfig, limit: int = 64) -> float:
    """Mean D(h_A^a, h_B^a) over view pairs for held-out clips."""
    was = model.training
    model.eval()
    idx = np.arange(min(limit, len(arrays)))
    clip = ssl_batch(arrays, idx, model.view_ids, cfg.data.N, None, AugmentationPolicy.off())
    hs = {}
    for view, m in model.views.items():
        hs[view] = instance_embedding(m(clip[view], cfg.model.pred_steps)["pooled"], "clip")
    model.train(was)
    dists = [
        float(cosine_distance(hs[a], hs[b]).mean()) for a, b in itertools.combinations(hs, 2)
    ]
    return float(np.mean(dists))


def train_phase2(
    cfg: ExperimentConfig,
    phase1_models: dict,
    train: ClipArrays,
    val: ClipArrays | None = None,
    ablation: str | None = None,
    out_dir=None,
    log_: MetricsLog | None = None,
    epochs: int | None = None,
) -> dict:
    """Joint training of all views under the selected ablation objective.

    The phase-1 models are copied, never modified in place.
    """
    require_unlabeled(train)
    ablation = ablation or cfg.train.ablation
    views = list(phase1_models)
    missing = [v for v in views if v not in train.views]
    if missing:
        raise KeyError(f"training data lacks views {missing}")
    model = MultiViewModel.from_views({v: copy.deepcopy(m) for v, m in phase1_models.items()})
    seed = cfg.train.seed * 7919 + 17
    torch.manual_seed(seed)
    rng = np.random.default_rng([cfg.train.seed, 2])
    policy = make_policy(cfg.train.augment)
    optimizer = _adam(model.parameters(), cfg)
    sched = PlateauSchedule(cfg.train.patience, 1e-3, cfg.train.decay_factor, cfg.train.max_decays)
    epochs = cfg.train.phase2_epochs if epochs is None else epochs
    phase = f"phase2/{ablation}"
    probe = val if val is not None and len(val) else train
    if log_ is not None and len(views) >= 2:
        log_.add(phase=phase, kind="crossview", when="start", distance=matched_cross_view_distance(model, probe, cfg))
    step = 0
    model.train()
    for epoch in range(epochs):
        for idx in _batches(len(train), cfg.train.batch, rng):
            clip = ssl_batch(train, idx, views, cfg.data.N, rng, policy)
            rep = joint_objective(model, clip, cfg, ablation, list(train.ids[idx]))
            _check_finite(rep.total, {"phase": phase, "epoch": epoch, "step": step})
            optimizer.zero_grad()
            rep.total.backward()
            optimizer.step()
            if log_ is not None:
                log_.add(phase=phase, kind="train", step=step, epoch=epoch, ablation=ablation, **rep.to_record())
            step += 1
        if val is not None and len(val):
            v = validation_joint(model, val, cfg, ablation)
            if log_ is not None:
                log_.add(phase=phase, kind="val", epoch=epoch, step=step, val_loss=v)
            if sched.step(v):
                lr = _set_lr(optimizer, cfg.train.decay_factor)
                if log_ is not None:
                    log_.add(phase=phase, kind="lr", epoch=epoch, step=step, lr=lr)
    model.eval()
    if log_ is not None and len(views) >= 2:
        log_.add(phase=phase, kind="crossview", when="end", distance=matched_cross_view_distance(model, probe, cfg))
    models = dict(model.views.items())
    if out_dir is not None:
        save_models(models, out_dir, phase, step, {"ablation": ablation})
    return models
