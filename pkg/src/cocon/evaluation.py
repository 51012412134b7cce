"""Downstream action classification on top of learned view models."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cocon.config import ExperimentConfig
from cocon.data import AugmentationPolicy, ClipArrays, augment
from cocon.model import ViewModel, set_requires_grad, spatial_max


@dataclass
class EvalReport:
    provenance: str
    mode: str
    num_classes: int
    top1: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)  # view -> (n_test, A) averaged softmax
    labels: list = field(default_factory=list)

    def predictions(self, view: str) -> np.ndarray:
        return np.asarray(self.probs[view]).argmax(1)

    def ensemble_top1(self, views=None) -> float:
        views = views or list(self.probs)
        mean = np.mean([np.asarray(self.probs[v]) for v in views], axis=0)
        return float((mean.argmax(1) == np.asarray(self.labels)).mean())

    def to_json(self) -> str:
        d = asdict(self)
        d["probs"] = {v: np.asarray(p).tolist() for v, p in self.probs.items()}
        d["labels"] = [int(x) for x in self.labels]
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["probs"] = {v: np.asarray(p) for v, p in d["probs"].items()}
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, list]:
    pred = np.asarray(probs).argmax(1)
    labels = np.asarray(labels)
    per_class = []
    for c in range(num_classes):
        sel = labels == c
        per_class.append(float((pred[sel] == c).mean()) if sel.any() else float("nan"))
    return float((pred == labels).mean()), per_class


def window_starts(total_blocks: int, window: int) -> list[int]:
    """Window starts with half-window overlap; the last window ends at the clip end."""
    if window > total_blocks:
        raise ValueError(f"window {window} longer than clip ({total_blocks} blocks)")
    hop = max(window // 2, 1)
    starts = list(range(0, total_blocks - window + 1, hop))
    if starts[-1] != total_blocks - window:
        starts.append(total_blocks - window)
    return starts


def _window_contexts(model: ViewModel, z: torch.Tensor, window: int) -> torch.Tensor:
    """Context per window: (B, n_windows, hidden)."""
    starts = window_starts(z.shape[1], window)
    ctx = [spatial_max(model.aggregator(z[:, s : s + window])[:, -1]) for s in starts]
    return torch.stack(ctx, 1)


@torch.no_grad()
def extract_window_features(model: ViewModel, blocks: np.ndarray, window: int, batch: int = 32) -> np.ndarray:
    """Frozen contexts for every clip and window, shape (n, n_windows, hidden)."""
    was = model.training
    model.eval()
    feats = []
    for start in range(0, len(blocks), batch):
        x = torch.from_numpy(blocks[start : start + batch].astype(np.float32))
        feats.append(_window_contexts(model, model.encode(x), window))
    model.train(was)
    return torch.cat(feats).numpy()


def averaged_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Average per-window class probabilities: (B, W, A) -> (B, A)."""
    return F.softmax(logits, -1).mean(1)


class ProbeHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int, dropout: float):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(in_dim, num_classes)

    def forward(self, x):
        return self.fc(self.dropout(x))


def _check_classes(labels: np.ndarray, num_classes: int):
    missing = sorted(set(range(num_classes)) - set(np.asarray(labels).tolist()))
    if missing:
        raise ValueError(f"classes {missing} absent from the training split")


def _step_lr(optimizer, epoch: int, cfg: ExperimentConfig):
    if epoch == cfg.eval.decay_epoch:
        for g in optimizer.param_groups:
            g["lr"] *= 0.1


def linear_probe(
    model: ViewModel,
    train: ClipArrays,
    test: ClipArrays,
    view: str,
    cfg: ExperimentConfig,
    seed: int = 0,
) -> np.ndarray:
    """Train a dropout+linear head on frozen contexts; return test probabilities."""
    num_classes = cfg.data.classes
    _check_classes(train.labels, num_classes)
    set_requires_grad(model, False)
    try:
        f_train = extract_window_features(model, train.views[view], cfg.window)
        f_test = extract_window_features(model, test.views[view], cfg.window)
    finally:
        set_requires_grad(model, True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    n, w, d = f_train.shape
    # frozen features are standardized with train statistics; raw contexts
    # can have tiny spread, which the dropout head cannot exploit
    mean = f_train.reshape(n * w, d).mean(0)
    std = f_train.reshape(n * w, d).std(0) + 1e-6
    f_train = (f_train - mean) / std
    f_test = (f_test - mean) / std
    x = torch.from_numpy(f_train.reshape(n * w, d))
    y = torch.from_numpy(np.repeat(train.labels, w))
    head = ProbeHead(d, num_classes, cfg.eval.dropout)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.eval.lr)
    for epoch in range(cfg.eval.epochs):
        _step_lr(opt, epoch, cfg)
        head.train()
        order = rng.permutation(len(x))
        for i in range(0, len(order), cfg.eval.batch):
            idx = order[i : i + cfg.eval.batch]
            loss = F.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    head.eval()
    with torch.no_grad():
        logits = head(torch.from_numpy(f_test))
        return averaged_softmax(logits).numpy()


def finetune(
    model: ViewModel,
    train: ClipArrays,
    test: ClipArrays,
    view: str,
    cfg: ExperimentConfig,
    seed: int = 0,
) -> np.ndarray:
    """End-to-end training of a copy of the view model plus head."""
    num_classes = cfg.data.classes
    _check_classes(train.labels, num_classes)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = copy.deepcopy(model)
    head = ProbeHead(net.spec.hidden_dim, num_classes, cfg.eval.dropout)
    params = list(net.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.eval.lr, weight_decay=cfg.train.weight_decay)
    policy = AugmentationPolicy() if cfg.train.augment else AugmentationPolicy.off()
    labels = torch.from_numpy(train.labels)
    for epoch in range(cfg.eval.epochs):
        _step_lr(opt, epoch, cfg)
        net.train()
        head.train()
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.eval.batch):
            idx = order[i : i + cfg.eval.batch]
            if len(idx) < 2:
                continue
            blocks = [augment({view: train.views[view][j].astype(np.float32)}, policy, rng)[view] for j in idx]
            x = torch.from_numpy(np.stack(blocks))
            logits = head(_window_contexts(net, net.encode(x), cfg.window))
            y = labels[idx].repeat_interleave(logits.shape[1])
            loss = F.cross_entropy(logits.reshape(-1, num_classes), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    head.eval()
    with torch.no_grad():
        probs = []
        for start in range(0, len(test), 32):
            x = torch.from_numpy(test.views[view][start : start + 32].astype(np.float32))
            probs.append(averaged_softmax(head(_window_contexts(net, net.encode(x), cfg.window))))
        return torch.cat(probs).numpy()


def evaluate(
    models: dict,
    cfg: ExperimentConfig,
    train: ClipArrays,
    test: ClipArrays,
    provenance: str,
    mode: str | None = None,
    seed: int = 0,
) -> EvalReport:
    """Probe or fine-tune every view model and report test accuracy."""
    if train.labels is None or test.labels is None:
        raise ValueError("evaluation splits must carry labels")
    mode = mode or cfg.eval.mode
    report = EvalReport(provenance=provenance, mode=mode, num_classes=cfg.data.classes, labels=test.labels.tolist())
    for view, model in models.items():
        fn = linear_probe if mode == "linear_probe" else finetune
        probs = fn(model, train, test, view, cfg, seed=seed)
        top1, per_class = accuracy_from_probs(probs, test.labels, cfg.data.classes)
        report.top1[view] = top1
        report.per_class[view] = per_class
        report.probs[view] = probs
    return report


def classwise_delta(report_a: EvalReport, report_b: EvalReport, view: str) -> list[tuple[int, float]]:
    """Per-class accuracy of ``a`` minus ``b``, sorted by descending difference."""
    a, b = report_a.per_class[view], report_b.per_class[view]
    if len(a) != len(b) or report_a.num_classes != report_b.num_classes:
        raise ValueError("reports cover different class sets")
    deltas = [(c, a[c] - b[c]) for c in range(len(a))]
    return sorted(deltas, key=lambda item: (-item[1], item[0]))


def write_table(rows: list[dict], path) -> Path:
    """CSV with columns config, view, top1, class_0..class_{A-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_cls = max((len(r.get("per_class", [])) for r in rows), default=0)
    fields = ["config", "view", "top1"] + [f"class_{c}" for c in range(n_cls)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            row = {"config": r["config"], "view": r["view"], "top1": r["top1"]}
            row.update({f"class_{c}": v for c, v in enumerate(r.get("per_class", []))})
            w.writerow(row)
    return path


def report_rows(report: EvalReport, config: str | None = None) -> list[dict]:
    return [
        {"config": config or report.provenance, "view": v, "top1": report.top1[v], "per_class": report.per_class[v]}
        for v in report.top1
    ]
