"""Loss-ablation benchmark on the synthetic data set.

For every seed: render the splits, train phase 1 once, continue with each
ablation in phase 2 from the same phase-1 weights and linear-probe every view.
The ``cpc`` column continues CPC-only training for the phase-2 epochs so that
all trained columns see the same number of updates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from cocon.config import ExperimentConfig, apply_overrides
from cocon.data import ClipArrays, DatasetManifest, build_arrays, make_dataset
from cocon.evaluation import EvalReport, evaluate
from cocon.training import MetricsLog, init_view_model, train_phase1, train_phase2

log = logging.getLogger(__name__)

COLUMNS = ("random", "cpc", "sim_cpc", "sync_cpc", "cocon")

# shortened schedule that keeps three seeds of the ablation table on one CPU
# core within half an hour
BENCHMARK_OVERRIDES = ("train.phase1_epochs=12", "train.phase2_epochs=8")


def benchmark_config(extra=()) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), list(BENCHMARK_OVERRIDES) + list(extra))


@dataclass
class Splits:
    train: ClipArrays
    val: ClipArrays
    test: ClipArrays


def dataset_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    d = cfg.data
    return make_dataset(d.clips, d.classes, d.split_seed, tuple(d.splits))


def build_splits(cfg: ExperimentConfig, views=None, manifest: DatasetManifest | None = None) -> Splits:
    d = cfg.data
    manifest = manifest or dataset_manifest(cfg)
    views = tuple(views or d.views)
    kw = dict(
        views=views,
        frame_size=d.frame_size,
        num_blocks=d.total_blocks,
        block_frames=d.K,
        stride=d.stride,
        num_classes=d.classes,
        **d.scene_kwargs(),
    )
    return Splits(*(build_arrays(manifest.split(s), **kw) for s in ("train", "val", "test")))


@dataclass
class SeedResult:
    seed: int
    reports: dict = field(default_factory=dict)  # column -> EvalReport
    models: dict = field(default_factory=dict)  # column -> {view: ViewModel}
    logs: dict = field(default_factory=dict)
    seconds: float = 0.0

    def top1(self, column: str, view: str) -> float:
        return self.reports[column].top1[view]


def run_seed(
    cfg: ExperimentConfig,
    splits: Splits,
    seed: int,
    columns=COLUMNS,
    phase1_models: dict | None = None,
    keep_models: bool = False,
    probe_views=None,
) -> SeedResult:
    """Train and probe every requested column for one seed.

    ``phase1_models`` supplies already trained per-view models; missing views
    are trained here. ``probe_views`` restricts evaluation to some views.
    """
    t0 = time.time()
    cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
    views = list(cfg.data.views)
    train_ssl = splits.train.select_views(views).unlabeled()
    val_ssl = splits.val.select_views(views).unlabeled()
    result = SeedResult(seed)
    metrics = MetricsLog()
    if any(c != "random" for c in columns):
        p1 = dict(phase1_models or {})
        todo = [v for v in views if v not in p1]
        if todo:
            p1.update(train_phase1(cfg, train_ssl, val_ssl, log_=metrics, views=todo))
        p1 = {v: p1[v] for v in views}
        result.models["phase1"] = p1
    for column in columns:
        log.info("seed %d: column %s", seed, column)
        if column == "random":
            models = {v: init_view_model(cfg, v, seed=seed + 10_000) for v in views}
        else:
            models = train_phase2(cfg, p1, train_ssl, val_ssl, ablation=column, log_=metrics)
        probed = {v: models[v] for v in (probe_views or views)}
        result.reports[column] = evaluate(probed, cfg, splits.train, splits.test, provenance=column, seed=seed)
        if keep_models or column in ("cpc", "cocon"):
            result.models[column] = models
    result.logs = metrics
    result.seconds = time.time() - t0
    return result


def table_rows(results: list[SeedResult], columns=COLUMNS) -> list[dict]:
    """Seed-averaged accuracy per (column, view)."""
    rows = []
    views = list(results[0].reports[columns[0]].top1)
    for view in views:
        for column in columns:
            accs = [r.top1(column, view) for r in results]
            per_class = np.mean([r.reports[column].per_class[view] for r in results], axis=0)
            rows.append(
                {
                    "config": column,
                    "view": view,
                    "top1": float(np.mean(accs)),
                    "per_class": per_class.tolist(),
                    "seeds": [float(a) for a in accs],
                }
            )
    return rows


def mean_top1(results: list[SeedResult], column: str, view: str) -> float:
    return float(np.mean([r.top1(column, view) for r in results]))


def report_for(results: list[SeedResult], column: str) -> list[EvalReport]:
    return [r.reports[column] for r in results]
