import math

import numpy as np
import pytest
import torch

from cocon.bench import build_splits
from cocon.config import ExperimentConfig, apply_overrides
from cocon.data import ClipArrays, LabelLeakError
from cocon.losses import ablation_total
from cocon.training import (
    MetricsLog,
    PlateauSchedule,
    TrainingDiverged,
    init_view_model,
    lr_schedule_step,
    matched_cross_view_distance,
    train_phase1,
    train_phase2,
    train_view_cpc,
    view_seed,
)

torch.set_num_threads(1)

TINY = [
    "data.clips=40",
    "data.classes=4",
    "data.frame_size=32",
    "model.width=4",
    "model.D=8",
    "train.batch=8",
    "train.phase1_epochs=2",
    "train.phase2_epochs=2",
    "eval.epochs=3",
    "eval.decay_epoch=2",
]


def tiny_cfg(*extra) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), TINY + list(extra))


@pytest.fixture(scope="module")
def splits():
    return build_splits(tiny_cfg())


@pytest.fixture(scope="module")
def phase1(splits):
    cfg = tiny_cfg()
    return train_phase1(cfg, splits.train.unlabeled(), splits.val.unlabeled())


def params_equal(a, b) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# --------------------------------------------------------------------------
# Learning-rate schedule
# --------------------------------------------------------------------------


def test_strictly_improving_never_decays():
    assert not any(lr_schedule_step([5.0, 4.0, 3.0, 2.0, 1.0, 0.5]))


def test_flat_for_patience_plus_one_decays_once():
    decisions = lr_schedule_step([1.0] * 4, patience=3)
    assert decisions == [False, False, False, True]


def test_improvement_resets_patience():
    losses = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5]
    assert not any(lr_schedule_step(losses, patience=3))


def test_tiny_improvements_count_as_plateau():
    losses = [1.0, 0.9999, 0.9998, 0.9997]
    assert lr_schedule_step(losses, patience=3, threshold=1e-3)[-1]


def test_at_most_two_decays():
    decisions = lr_schedule_step([1.0] * 40, patience=3)
    assert sum(decisions) == 2


def test_schedule_needs_history():
    with pytest.raises(ValueError):
        lr_schedule_step([])


def test_plateau_first_epoch_sets_best():
    s = PlateauSchedule()
    assert s.step(10.0) is False and s.best == 10.0


# --------------------------------------------------------------------------
# Metrics log
# --------------------------------------------------------------------------


def test_metrics_log_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    log = MetricsLog(path=path)
    log.add(phase="phase1/rgb", kind="train", step=0, cpc=1.0)
    log.add(phase="phase1/rgb", kind="train", step=1, cpc=0.5)
    assert MetricsLog.read(path).records == log.records
    with pytest.raises(ValueError):
        log.add(phase="phase1/rgb", kind="train", step=0, cpc=0.1)
    # other phases keep their own step counters
    log.add(phase="phase1/flow", kind="train", step=0, cpc=2.0)


def test_view_seed_is_stable_and_view_specific():
    assert view_seed(0, "rgb") == view_seed(0, "rgb")
    assert view_seed(0, "rgb") != view_seed(0, "flow")
    assert view_seed(0, "rgb") != view_seed(1, "rgb")


# --------------------------------------------------------------------------
# Phase 1
# --------------------------------------------------------------------------


def test_phase1_rejects_labelled_data(splits):
    with pytest.raises(LabelLeakError):
        train_view_cpc(tiny_cfg(), "rgb", splits.train.select_views(["rgb"]), epochs=1)


def test_phase1_smoke_loss_drops_below_chance():
    # N=4, K=3 and about 200 steps of the default model
    cfg = apply_overrides(
        ExperimentConfig(),
        ["data.clips=160", "data.views=[rgb]", "train.phase1_epochs=29", "train.phase2_epochs=0"],
    )
    train = build_splits(cfg).train.unlabeled()
    log = MetricsLog()
    train_view_cpc(cfg, "rgb", train, log_=log)
    losses = [r["cpc"] for r in log.where(kind="train")]
    assert len(losses) >= 200
    candidates = cfg.train.batch * cfg.model.pred_steps * 16
    tail = np.mean(losses[-10:])
    assert tail < math.log(candidates)
    assert tail < 0.8 * np.mean(losses[:10])


def test_phase1_single_view_matches_direct_trainer(splits):
    cfg = tiny_cfg("data.views=[rgb]", "train.phase2_epochs=0")
    train = splits.train.unlabeled().select_views(["rgb"])
    a = train_phase1(cfg, train)["rgb"]
    b = train_view_cpc(cfg, "rgb", train)
    assert params_equal(a, b)


def test_phase1_views_are_independent(splits):
    cfg = tiny_cfg("train.phase1_epochs=1")
    train = splits.train.unlabeled()
    ref = train_phase1(cfg, train)
    perm = np.random.default_rng(0).permutation(len(train))
    shuffled = ClipArrays({"rgb": train.views["rgb"], "flow": train.views["flow"][perm]}, None, train.ids)
    out = train_phase1(cfg, shuffled)
    assert params_equal(ref["rgb"], out["rgb"])
    assert not params_equal(ref["flow"], out["flow"])


def test_training_is_deterministic(splits):
    cfg = tiny_cfg("train.phase1_epochs=1")
    logs = []
    for _ in range(2):
        log = MetricsLog()
        train_phase1(cfg, splits.train.unlabeled(), splits.val.unlabeled(), log_=log)
        logs.append(log.records)
    assert logs[0] == logs[1]


def test_nan_input_aborts(splits):
    train = splits.train.unlabeled().select_views(["rgb"])
    bad = ClipArrays({"rgb": np.full_like(train.views["rgb"], np.nan)}, None, train.ids)
    with pytest.raises(TrainingDiverged):
        train_view_cpc(tiny_cfg("train.augment=false"), "rgb", bad, epochs=1)


# --------------------------------------------------------------------------
# Phase 2
# --------------------------------------------------------------------------


def test_phase2_does_not_modify_phase1_models(splits, phase1):
    before = {v: {k: t.clone() for k, t in m.state_dict().items()} for v, m in phase1.items()}
    train_phase2(tiny_cfg(), phase1, splits.train.unlabeled(), ablation="cocon", epochs=1)
    for v, m in phase1.items():
        for k, t in m.state_dict().items():
            assert torch.equal(t, before[v][k])


def test_lambda_zero_equals_continued_cpc(splits, phase1):
    train = splits.train.unlabeled()
    a = train_phase2(tiny_cfg("loss.lambda=0"), phase1, train, ablation="cocon", epochs=1)
    b = train_phase2(tiny_cfg(), phase1, train, ablation="cpc", epochs=1)
    for v in a:
        assert params_equal(a[v], b[v])


@pytest.mark.parametrize("ablation", ["cpc", "sim_cpc", "sync_cpc", "cocon"])
def test_logged_terms_satisfy_ablation_formula(splits, phase1, ablation):
    cfg = tiny_cfg()
    log = MetricsLog()
    train_phase2(cfg, phase1, splits.train.unlabeled(), ablation=ablation, log_=log, epochs=1)
    w = cfg.loss.weights()
    records = log.where(kind="train")
    assert records
    for r in records:
        cpc = sum(v for k, v in r.items() if k.startswith("cpc/"))
        expected = ablation_total(ablation, cpc, r["sync"], r["sim"], w)
        assert r["total"] == pytest.approx(float(expected), rel=1e-6, abs=1e-6)


def test_phase2_requires_every_view(splits, phase1):
    with pytest.raises(KeyError):
        train_phase2(tiny_cfg(), phase1, splits.train.unlabeled().select_views(["rgb"]), epochs=1)


def test_phase2_rejects_labelled_data(splits, phase1):
    with pytest.raises(LabelLeakError):
        train_phase2(tiny_cfg(), phase1, splits.train, epochs=1)


def test_cocon_pulls_matched_instances_together(splits, phase1):
    cfg = tiny_cfg()
    log = MetricsLog()
    train_phase2(cfg, phase1, splits.train.unlabeled(), splits.val.unlabeled(), ablation="cocon", log_=log, epochs=4)
    start, end = [r["distance"] for r in log.where(kind="crossview")]
    assert end < start


def test_matched_distance_is_a_distance(splits, phase1):
    from cocon.model import MultiViewModel

    d = matched_cross_view_distance(MultiViewModel.from_views(phase1), splits.val.unlabeled(), tiny_cfg())
    assert 0.0 <= d <= 1.0


def test_random_init_differs_by_seed():
    cfg = tiny_cfg()
    assert not params_equal(init_view_model(cfg, "rgb", seed=1), init_view_model(cfg, "rgb", seed=2))
