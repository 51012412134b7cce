import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cocon.bench import build_splits
from cocon.config import ExperimentConfig, apply_overrides
from cocon.data import ClipArrays
from cocon.evaluation import (
    EvalReport,
    accuracy_from_probs,
    averaged_softmax,
    classwise_delta,
    evaluate,
    linear_probe,
    window_starts,
    write_table,
)
from cocon.training import init_view_model

torch.set_num_threads(1)

SMALL = [
    "data.clips=160",
    "data.frame_size=32",
    "model.width=8",
    "model.D=16",
    "eval.epochs=10",
    "eval.decay_epoch=8",
]


def small_cfg(*extra) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), SMALL + list(extra))


@pytest.fixture(scope="module")
def splits():
    return build_splits(small_cfg())


def test_frozen_probe_leaves_backbone_bit_identical(splits):
    cfg = small_cfg("eval.epochs=2")
    model = init_view_model(cfg, "rgb", seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    linear_probe(model, splits.train, splits.test, "rgb", cfg)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert all(p.requires_grad for p in model.parameters())


def test_random_init_probe_beats_chance(splits):
    cfg = small_cfg()
    models = {v: init_view_model(cfg, v, seed=0) for v in cfg.data.views}
    report = evaluate(models, cfg, splits.train, splits.test, provenance="random")
    assert max(report.top1.values()) > 1.0 / cfg.data.classes


def test_report_accuracy_matches_recount(splits):
    cfg = small_cfg("eval.epochs=2")
    models = {"flow": init_view_model(cfg, "flow", seed=1)}
    report = evaluate(models, cfg, splits.train, splits.test, provenance="random")
    probs = report.probs["flow"]
    hits = 0
    for i, label in enumerate(report.labels):
        hits += int(max(range(cfg.data.classes), key=lambda c: probs[i][c]) == label)
    assert report.top1["flow"] == pytest.approx(hits / len(report.labels))
    assert 0.0 <= report.top1["flow"] <= 1.0
    assert len(report.per_class["flow"]) == cfg.data.classes


def test_class_absent_from_train_split_raises(splits):
    cfg = small_cfg("eval.epochs=1")
    keep = splits.train.labels != 3
    train = ClipArrays({v: a[keep] for v, a in splits.train.views.items()}, splits.train.labels[keep], splits.train.ids[keep])
    with pytest.raises(ValueError, match="absent"):
        linear_probe(init_view_model(cfg, "rgb"), train, splits.test, "rgb", cfg)


def test_unlabelled_eval_split_rejected(splits):
    cfg = small_cfg("eval.epochs=1")
    with pytest.raises(ValueError):
        evaluate({"rgb": init_view_model(cfg, "rgb")}, cfg, splits.train, splits.test.unlabeled(), provenance="x")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_softmax_averaging_ignores_window_order(batch, windows, classes, seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(batch, windows, classes, generator=g)
    perm = torch.randperm(windows, generator=g)
    a, b = averaged_softmax(logits), averaged_softmax(logits[:, perm])
    assert torch.allclose(a, b, atol=1e-6)
    assert torch.allclose(a.sum(-1), torch.ones(batch), atol=1e-6)


@pytest.mark.parametrize(
    "total, window, expected",
    [(4, 4, [0]), (6, 4, [0, 2]), (7, 4, [0, 2, 3]), (8, 4, [0, 2, 4]), (5, 1, [0, 1, 2, 3, 4])],
)
def test_window_starts(total, window, expected):
    assert window_starts(total, window) == expected


def test_window_longer_than_clip_rejected():
    with pytest.raises(ValueError):
        window_starts(3, 4)


def test_accuracy_from_probs_per_class():
    probs = np.eye(3)[[0, 1, 2, 0]]
    acc, per_class = accuracy_from_probs(probs, np.array([0, 1, 1, 2]), 3)
    assert acc == 0.5
    assert per_class == [1.0, 0.5, 0.0]


def make_report(per_class, probs=None, labels=None, name="r"):
    labels = labels or [0] * len(per_class)
    probs = probs or {"rgb": np.eye(len(per_class))[labels]}
    return EvalReport(name, "linear_probe", len(per_class), {"rgb": 1.0}, {"rgb": per_class}, probs, labels)


def test_ensemble_is_accuracy_of_averaged_probabilities():
    labels = [0, 1, 1]
    probs = {
        "rgb": np.array([[0.6, 0.4], [0.7, 0.3], [0.2, 0.8]]),
        "flow": np.array([[0.4, 0.6], [0.1, 0.9], [0.6, 0.4]]),
    }
    report = EvalReport("x", "linear_probe", 2, {}, {}, probs, labels)
    # means: [0.5,0.5]->0, [0.4,0.6]->1, [0.4,0.6]->1
    assert report.ensemble_top1() == 1.0
    assert report.ensemble_top1(["rgb"]) == pytest.approx(2 / 3)


def test_classwise_delta_identical_reports_are_zero():
    r = make_report([0.5, 0.25, 1.0])
    assert [d for _, d in classwise_delta(r, r, "rgb")] == [0.0, 0.0, 0.0]


@settings(max_examples=30)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.data())
def test_classwise_delta_matches_subtraction_and_sorts(a, data):
    b = data.draw(st.lists(st.floats(0, 1), min_size=len(a), max_size=len(a)))
    out = classwise_delta(make_report(a), make_report(b), "rgb")
    assert sorted(c for c, _ in out) == list(range(len(a)))
    for c, d in out:
        assert d == a[c] - b[c]
    diffs = [d for _, d in out]
    assert diffs == sorted(diffs, reverse=True)


def test_classwise_delta_mismatched_classes():
    with pytest.raises(ValueError):
        classwise_delta(make_report([0.1, 0.2]), make_report([0.1, 0.2, 0.3]), "rgb")


def test_report_json_round_trip(tmp_path):
    r = make_report([0.5, 1.0], labels=[1, 0])
    back = EvalReport.from_json(r.save(tmp_path / "r.json").read_text())
    assert back.top1 == r.top1 and back.per_class == r.per_class and back.labels == r.labels
    assert np.array_equal(back.probs["rgb"], r.probs["rgb"])
    assert json.loads(r.to_json())["provenance"] == "r"


def test_table_csv_columns(tmp_path):
    rows = [{"config": "cpc", "view": "rgb", "top1": 0.5, "per_class": [0.4, 0.6]}]
    text = write_table(rows, tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "config,view,top1,class_0,class_1"
    assert text[1] == "cpc,rgb,0.5,0.4,0.6"
