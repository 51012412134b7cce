"""Command-line entry point: ``cocon <command> [options]``.

Every command writes below a run directory (``--run-dir``, else the
``COCON_RUN_DIR`` environment variable, else ``./runs``) together with the
resolved config. A stage whose output directory holds a ``DONE`` marker for
the same inputs is skipped unless ``--force`` is given.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml
from pydantic import ValidationError

from cocon import analysis, bench
from cocon.config import ExperimentConfig, apply_overrides, json_schema, load_config, save_config
from cocon.data import DatasetManifest, SyntheticSceneConfig
from cocon.evaluation import evaluate, report_rows, write_table
from cocon.model import load_models
from cocon.training import MetricsLog, init_view_model, train_phase1, train_phase2

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DONE = "DONE"

log = logging.getLogger("cocon")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# Run-directory plumbing
# --------------------------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        return apply_overrides(cfg, args.set or [])
    except (ValidationError, ValueError, yaml.YAMLError, OSError) as exc:
        raise ConfigError(" ".join(str(exc).split())) from exc


def run_root(args) -> Path:
    return Path(args.run_dir or os.environ.get("COCON_RUN_DIR") or "runs")


def fingerprint(command: str, cfg: ExperimentConfig, extra: dict) -> str:
    payload = json.dumps({"command": command, "config": cfg.dump(), "args": extra}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def is_done(out: Path, key: str) -> bool:
    marker = out / DONE
    return marker.exists() and marker.read_text().strip() == key


def begin(out: Path, cfg: ExperimentConfig, key: str, force: bool) -> bool:
    """Prepare ``out``; False means the stage is already complete."""
    if not force and is_done(out, key):
        print(f"{out}: up to date (use --force to rerun)")
        return False
    out.mkdir(parents=True, exist_ok=True)
    (out / DONE).unlink(missing_ok=True)
    save_config(cfg, out / "config.yaml")
    return True


def finish(out: Path, key: str):
    (out / DONE).write_text(key + "\n")
    print(f"{out}: done")


def manifest_for(root: Path, cfg: ExperimentConfig) -> DatasetManifest:
    path = root / "dataset" / "manifest.jsonl"
    if path.exists():
        return DatasetManifest.read(path)
    return bench.dataset_manifest(cfg)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_dataset(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out).parent if args.out else run_root(args) / "dataset"
    key = fingerprint("dataset", cfg, {})
    if not begin(out, cfg, key, args.force):
        return EXIT_OK
    path = Path(args.out) if args.out else out / "manifest.jsonl"
    manifest = bench.dataset_manifest(cfg)
    manifest.write(path)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {path} {counts}")
    finish(out, key)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    root = run_root(args)
    views = list(cfg.data.views)
    if args.phase == 1:
        out = root / "phase1"
        extra = {"phase": 1}
    else:
        ablation = args.ablation or cfg.train.ablation
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"ablation": ablation})})
        out = root / "phase2" / ablation
        init = Path(args.init) if args.init else root / "phase1"
        extra = {"phase": 2, "init": str(init)}
    key = fingerprint("train", cfg, extra)
    if not begin(out, cfg, key, args.force):
        return EXIT_OK
    splits = bench.build_splits(cfg, views, manifest_for(root, cfg))
    train, val = splits.train.unlabeled(), splits.val.unlabeled()
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    metrics = MetricsLog(path=metrics_path)
    if args.phase == 1:
        train_phase1(cfg, train, val, out_dir=out, log_=metrics)
    else:
        phase1 = load_models(init, views)
        train_phase2(cfg, phase1, train, val, ablation=cfg.train.ablation, out_dir=out, log_=metrics)
    finish(out, key)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    root = run_root(args)
    mode = {"probe": "linear_probe", "finetune": "finetune"}[args.mode]
    views = list(cfg.data.views)
    name = args.name or ("random" if args.init == "random" else Path(args.init).name)
    out = root / "eval" / f"{name}-{args.mode}"
    key = fingerprint("eval", cfg, {"init": args.init, "mode": mode})
    if not begin(out, cfg, key, args.force):
        return EXIT_OK
    if args.init == "random":
        models = {v: init_view_model(cfg, v, seed=cfg.train.seed + 10_000) for v in views}
    else:
        models = load_models(args.init, views)
    splits = bench.build_splits(cfg, views, manifest_for(root, cfg))
    report = evaluate(models, cfg, splits.train, splits.test, provenance=name, mode=mode, seed=cfg.train.seed)
    report.save(out / "report.json")
    write_table(report_rows(report), out / "table.csv")
    for view, acc in report.top1.items():
        print(f"{name} {view}: top1 {acc:.4f}")
    finish(out, key)
    return EXIT_OK


def _task_export(args, cfg, out):
    views = list(cfg.data.views)
    models = load_models(args.checkpoint, views)
    splits = bench.build_splits(cfg, views, manifest_for(run_root(args), cfg))
    arrays = getattr(splits, args.split)
    store = analysis.export_embeddings(models, arrays.views, arrays.labels, arrays.ids, provenance=str(args.checkpoint))
    store.save(out)
    print(f"exported {len(store)} vectors of dim {store.dim}")


def _task_histograms(args, cfg, out):
    store = analysis.EmbeddingStore.load(args.store)
    for view in [args.view] if args.view else store.views:
        result = analysis.similarity_histograms(store, view, bins=args.bins)
        analysis.save_histograms(result, out / f"{view}.csv")
        print(f"{view}: separation {result['separation']:.4f}")


def _task_consistency(args, cfg, out):
    store = analysis.EmbeddingStore.load(args.store)
    result = analysis.class_consistency(store, args.top_m, args.min_shared, per_video=args.per_video)
    (out / "consistency.json").write_text(result.to_json())
    print(f"classes with >= {args.min_shared} of top-{args.top_m} shared neighbours: {result.count}")


def _task_retrieve(args, cfg, out):
    store = analysis.EmbeddingStore.load(args.store)
    view = args.view or store.views[0]
    hits = analysis.nearest_neighbors(store, args.query, args.k, view)
    result = {
        "query": args.query,
        "view": view,
        "neighbors": [{"video": v, "similarity": s} for v, s in hits],
        "precision_at_k": analysis.precision_at_k(store, view, args.k),
    }
    (out / f"retrieve_{args.query}_{view}.json").write_text(json.dumps(result, indent=2))
    for v, s in hits:
        print(f"{v}\t{s:.4f}")


def _task_align(args, cfg, out):
    view = args.view or cfg.data.views[0]
    model = load_models(args.checkpoint, [view])[view]
    d = cfg.data
    clips = []
    for seed in (args.seed, args.other_seed if args.other_seed is not None else args.seed):
        scene = SyntheticSceneConfig(
            label=args.label, seed=seed, frame_size=d.frame_size, num_classes=d.classes, views=(view,), **d.scene_kwargs()
        )
        clips.append(analysis.render_blocks(scene, args.blocks, d.K, d.stride, view))
    amap = analysis.align_videos(model, clips[0], clips[1], args.blocks, smooth=args.smooth)
    amap.save(out / f"align_{args.label}_{args.seed}.csv")
    peak = analysis.autocorrelation_peak(analysis.diagonal_profile(amap.similarity))
    print(f"alignment {amap.matrix.shape}, autocorrelation peak at lag {peak}")


TASKS = {
    "export": _task_export,
    "histograms": _task_histograms,
    "consistency": _task_consistency,
    "retrieve": _task_retrieve,
    "align": _task_align,
}


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    needs = {"export": "checkpoint", "align": "checkpoint", "histograms": "store", "consistency": "store", "retrieve": "store"}
    required = needs[args.task]
    if getattr(args, required) is None:
        raise ConfigError(f"--task {args.task} needs --{required}")
    if args.task == "retrieve" and args.query is None:
        raise ConfigError("--task retrieve needs --query")
    out = run_root(args) / "analysis" / args.task
    extra = {k: v for k, v in vars(args).items() if k not in ("func", "force", "run_dir", "set", "config")}
    key = fingerprint("analyze", cfg, extra)
    if not begin(out, cfg, key, args.force):
        return EXIT_OK
    TASKS[args.task](args, cfg, out)
    finish(out, key)
    return EXIT_OK


def cmd_repro_table1(args, cfg: ExperimentConfig) -> int:
    root = run_root(args)
    out = root / "table1"
    key = fingerprint("repro-table1", cfg, {"seeds": args.seeds})
    if not begin(out, cfg, key, args.force):
        return EXIT_OK
    splits = bench.build_splits(cfg, manifest=manifest_for(root, cfg))
    results = []
    for seed in args.seeds:
        res = bench.run_seed(cfg, splits, seed)
        for column, report in res.reports.items():
            report.save(out / f"seed{seed}" / f"{column}.json")
        results.append(res)
    rows = bench.table_rows(results)
    write_table(rows, out / "table1.csv")
    for row in rows:
        print(f"{row['config']:>9} {row['view']:>9} {row['top1']:.4f}")
    finish(out, key)
    return EXIT_OK


def cmd_schema(args, cfg: ExperimentConfig) -> int:
    print(json.dumps(json_schema(), indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override, repeatable")
    common.add_argument("--run-dir", help="output root (default: $COCON_RUN_DIR or ./runs)")
    common.add_argument("--force", action="store_true", help="rerun even if the stage is complete")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cocon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="write the clip manifest")
    p.add_argument("--out", help="manifest path (default: <run-dir>/dataset/manifest.jsonl)")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="phase 1 (per-view CPC) or phase 2 (joint)")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--ablation", choices=("cpc", "sim_cpc", "sync_cpc", "cocon"))
    p.add_argument("--init", help="phase-1 checkpoint directory (default: <run-dir>/phase1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="linear probe or fine-tune")
    p.add_argument("--init", required=True, help="'random' or a checkpoint directory")
    p.add_argument("--mode", choices=("probe", "finetune"), default="probe")
    p.add_argument("--name", help="report name (default: derived from --init)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="embedding analyses")
    p.add_argument("--task", choices=sorted(TASKS), required=True)
    p.add_argument("--checkpoint", help="checkpoint directory (export, align)")
    p.add_argument("--store", help="embedding store directory (histograms, consistency, retrieve)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--view")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--top-m", type=int, default=4)
    p.add_argument("--min-shared", type=int, default=3)
    p.add_argument("--per-video", action="store_true")
    p.add_argument("--query", type=int)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--label", type=int, default=0, help="class of the rendered clip (align)")
    p.add_argument("--seed", type=int, default=0, help="seed of the first clip (align)")
    p.add_argument("--other-seed", type=int, help="seed of the second clip; self-alignment if omitted")
    p.add_argument("--blocks", type=int, default=18)
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("repro-table1", parents=[common], help="loss-ablation table on the synthetic benchmark")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_repro_table1)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(func=cmd_schema, config=None, set=None, verbose=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
