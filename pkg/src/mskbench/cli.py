"""Command-line entry points for every workflow.

Subcommands: synth, pretrain, finetune, sweep, errormap, evaluate, serve.
Each accepts an optional ``--config`` JSON file whose keys are overridden by
explicit flags, writes a frozen echo of the resolved configuration next to
its outputs, exits 0 on success, and prints one machine-readable JSON error
line to stderr on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid config {path}: {exc}") from exc


def _echo_config(out_dir: Path, command: str, params: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **{k: v for k, v in params.items() if v is not None}}
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _parse_mix(text: str | None) -> dict | None:
    if text is None:
        return None
    mix = {}
    for part in text.split(","):
        kind, _, value = part.partition("=")
        mix[kind.strip()] = float(value)
    return mix


def _resolve_task(manifest, task_id: str):
    from .finetune import register_builtin_tasks, task_for_manifest

    if task_id in manifest.tasks:
        return task_for_manifest(manifest, task_id)
    builtin = register_builtin_tasks()
    if task_id in builtin:
        return builtin[task_id]
    raise CliError(f"unknown task {task_id!r}")


def _build_plan(manifest, args):
    from .datamodel import make_splits

    return make_splits(
        manifest,
        test_frac=args.test_frac,
        k=args.folds,
        seed=args.seed,
        stratify_key=args.task if getattr(args, "task", None) in manifest.tasks else None,
        group_key=args.group_key,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    from .synthgen import CorpusSpec, build_corpus

    cfg = _load_config(args.config)
    spec = CorpusSpec(
        n_normal=args.n_normal if args.n_normal is not None else cfg.get("n_normal", 100),
        n_abnormal=args.n_abnormal if args.n_abnormal is not None else cfg.get("n_abnormal", 100),
        size=tuple(cfg.get("size", (args.size, args.size))),
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
        anomaly_mix=_parse_mix(args.mix) or cfg.get("anomaly_mix", {"tumor_blob": 1 / 3, "fracture_gap": 1 / 3, "implant_bar": 1 / 3}),
        n_locations=args.n_locations if args.n_locations is not None else cfg.get("n_locations", 8),
    )
    out = Path(args.out)
    manifest = build_corpus(spec, out)
    _echo_config(out, "synth", {"spec": spec.__dict__})
    print(json.dumps({"manifest": str(out / "manifest.json"), "entries": len(manifest)}))
    return 0


def _cmd_pretrain(args) -> int:
    from .datamodel import load_manifest
    from .mae import MaeConfig, pretrain

    cfg_dict = _load_config(args.config)
    base = MaeConfig.toy() if args.toy else MaeConfig()
    params = base.to_dict()
    params.update(cfg_dict)
    for key in ("epochs", "batch_size", "seed"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if args.lr is not None:
        params["base_lr"] = args.lr
    config = MaeConfig.from_dict(params)

    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    _echo_config(
        out, "pretrain", {"manifest": args.manifest, "init": args.init_ckpt, "config": config.to_dict()}
    )
    result = pretrain(manifest, config, out, init_checkpoint=args.init_ckpt)
    print(
        json.dumps(
            {
                "best_checkpoint": str(result.best_checkpoint),
                "last_checkpoint": str(result.last_checkpoint),
                "final_loss": result.losses[-1] if result.losses else None,
            }
        )
    )
    return 0


def _finetune_config(args, cfg_dict):
    from .finetune import FinetuneConfig

    base = FinetuneConfig.conv_defaults() if cfg_dict.get("backbone") == "conv" else FinetuneConfig()
    params = base.to_dict()
    params.update(cfg_dict)
    if args.ckpt is not None:
        params["backbone_checkpoint"] = args.ckpt
        meta = json.loads((Path(args.ckpt) / "metadata.json").read_text())
        params.setdefault("image_size", meta["config"]["image_size"])
        params["image_size"] = meta["config"]["image_size"]
        params["channels"] = meta["config"]["channels"]
    for key in ("epochs", "batch_size", "seed"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    if args.lr is not None:
        params["base_lr"] = args.lr
    return FinetuneConfig(**params)


def _cmd_finetune(args) -> int:
    from .datamodel import load_manifest
    from .finetune import evaluate_test, finetune_cv

    manifest = load_manifest(args.manifest)
    task = _resolve_task(manifest, args.task)
    config = _finetune_config(args, _load_config(args.config))
    plan = _build_plan(manifest, args)

    out = Path(args.out)
    _echo_config(out, "finetune", {"manifest": args.manifest, "task": args.task, "config": config.to_dict()})
    (out / "plan.json").write_text(
        json.dumps(
            {
                "test_ids": list(plan.test_ids),
                "folds": [[list(t), list(v)] for t, v in plan.folds],
                "seed": plan.seed,
                "group_key": plan.group_key,
                "stratify_key": plan.stratify_key,
                "notes": list(plan.notes),
            },
            indent=1,
        )
    )
    result = finetune_cv(manifest, task, plan, config, run_dir=out)
    report = evaluate_test(result, manifest, plan, task, group_field=args.group_field)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(json.dumps({"run_dir": str(out), "metrics": {k: v.mean for k, v in report.reports.items()}}))
    return 0


def _cmd_sweep(args) -> int:
    from .datamodel import load_manifest
    from .finetune import label_efficiency_sweep

    manifest = load_manifest(args.manifest)
    task = _resolve_task(manifest, args.task)
    config = _finetune_config(args, _load_config(args.config))
    plan = _build_plan(manifest, args)

    fractions = tuple(args.fractions)
    out = Path(args.out)
    _echo_config(
        out,
        "sweep",
        {"manifest": args.manifest, "task": args.task, "fractions": fractions, "seeds": args.sweep_seeds},
    )
    result = label_efficiency_sweep(
        manifest, task, plan, config, fractions=fractions, seeds=tuple(args.sweep_seeds)
    )
    (out / "sweep.json").write_text(json.dumps(result.to_dict(), indent=1))
    print(json.dumps({"sweep": str(out / "sweep.json"), "curve": {str(k): v for k, v in result.curve().items()}}))
    return 0


def _cmd_errormap(args) -> int:
    from PIL import Image as PilImage

    from .errormap import compare_groups, generate_error_map, render_heatmap, save_error_map, score_image

    out = Path(args.out)
    if args.compare:
        normal = json.loads(Path(args.compare[0]).read_text())
        abnormal = json.loads(Path(args.compare[1]).read_text())
        result = compare_groups(np.asarray(normal, dtype=float), np.asarray(abnormal, dtype=float))
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "U": result.statistic,
            "p": result.p_value,
            "medians": list(result.medians),
            "stars": result.stars,
        }
        (out / "comparison.json").write_text(json.dumps(doc, indent=1))
        _echo_config(out, "errormap", {"compare": args.compare})
        print(json.dumps(doc))
        return 0

    if not args.image or not args.ckpt:
        raise CliError("errormap requires --image and --ckpt (or --compare)")
    from .datamodel import ingest_image
    from .mae import load_checkpoint

    model, meta = load_checkpoint(args.ckpt)
    size = model.config.image_size
    sample = ingest_image(args.image, (size, size), model.config.channels)
    emap = generate_error_map(sample, model, n_passes=args.passes, seed=args.seed or 0)

    out.mkdir(parents=True, exist_ok=True)
    save_error_map(emap, out / "errormap.npz")
    PilImage.fromarray(render_heatmap(emap), mode="L").save(out / "heatmap.png")
    doc = {
        "image": str(args.image),
        "passes": emap.n_passes,
        "mask_ratio": model.config.mask_ratio,
        "score_whole_image": score_image(emap),
        "defined_fraction": float(emap.defined().mean()),
    }
    (out / "score.json").write_text(json.dumps(doc, indent=1))
    _echo_config(out, "errormap", {"image": args.image, "ckpt": args.ckpt, "passes": args.passes})
    print(json.dumps(doc))
    return 0


def _cmd_evaluate(args) -> int:
    import torch

    from .datamodel import SplitPlan, load_manifest
    from .finetune import FinetuneConfig, FinetuneResult, FoldOutcome, evaluate_test

    run = Path(args.run)
    manifest = load_manifest(args.manifest)
    config = FinetuneConfig(**json.loads((run / "config.json").read_text()))
    plan_doc = json.loads((run / "plan.json").read_text())
    plan = SplitPlan(
        test_ids=tuple(plan_doc["test_ids"]),
        folds=tuple((tuple(t), tuple(v)) for t, v in plan_doc["folds"]),
        seed=plan_doc["seed"],
        group_key=plan_doc.get("group_key"),
        stratify_key=plan_doc.get("stratify_key"),
        notes=tuple(plan_doc.get("notes", ())),
    )
    task = _resolve_task(manifest, args.task)

    folds = []
    for fi in range(len(plan.folds)):
        fold_dir = run / f"fold{fi}"
        state = torch.load(fold_dir / "best.ckpt", weights_only=True)
        meta = json.loads((fold_dir / "report.json").read_text())
        folds.append(
            FoldOutcome(
                fold=fi,
                best_epoch=meta["best_epoch"],
                best_metric=meta["best_metric"],
                state_dict=state,
                history=[],
            )
        )
    result = FinetuneResult(task=task, config=config, folds=folds)
    report = evaluate_test(result, manifest, plan, task, group_field=args.group_field)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    host = args.host or os.environ.get("MSKBENCH_HOST", "127.0.0.1")
    port = args.port or int(os.environ.get("MSKBENCH_PORT", "8000"))
    log_level = os.environ.get("MSKBENCH_LOG_LEVEL", "info")
    serve(args.ckpt, detector_json=args.detector_json, host=host, port=port, log_level=log_level)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mskbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n-normal", type=int, dest="n_normal")
    p.add_argument("--n-abnormal", type=int, dest="n_abnormal")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--mix", help="kind=frac,... e.g. tumor_blob=0.5,fracture_gap=0.5")
    p.add_argument("--n-locations", type=int, dest="n_locations")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain the masked autoencoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale config")
    p.add_argument("--init-ckpt", dest="init_ckpt", help="warm-start from an existing checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_pretrain)

    for name in ("finetune", "sweep"):
        p = sub.add_parser(name, help=f"{name} a task head on a backbone")
        p.add_argument("--manifest", required=True)
        p.add_argument("--task", required=True)
        p.add_argument("--ckpt", help="backbone checkpoint directory")
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--test-frac", type=float, default=0.1, dest="test_frac")
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--group-key", default="patient_id", dest="group_key")
        p.add_argument("--group-field", dest="group_field")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        if name == "sweep":
            p.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.2, 0.5, 0.9])
            p.add_argument("--sweep-seeds", type=int, nargs="+", default=[0], dest="sweep_seeds")
            p.set_defaults(func=_cmd_sweep)
        else:
            p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("errormap", help="zero-shot abnormality map or group comparison")
    p.add_argument("--image")
    p.add_argument("--ckpt")
    p.add_argument("--passes", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--compare", nargs=2, metavar=("NORMAL_JSON", "ABNORMAL_JSON"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_errormap)

    p = sub.add_parser("evaluate", help="re-evaluate a finetune run on its test split")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--group-field", dest="group_field")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--detector-json", dest="detector_json")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=_cmd_serve)

    return parser


def cli(argv=None) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": {"command": args.command, "message": str(exc)}}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - uniform machine-readable failure line
        print(
            json.dumps({"error": {"command": args.command, "type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
