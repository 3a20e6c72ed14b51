"""Command-line entry point: ``mrcgat synth|train|eval|infer|explain``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from mrcgat.config import HELP, TrainingConfig, read_config_file
from mrcgat.data import DEFAULT_DIMS, RELATIONS, Dataset, InputScaler, load_csv, save_csv, synth_generate
from mrcgat.errors import MrcGatError, NotSPDError, NumericalError
from mrcgat.explain import explain_to_dir
from mrcgat.model import load_model, save_model
from mrcgat.trainer import cross_validate, evaluate_model, infer, train

THREADS_ENV = "MRCGAT_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (a --config file overrides these)")
    g.add_argument("--config", type=Path, help="flat key=value or JSON config file")
    for f in dataclasses.fields(TrainingConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag, "--lambda"] if f.name == "shrinkage" else [flag]
        g.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper(),
                       help=f"{HELP[f.name]} (default: {f.default})")


def _add_runtime_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for episode evaluation (default: ${THREADS_ENV} or 1)")
    p.add_argument("--classes", default=None,
                   help="comma-separated class names to keep, e.g. CN,AD for a binary task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrcgat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multimodal cohort CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--dims", type=_int_list, default=DEFAULT_DIMS, help="dRF,dCOG,dMRI (default: 5,8,20)")
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--signal", default=",".join(RELATIONS),
                   help="relations that carry class signal (default: RF,COG,MRI)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="episodic training on a labeled CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.add_argument("--trace", type=Path, help="loss trace CSV (iteration,mean_loss)")
    _add_config_flags(p)
    _add_runtime_flags(p)

    p = sub.add_parser("eval", help="cross-validation, or single-split evaluation of a model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, help="model file (used with --no-cv)")
    p.add_argument("--folds", type=int, default=None, help="cross-validation folds (default: 5)")
    p.add_argument("--no-cv", action="store_true", help="score --data with --model, no retraining")
    p.add_argument("--support-data", type=Path,
                   help="labeled CSV that supplies supports with --no-cv (default: --data)")
    p.add_argument("--report", type=Path, required=True, help="report JSON to write")
    _add_config_flags(p)
    _add_runtime_flags(p)

    p = sub.add_parser("infer", help="class probabilities for new subjects")
    p.add_argument("--data", type=Path, required=True, help="query subjects (labels may be empty)")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--support-data", type=Path, required=True, help="labeled support pool CSV")
    p.add_argument("--out", type=Path, required=True, help="predictions CSV")
    p.add_argument("--ensemble", type=int, default=None, help="override infer_ensemble (R)")
    _add_runtime_flags(p)

    p = sub.add_parser("explain", help="export gating heatmap data and attention graphs")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--classes", default=None)
    return parser


# -- helpers ---------------------------------------------------------------------

def resolve_config(args, base: TrainingConfig | None = None) -> TrainingConfig:
    """Defaults, then command-line flags, then the config file (which wins)."""
    flags = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainingConfig)
             if getattr(args, f.name, None) is not None}
    if getattr(args, "folds", None) is not None:
        flags["fold_count"] = args.folds
    cfg = TrainingConfig.from_dict(flags, base)
    if getattr(args, "config", None) is not None:
        cfg = TrainingConfig.from_dict(read_config_file(args.config), cfg)
    return cfg


def resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _load(path: Path, classes: str | None) -> Dataset:
    ds = load_csv(path)
    return ds.restrict_classes(classes.split(",")) if classes else ds


def _announce(cfg: TrainingConfig, threads: int | None = None) -> None:
    print(f"seed: {cfg.seed}")
    print("config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    if threads is not None:
        print(f"threads: {threads}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _model_dataset(path: Path, meta: dict, classes: str | None) -> Dataset:
    """Load data with the class selection the model was trained on."""
    names = meta.get("class_names")
    ds = load_csv(path)
    if names and tuple(names) != ds.class_names:
        return ds.restrict_classes(names)
    return ds.restrict_classes(classes.split(",")) if classes else ds


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    signal = tuple(s.strip() for s in args.signal.split(",") if s.strip())
    ds = synth_generate(args.seed, args.n_per_class, args.dims, args.separation, signal)
    save_csv(ds, args.out)
    print(f"seed: {args.seed}")
    print(f"wrote {len(ds)} subjects, {ds.n_classes} classes, dims {ds.partition.dims} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    threads = resolve_threads(args)
    _announce(cfg, threads)
    ds = _load(args.data, args.classes)

    def progress(t, loss):
        if t == 1 or t % 100 == 0 or t == cfg.iterations:
            print(f"iteration {t}/{cfg.iterations} loss {loss:.6f}", flush=True)

    result = train(ds, cfg, threads=threads, progress=progress)
    meta = {"class_names": list(ds.class_names), "dims": list(ds.partition.dims),
            "input_scaler": result.scaler.to_dict() if result.scaler else None}
    save_model(args.out, result.params, result.arch, cfg, meta)
    if args.trace:
        result.write_trace(args.trace)
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    threads = resolve_threads(args)
    if args.no_cv:
        if args.model is None:
            raise MrcGatError("--no-cv needs --model")
        params, arch, cfg, meta = load_model(args.model)
        cfg = resolve_config(args, cfg)
        _announce(cfg, threads)
        ds = _model_dataset(args.data, meta, args.classes)
        support = _model_dataset(args.support_data, meta, args.classes) if args.support_data else None
        doc = evaluate_model(params, arch, cfg, ds, support, threads=threads,
                             scaler=InputScaler.from_dict(meta.get("input_scaler")))
        rep = doc["report"]
        print(f"accuracy {rep['accuracy']:.4f} micro_auc {rep['micro_auc']}")
    else:
        cfg = resolve_config(args)
        _announce(cfg, threads)
        ds = _load(args.data, args.classes)
        result = cross_validate(ds, cfg, threads=threads)
        doc = result.to_dict()
        agg = doc["aggregate"]
        print(f"accuracy {agg['accuracy_mean']:.4f} +- {agg['accuracy_std']:.4f} "
              f"micro_auc {agg['micro_auc_mean']:.4f} +- {agg['micro_auc_std']:.4f}")
    _write_json(args.report, doc)
    print(f"report written to {args.report}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params, arch, cfg, meta = load_model(args.model)
    threads = resolve_threads(args)
    _announce(cfg, threads)
    pool = _model_dataset(args.support_data, meta, args.classes)
    queries = _model_dataset(args.data, meta, args.classes)
    probs = infer(params, arch, cfg, pool, queries, ensemble=args.ensemble, threads=threads,
                  scaler=InputScaler.from_dict(meta.get("input_scaler")))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "predicted"] + [f"p_{c}" for c in pool.class_names])
        for sid, p in zip(queries.subject_ids, probs):
            w.writerow([sid, pool.class_names[int(np.argmax(p))]] + [repr(float(v)) for v in p])
    print(f"{len(queries)} predictions written to {args.out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    params, arch, cfg, meta = load_model(args.model)
    _announce(cfg)
    ds = _model_dataset(args.data, meta, args.classes)
    written = explain_to_dir(params, arch, cfg, ds, args.out_dir, args.episodes,
                             InputScaler.from_dict(meta.get("input_scaler")))
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "explain": cmd_explain}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, NotSPDError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MrcGatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
