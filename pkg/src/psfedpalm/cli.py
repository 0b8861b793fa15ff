"""Command line: ``psfedpalm {gen-data,train,eval,ablate,report}``.

Every subcommand accepts ``--config <json>``; explicit flags override the
file. Failures exit non-zero with a JSON error document on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig
from .evaluation import cross_spectrum_matrix
from .experiments import (ABLATION_FAMILIES, EvalError, build_report, load_dataset, load_run_models,
                          report_metadata, run_ablation, train, write_eval, write_run)
from .specdata import DatasetError, build_federation_dataset, write_image_directory

logger = logging.getLogger("psfedpalm")


class CliError(Exception):
    def __init__(self, kind, problems):
        self.kind = kind
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


# flag name -> config field
_OVERRIDES = {
    "method": "method", "rounds": "rounds", "epochs": "local_epochs", "batch_size": "batch_size",
    "lr": "lr", "mu": "mu", "tau": "tau", "gamma": "gamma", "seed": "seed", "data": "data_path",
    "identities": "identities", "train_per_id": "train_per_id", "test_per_id": "test_per_id",
    "noise": "noise_sigma", "checkpoint_cadence": "checkpoint_cadence",
}


def _add_config_flags(p, data=True, training=True):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--identities", type=int)
    p.add_argument("--train-per-id", type=int, dest="train_per_id")
    p.add_argument("--test-per-id", type=int, dest="test_per_id")
    p.add_argument("--noise", type=float, help="sensor noise sigma of the synthetic generator")
    if data:
        p.add_argument("--data", help="image directory (<band>/<identity>/<session>_<idx>.png)")
    if training:
        p.add_argument("--method")
        p.add_argument("--rounds", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)
        p.add_argument("--mu", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--checkpoint-cadence", type=int, dest="checkpoint_cadence")
        p.add_argument("--no-global-prox", action="store_true")
        p.add_argument("--no-anchor-prox", action="store_true")
        p.add_argument("--no-mse", action="store_true")


def resolve_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_json(args.config) if getattr(args, "config", None) else ExperimentConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise CliError("config", f"cannot read config {args.config}: {exc}") from exc
    updates = {}
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "no_global_prox", False):
        updates["use_global_prox"] = False
    if getattr(args, "no_anchor_prox", False):
        updates["use_anchor_prox"] = False
    if getattr(args, "no_mse", False):
        updates["use_mse"] = False
    cfg = replace(cfg, **updates)
    problems = cfg.validate()
    if problems:
        raise CliError("config", problems)
    return cfg


def _check_writable(path):
    path = Path(path)
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir():
        raise CliError("io", f"{path}: parent {probe} is not a directory")
    import os
    if not os.access(probe, os.W_OK):
        raise CliError("io", f"{path}: not writable")


def cmd_gen_data(args):
    cfg = resolve_config(args)
    _check_writable(args.out)
    ds = build_federation_dataset(cfg.identities, cfg.train_per_id, cfg.test_per_id, cfg.profile(), cfg.seed)
    out = Path(args.out)
    write_image_directory(ds, out)
    manifest = {
        "seed": cfg.seed,
        "profile": ds.profile.to_dict(),
        "counts": {
            "identities": ds.num_identities,
            "train_per_identity": ds.train_per_identity,
            "test_per_identity": ds.test_per_identity,
            "per_client_train": {b.value: int(len(s.train_labels)) for b, s in ds.bands.items()},
            "per_band_probe": {b.value: int(len(s.probe_labels)) for b, s in ds.bands.items()},
        },
        "layout": "<band>/<identity>/<session>_<idx>.png",
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "manifest": manifest}


def cmd_train(args):
    cfg = resolve_config(args)
    _check_writable(args.out)
    try:
        dataset = load_dataset(cfg)
    except DatasetError as exc:
        raise CliError("dataset", exc.problems) from exc
    out = Path(args.out)
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_cadence else None
    result = train(cfg, dataset, checkpoint_dir=ckpt_dir)
    run = write_run(out, cfg, result)
    return {"out": str(out), "outputs": run["outputs"]}


def cmd_eval(args):
    run_dir = Path(args.run)
    if not (run_dir / "run.json").is_file():
        raise CliError("eval", f"{run_dir}: no run.json (not a training output directory)")
    run = json.loads((run_dir / "run.json").read_text())
    base = ExperimentConfig.from_dict(run["config"])
    # evaluation data defaults to the training data spec of the run
    args.config = None
    cfg = replace(base, **{name: getattr(args, flag) for flag, name in _OVERRIDES.items()
                           if getattr(args, flag, None) is not None})
    problems = cfg.validate()
    if problems:
        raise CliError("config", problems)
    _check_writable(args.out or run_dir)
    try:
        dataset = load_dataset(cfg)
        method, models = load_run_models(run_dir, dataset)
    except DatasetError as exc:
        raise CliError("dataset", exc.problems) from exc
    except EvalError as exc:
        raise CliError("eval", exc.problems) from exc
    matrix, grid = cross_spectrum_matrix(models, dataset, bands=tuple(dataset.bands), keep_scores=True)
    meta = report_metadata(base)
    summary = write_eval(Path(args.out or run_dir / "eval"), matrix, grid, meta)
    if args.manifest:
        _append_manifest(Path(args.manifest), method, Path(args.out or run_dir / "eval") / "eval.json",
                         base)
    return {"grand_mean_eer": summary["grand_mean"], "outputs": summary["outputs"]["eer_matrix"]}


def _append_manifest(path, method, eval_json, cfg):
    manifest = json.loads(path.read_text()) if path.is_file() else {
        "version": __version__, "seeds": [], "results": {}, "config": cfg.to_dict(),
        "provenance": cfg.provenance(),
    }
    manifest["results"].setdefault(method, [])
    if str(eval_json) not in manifest["results"][method]:
        manifest["results"][method].append(str(eval_json))
    if cfg.seed not in manifest["seeds"]:
        manifest["seeds"].append(cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_ablate(args):
    cfg = resolve_config(args)
    families = ABLATION_FAMILIES if args.grid == "all" else tuple(args.grid.split(","))
    bad = [f for f in families if f not in ABLATION_FAMILIES]
    if bad:
        raise CliError("config", f"unknown ablation families: {', '.join(bad)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    _check_writable(args.out)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["family", "cell", "seed", "avg_eer"])
        w.writeheader()

        def emit(row):
            w.writerow({**row, "avg_eer": repr(row["avg_eer"])})
            fh.flush()

        rows = run_ablation(cfg, families, seeds, budget=args.budget, on_row=emit)
    return {"out": str(out), "rows": len(rows)}


def cmd_report(args):
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text()) if path.read_text().strip() else {}
    except (OSError, ValueError) as exc:
        raise CliError("report", f"cannot read manifest {path}: {exc}") from exc
    _check_writable(args.out)
    text, plot = build_report(manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    plot_path = out.with_suffix(".methods.csv")
    with open(plot_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "mean_eer_pct", "sd_eer_pct"])
        w.writeheader()
        w.writerows(plot["method_average"])
    return {"out": str(out), "plot_data": str(plot_path)}


def build_parser():
    parser = argparse.ArgumentParser(prog="psfedpalm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-spectrum dataset to disk")
    _add_config_flags(p, data=False, training=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method and write checkpoints + logs")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-spectrum EER matrix for a training run")
    _add_config_flags(p, training=False)
    p.add_argument("--run", required=True, help="output directory of `train`")
    p.add_argument("--out", help="defaults to <run>/eval")
    p.add_argument("--manifest", help="experiment manifest JSON to append this result to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-component / mu / tau / (E, R) sweeps")
    _add_config_flags(p)
    p.add_argument("--grid", default="components", help=f"comma list of {', '.join(ABLATION_FAMILIES)} or 'all'")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--budget", type=int, default=60, help="E x R budget for the epochs family")
    p.add_argument("--out", required=True, help="consolidated CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="markdown summary of an experiment manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "problems": exc.problems}) + "\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "problems": [str(exc)]}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
