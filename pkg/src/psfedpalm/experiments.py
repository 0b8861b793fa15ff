"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DECISIONS, ExperimentConfig
from .evaluation import (EerMatrix, compute_roc, cross_spectrum_matrix, write_roc_csv,
                         write_scores_csv)
from .federation import GLOBAL_METHODS, run_training, write_loss_log, write_round_log
from .model import ArchitectureDescriptor
from .specdata import (BANDS, FederationDataset, SpectrumBand, build_federation_dataset,
                       dataset_from_samples, load_image_directory)

logger = logging.getLogger(__name__)

COMPONENT_GRID = [c for c in itertools.product((True, False), repeat=3) if any(c)]
MU_GRID = (1e-3, 1e-2, 1e-1, 1.0)
TAU_GRID = (10.0, 100.0, 1000.0, 10000.0)


def epoch_round_pairs(budget: int = 60, epochs=(1, 3, 6)):
    """(E, R) pairs with E * R == budget."""
    pairs = [(e, budget // e) for e in epochs if budget % e == 0]
    if not pairs:
        raise ValueError(f"no epoch count in {epochs} divides {budget}")
    return pairs


def load_dataset(cfg: ExperimentConfig) -> FederationDataset:
    if cfg.data_path:
        ds = dataset_from_samples(load_image_directory(cfg.data_path), seed=cfg.seed)
    else:
        ds = build_federation_dataset(cfg.identities, cfg.train_per_id, cfg.test_per_id,
                                      cfg.profile(), seed=cfg.seed)
    wanted = [SpectrumBand.parse(b) for b in cfg.bands]
    ds.bands = {b: s for b, s in ds.bands.items() if b in wanted}
    return ds


def dataset_for_seed(cfg: ExperimentConfig, seed: int) -> FederationDataset:
    return load_dataset(replace(cfg, seed=seed))


def train(cfg: ExperimentConfig, dataset: FederationDataset, checkpoint_dir=None):
    arch = ArchitectureDescriptor(num_classes=dataset.num_identities, embedding_dim=cfg.embedding_dim)
    return run_training(cfg.method_config(checkpoint_dir), dataset, arch=arch)


def train_and_evaluate(cfg: ExperimentConfig, dataset: FederationDataset | None = None):
    dataset = dataset or load_dataset(cfg)
    result = train(cfg, dataset)
    return result, cross_spectrum_matrix(result.eval_models(), dataset)


def report_metadata(cfg: ExperimentConfig) -> dict:
    meta = {f"decision.{k}": v for k, v in DECISIONS.items()}
    meta["method"] = cfg.method
    meta["seed"] = cfg.seed
    meta["version"] = __version__
    return meta


# -- run directories -----------------------------------------------------------

def write_run(out_dir, cfg: ExperimentConfig, result) -> dict:
    """Final checkpoints, loss and round logs, and ``run.json`` for a finished run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for tag, params in result.final_components().items():
        cid = int(tag.split("_")[1]) if tag.startswith("client_") else None
        adam = result.clients[cid].adam if cid is not None and result.clients else None
        extra = {"method": result.method}
        if cid is not None:
            extra["band"] = result.client_bands[cid].value
        paths[tag] = str(save_checkpoint(out / f"final_{tag}.psfp", params, seed=cfg.seed,
                                         round=cfg.rounds, component=tag, adam=adam, extra=extra))
    paths["loss_log"] = str(write_loss_log(result.records, out / "loss_log.csv"))
    paths["round_log"] = str(write_round_log(result.records, result.method, out / "round_log.csv"))
    run = {"config": cfg.to_dict(), "provenance": cfg.provenance(), "outputs": paths, "version": __version__}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    return run


class EvalError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def load_run_models(run_dir, dataset: FederationDataset):
    """Checkpointed evaluation models of a run directory, validated against the dataset."""
    run_dir = Path(run_dir)
    run = json.loads((run_dir / "run.json").read_text())
    method = run["config"]["method"]
    problems = []
    loaded = {}
    for path in sorted(run_dir.glob("final_*.psfp")):
        params, _, header = load_checkpoint(path)
        if params.arch.num_classes != dataset.num_identities:
            problems.append(f"{path.name}: checkpoint has {params.arch.num_classes} classes, "
                            f"dataset has {dataset.num_identities} identities")
        loaded[header["component"]] = (params, header)
    if method in GLOBAL_METHODS:
        if "global" not in loaded:
            problems.append(f"{run_dir}: missing final_global.psfp")
        if problems:
            raise EvalError(problems)
        return method, loaded["global"][0]
    models = {}
    for tag, (params, header) in loaded.items():
        band = header.get("extra", {}).get("band")
        if band:
            models[SpectrumBand.parse(band)] = params
    for band in dataset.bands:
        if band not in models:
            problems.append(f"{run_dir}: no client checkpoint for band {band.value}")
    if problems:
        raise EvalError(problems)
    return method, models


def write_eval(out_dir, matrix: EerMatrix, grid: dict, metadata: dict) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix.metadata = metadata
    paths = {"eer_matrix": str(matrix.to_csv(out / "eer_matrix.csv"))}
    for (g, p), scores in sorted(grid.items(), key=lambda kv: (BANDS.index(kv[0][0]), BANDS.index(kv[0][1]))):
        stem = f"{g.value}_{p.value}"
        paths[f"hist_{stem}"] = str(write_scores_csv(scores, out / "scores" / f"hist_{stem}.csv"))
        paths[f"roc_{stem}"] = str(write_roc_csv(compute_roc(scores), out / "scores" / f"roc_{stem}.csv"))
    summary = {
        "bands": [b.value for b in matrix.bands],
        "eer": matrix.values.tolist(),
        "grand_mean": matrix.grand_mean,
        "metadata": metadata,
        "outputs": paths,
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- ablation --------------------------------------------------------------------

def ablation_cells(kind: str, budget: int = 60):
    """Yield (cell_name, overrides) for one ablation family."""
    if kind == "components":
        for g, a, m in COMPONENT_GRID:
            yield (f"gprox={int(g)},aprox={int(a)},mse={int(m)}",
                   {"method": "psfed", "use_global_prox": g, "use_anchor_prox": a, "use_mse": m})
    elif kind == "mu":
        for mu in MU_GRID:
            yield f"mu={mu:g}", {"method": "psfed", "mu": mu}
    elif kind == "tau":
        for tau in TAU_GRID:
            yield f"tau={tau:g}", {"method": "psfed", "tau": tau}
    elif kind == "epochs":
        for e, r in epoch_round_pairs(budget):
            yield f"E={e},R={r}", {"method": "psfed", "local_epochs": e, "rounds": r}
    else:
        raise ValueError(f"unknown ablation family {kind!r}")


ABLATION_FAMILIES = ("components", "mu", "tau", "epochs")


def run_ablation(base: ExperimentConfig, families, seeds, budget: int = 60, on_row=None):
    rows = []
    for family in families:
        for cell, overrides in ablation_cells(family, budget):
            for seed in seeds:
                cfg = replace(base, seed=seed, **overrides)
                dataset = dataset_for_seed(base, seed)
                _, matrix = train_and_evaluate(cfg, dataset)
                row = {"family": family, "cell": cell, "seed": seed, "avg_eer": matrix.grand_mean}
                rows.append(row)
                if on_row:
                    on_row(row)
    return rows


# -- reporting -------------------------------------------------------------------

def _fmt(values, percent=True):
    scale = 100.0 if percent else 1.0
    values = np.asarray(values, dtype=float) * scale
    if len(values) > 1:
        return f"{values.mean():.5f} ± {values.std(ddof=1):.5f}"
    return f"{values.mean():.5f}"


def build_report(manifest: dict) -> tuple[str, dict]:
    """Markdown report plus plot-data tables from an experiment manifest.

    Manifest keys: ``results`` (method -> list of eval.json paths),
    optional ``config``, ``seeds``, ``version``, ``provenance``, ``ablation``
    (path to an ablation CSV). Missing files are flagged, not fatal.
    """
    lines = ["# Cross-spectrum verification report", ""]
    plot = {"method_average": []}
    warnings = []
    cfg = manifest.get("config") or {}
    if manifest.get("version"):
        lines += [f"version: {manifest['version']}", ""]
    if manifest.get("seeds"):
        lines += [f"seeds: {', '.join(str(s) for s in manifest['seeds'])}", ""]
    results = manifest.get("results") or {}
    for method, paths in results.items():
        mats = []
        for p in paths:
            try:
                mats.append(np.asarray(json.loads(Path(p).read_text())["eer"], dtype=float))
            except (OSError, KeyError, ValueError) as exc:
                warnings.append(f"{method}: could not read {p} ({exc})")
        if not mats:
            continue
        stack = np.stack(mats)
        names = [b.value for b in BANDS][:stack.shape[1]]
        lines += [f"## {method} (EER %, n={len(mats)} seed{'s' if len(mats) != 1 else ''})", ""]
        lines.append("| gallery \\ probe | " + " | ".join(names) + " | Average |")
        lines.append("|" + "---|" * (len(names) + 2))
        for i, name in enumerate(names):
            cells = [_fmt(stack[:, i, j]) for j in range(len(names))]
            lines.append(f"| {name} | " + " | ".join(cells) + f" | {_fmt(stack[:, i, :].mean(axis=1))} |")
        cols = [_fmt(stack[:, :, j].mean(axis=1)) for j in range(len(names))]
        grand = stack.mean(axis=(1, 2))
        lines.append("| Average | " + " | ".join(cols) + f" | {_fmt(grand)} |")
        lines.append("")
        plot["method_average"].append({"method": method, "mean_eer_pct": float(100 * grand.mean()),
                                       "sd_eer_pct": float(100 * grand.std(ddof=1)) if len(grand) > 1 else 0.0})
    ablation = manifest.get("ablation")
    if ablation:
        try:
            import csv
            with open(ablation) as fh:
                rows = list(csv.DictReader(fh))
            cells = {}
            for row in rows:
                cells.setdefault((row["family"], row["cell"]), []).append(float(row["avg_eer"]))
            lines += ["## Ablations (average EER %)", "", "| family | cell | EER |", "|---|---|---|"]
            for (fam, cell), vals in cells.items():
                lines.append(f"| {fam} | {cell} | {_fmt(vals)} |")
            lines.append("")
            plot["ablation"] = [{"family": f, "cell": c, "mean_eer_pct": float(100 * np.mean(v))}
                                for (f, c), v in cells.items()]
        except (OSError, KeyError, ValueError) as exc:
            warnings.append(f"ablation table {ablation} unreadable ({exc})")
    prov = manifest.get("provenance") or (ExperimentConfig.from_dict(cfg).provenance() if cfg else {})
    if prov:
        lines += ["## Hyperparameters", "", "| name | value | source |", "|---|---|---|"]
        for k in sorted(prov):
            lines.append(f"| {k} | {cfg.get(k, '')} | {prov[k]} |")
        lines.append("")
    lines += ["## Decisions", ""]
    lines += [f"- {k}: {v}" for k, v in DECISIONS.items()]
    lines.append("")
    if warnings:
        lines += ["## Warnings (partial results)", ""] + [f"- {w}" for w in warnings] + [""]
    return "\n".join(lines), plot
