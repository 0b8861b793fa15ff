"""Verification metrics: templates, angular matching, ROC and EER."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ParamVector, forward
from .specdata import BANDS, SpectrumBand


def extract_template(params: ParamVector, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode unit embeddings for one image or a (B, H, W) stack."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    parts = [forward(params, images[i:i + batch_size], mode="eval").embedding
             for i in range(0, len(images), batch_size)]
    out = np.concatenate(parts, axis=0) if parts else np.zeros((0, params.arch.embedding_dim))
    return out[0] if single else out


def cosine_distance(v_i, v_j):
    """Angle between templates, arccos of the clamped dot product (radians)."""
    dot = np.sum(np.asarray(v_i, dtype=np.float64) * np.asarray(v_j, dtype=np.float64), axis=-1)
    return np.arccos(np.clip(dot, -1.0, 1.0))


@dataclass
class MatchScores:
    genuine: np.ndarray
    impostor: np.ndarray
    gallery_band: str | None = None
    probe_band: str | None = None


def match_all(gallery, gallery_labels, probes, probe_labels, gallery_band=None, probe_band=None) -> MatchScores:
    """Score every gallery x probe pair; same label -> genuine."""
    gallery = np.asarray(gallery, dtype=np.float64)
    probes = np.asarray(probes, dtype=np.float64)
    if len(gallery) == 0 or len(probes) == 0:
        raise ValueError("gallery and probe sets must be non-empty")
    dist = np.arccos(np.clip(gallery @ probes.T, -1.0, 1.0))
    same = np.asarray(gallery_labels)[:, None] == np.asarray(probe_labels)[None, :]
    return MatchScores(dist[same], dist[~same], gallery_band, probe_band)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    gar: np.ndarray

    @property
    def points(self):
        return np.column_stack([self.far, self.gar])


def _rates(scores: MatchScores, thresholds):
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(scores.impostor, dtype=np.float64))
    if len(gen) == 0 or len(imp) == 0:
        raise ValueError("genuine and impostor scores must be non-empty")
    far = np.searchsorted(imp, thresholds, side="right") / len(imp)
    gar = np.searchsorted(gen, thresholds, side="right") / len(gen)
    return far, gar


def compute_roc(scores: MatchScores, num_thresholds: int = 1000) -> RocCurve:
    """GAR/FAR sweep; a pair is accepted when its distance is <= threshold.

    Thresholds are an even grid over the score range merged with every
    observed score, plus one point below the minimum (the (0, 0) end).
    """
    allscores = np.concatenate([scores.genuine, scores.impostor]).astype(np.float64)
    lo, hi = allscores.min(), allscores.max()
    grid = np.linspace(lo, hi, num_thresholds) if num_thresholds > 1 else np.array([hi])
    thresholds = np.unique(np.concatenate([grid, allscores]))
    thresholds = np.concatenate([[np.nextafter(lo, -np.inf)], thresholds])
    far, gar = _rates(scores, thresholds)
    return RocCurve(thresholds, far, gar)


def compute_eer(scores: MatchScores) -> float:
    """Equal error rate, linearly interpolated at the FAR/FRR crossing."""
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]).astype(np.float64))
    far, gar = _rates(scores, thresholds)
    far = np.concatenate([[0.0], far])
    frr = np.concatenate([[1.0], 1.0 - gar])
    d = far - frr  # -1 at the start, +1 once everything is accepted
    k = int(np.argmax(d >= 0))
    if d[k] == 0:
        return float(0.5 * (far[k] + frr[k]))
    alpha = -d[k - 1] / (d[k] - d[k - 1])
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


@dataclass
class EerMatrix:
    values: np.ndarray  # rows gallery band, columns probe band
    bands: tuple = BANDS
    metadata: dict = field(default_factory=dict)

    @property
    def row_means(self):
        return self.values.mean(axis=1)

    @property
    def col_means(self):
        return self.values.mean(axis=0)

    @property
    def grand_mean(self) -> float:
        return float(self.values.mean())

    def to_csv(self, path, percent: bool = True) -> Path:
        scale = 100.0 if percent else 1.0
        names = [SpectrumBand.parse(b).value for b in self.bands]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for key, value in sorted(self.metadata.items()):
                w.writerow([f"# {key}: {value}"])
            w.writerow(["gallery\\probe"] + names + ["Average"])
            for i, name in enumerate(names):
                w.writerow([name] + [f"{scale * v:.5f}" for v in self.values[i]] + [f"{scale * self.row_means[i]:.5f}"])
            w.writerow(["Average"] + [f"{scale * v:.5f}" for v in self.col_means] + [f"{scale * self.grand_mean:.5f}"])
        return path


def cross_spectrum_matrix(models, dataset, bands=BANDS, keep_scores: bool = False):
    """EER for every (gallery band, probe band) pair.

    ``models`` is either one ParamVector (shared model) or a mapping band ->
    ParamVector; in the per-band case the gallery band's model embeds both
    sides. Gallery images come from session 1, probes from session 2.
    Returns the matrix, plus the MatchScores grid when ``keep_scores``.
    """
    if isinstance(models, ParamVector):
        per_band = {b: models for b in bands}
    else:
        per_band = {SpectrumBand.parse(b): m for b, m in models.items()}
        missing = [b.value for b in bands if b not in per_band]
        if missing:
            raise ValueError(f"no model for bands: {', '.join(missing)}")
    cache = {}

    def templates(model_band, band, which):
        key = (model_band, band, which)
        if key not in cache:
            split = dataset.bands[band]
            imgs = split.gallery_images if which == "gallery" else split.probe_images
            cache[key] = extract_template(per_band[model_band], imgs)
        return cache[key]

    values = np.zeros((len(bands), len(bands)))
    grid = {}
    for i, g in enumerate(bands):
        for j, p in enumerate(bands):
            gs, ps = dataset.bands[g], dataset.bands[p]
            scores = match_all(templates(g, g, "gallery"), gs.gallery_labels,
                               templates(g, p, "probe"), ps.probe_labels, g.value, p.value)
            values[i, j] = compute_eer(scores)
            if keep_scores:
                grid[(g, p)] = scores
    matrix = EerMatrix(values, tuple(bands))
    return (matrix, grid) if keep_scores else matrix


def write_scores_csv(scores: MatchScores, path, bins: int = 50) -> Path:
    """Genuine/impostor histograms over [0, pi] as CSV."""
    edges = np.linspace(0.0, np.pi, bins + 1)
    g, _ = np.histogram(scores.genuine, edges)
    i, _ = np.histogram(scores.impostor, edges)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "genuine_count", "impostor_count"])
        for k in range(bins):
            w.writerow([f"{edges[k]:.6f}", f"{edges[k + 1]:.6f}", int(g[k]), int(i[k])])
    return path


def write_roc_csv(roc: RocCurve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "gar"])
        for t, f, g in zip(roc.thresholds, roc.far, roc.gar):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(g))])
    return path
