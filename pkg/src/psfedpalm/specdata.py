"""Synthetic multi-spectrum palm images and directory ingestion.

Each identity owns a high-frequency oriented line texture and a smooth
branching vein map. A band renders a fixed texture/vein mixture: short
wavelengths are texture dominated, longer ones show progressively more vein.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 32


class SpectrumGroup(str, Enum):
    SHORT = "short"
    LONG = "long"


class SpectrumBand(str, Enum):
    NIR = "NIR"
    RED = "Red"
    GREEN = "Green"
    BLUE = "Blue"

    @property
    def wavelength_range(self) -> tuple[int, int]:
        return _WAVELENGTHS[self]

    @property
    def center_wavelength(self) -> float:
        lo, hi = self.wavelength_range
        return 0.5 * (lo + hi)

    @property
    def group(self) -> SpectrumGroup:
        return group_of(self)

    @classmethod
    def parse(cls, name) -> "SpectrumBand":
        if isinstance(name, cls):
            return name
        for band in cls:
            if band.value.lower() == str(name).lower() or band.name.lower() == str(name).lower():
                return band
        raise ValueError(f"unknown spectrum band {name!r}")


_WAVELENGTHS = {
    SpectrumBand.NIR: (760, 900),
    SpectrumBand.RED: (630, 690),
    SpectrumBand.GREEN: (520, 600),
    SpectrumBand.BLUE: (450, 520),
}

# Table order used for matrices and reports.
BANDS = (SpectrumBand.NIR, SpectrumBand.RED, SpectrumBand.GREEN, SpectrumBand.BLUE)


def group_of(band: SpectrumBand) -> SpectrumGroup:
    band = SpectrumBand.parse(band)
    if band in (SpectrumBand.GREEN, SpectrumBand.BLUE):
        return SpectrumGroup.SHORT
    return SpectrumGroup.LONG


@dataclass(frozen=True)
class RenderProfile:
    mixing: dict = field(default_factory=lambda: {
        SpectrumBand.BLUE: (0.95, 0.05),
        SpectrumBand.GREEN: (0.85, 0.15),
        SpectrumBand.RED: (0.55, 0.45),
        SpectrumBand.NIR: (0.25, 0.75),
    })
    gain_range: tuple = (0.85, 1.15)
    noise_sigma: float = 0.05
    session_gain_shift: float = 0.05

    def __post_init__(self):
        for band, (wt, wv) in self.mixing.items():
            if abs(wt + wv - 1.0) > 1e-12:
                raise ValueError(f"{band}: mixing weights must sum to 1")
        by_wavelength = sorted(self.mixing, key=lambda b: SpectrumBand.parse(b).center_wavelength)
        veins = [self.mixing[b][1] for b in by_wavelength]
        if any(b <= a for a, b in zip(veins, veins[1:])):
            raise ValueError("vein weight must strictly increase with wavelength")

    def weights(self, band) -> tuple[float, float]:
        return self.mixing[SpectrumBand.parse(band)]

    def to_dict(self) -> dict:
        return {
            "mixing": {SpectrumBand.parse(b).value: list(w) for b, w in self.mixing.items()},
            "gain_range": list(self.gain_range),
            "noise_sigma": self.noise_sigma,
            "session_gain_shift": self.session_gain_shift,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RenderProfile":
        return cls(
            mixing={SpectrumBand.parse(b): tuple(w) for b, w in d["mixing"].items()},
            gain_range=tuple(d["gain_range"]),
            noise_sigma=float(d["noise_sigma"]),
            session_gain_shift=float(d["session_gain_shift"]),
        )


@dataclass
class IdentityLatent:
    identity_id: int
    texture: np.ndarray
    vein: np.ndarray
    seed: int


def _grid(size=IMAGE_SIZE):
    coords = np.arange(size) / size
    return np.meshgrid(coords, coords, indexing="xy")


def _draw_polyline(canvas, points):
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        steps = int(np.ceil(4 * max(abs(x1 - x0), abs(y1 - y0)))) + 1
        xs = np.linspace(x0, x1, steps)
        ys = np.linspace(y0, y1, steps)
        ok = (xs >= 0) & (xs < canvas.shape[1]) & (ys >= 0) & (ys < canvas.shape[0])
        canvas[ys[ok].astype(int), xs[ok].astype(int)] = 1.0


def _random_walk(rng, start, heading, n_segments, size):
    pts = [np.asarray(start, dtype=float)]
    for _ in range(n_segments):
        heading += rng.normal(0.0, 0.35)
        length = rng.uniform(0.15, 0.3) * size
        pts.append(pts[-1] + length * np.array([np.cos(heading), np.sin(heading)]))
    return pts, heading


def gen_identity(identity_id: int, seed: int, size: int = IMAGE_SIZE) -> IdentityLatent:
    rng = np.random.default_rng([seed, identity_id, 7919])
    X, Y = _grid(size)
    gratings = np.zeros((size, size))
    for _ in range(4):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        gratings += np.sin(2 * np.pi * freq * (X * np.cos(theta) + Y * np.sin(theta)) + phase)
    texture = np.clip(0.5 + 0.125 * gratings, 0.0, 1.0)

    canvas = np.zeros((size, size))
    for _ in range(rng.integers(2, 4)):
        start = rng.uniform(0.1 * size, 0.9 * size, 2)
        pts, heading = _random_walk(rng, start, rng.uniform(0, 2 * np.pi), rng.integers(3, 6), size)
        _draw_polyline(canvas, pts)
        # one side branch from a random interior vertex
        fork = pts[rng.integers(1, len(pts))]
        branch, _ = _random_walk(rng, fork, heading + rng.choice([-1, 1]) * rng.uniform(0.5, 1.2),
                                 rng.integers(1, 4), size)
        _draw_polyline(canvas, branch)
    vein = gaussian_filter(canvas, sigma=2.0, mode="constant")
    peak = vein.max()
    if peak > 0:
        vein = vein / peak
    return IdentityLatent(identity_id, texture, np.clip(vein, 0.0, 1.0), seed)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    band: SpectrumBand
    session: int
    index: int


def render(latent: IdentityLatent, band, session: int, sample_idx: int,
           profile: RenderProfile | None = None, seed: int = 0) -> Sample:
    profile = profile or RenderProfile()
    band = SpectrumBand.parse(band)
    if session not in (1, 2):
        raise ValueError("session must be 1 or 2")
    rng = np.random.default_rng([seed, latent.identity_id, BANDS.index(band), session, sample_idx, 104729])
    w_tex, w_vein = profile.weights(band)
    lo, hi = profile.gain_range
    gain = rng.uniform(lo, hi) if hi > lo else lo
    if session == 2:
        gain += profile.session_gain_shift
    image = gain * (w_tex * latent.texture + w_vein * latent.vein)
    if profile.noise_sigma > 0:
        image = image + rng.normal(0.0, profile.noise_sigma, image.shape)
    return Sample(np.clip(image, 0.0, 1.0), latent.identity_id, band, session, sample_idx)


def augment(image, rng, max_shift: int = 2, noise_sigma: float = 0.05):
    """Two independently translated + noised views of one image (no flips)."""
    image = np.asarray(image, dtype=np.float64)
    views = []
    for _ in range(2):
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2) if max_shift > 0 else (0, 0)
        view = _shift(image, int(dy), int(dx), max_shift)
        if noise_sigma > 0:
            view = np.clip(view + rng.normal(0.0, noise_sigma, view.shape), 0.0, 1.0)
        views.append(view)
    return views[0], views[1]


def augment_batch(images, rng, max_shift: int = 2, noise_sigma: float = 0.05):
    """Vectorised :func:`augment` over a (B, H, W) stack -> (views_a, views_b)."""
    images = np.asarray(images, dtype=np.float64)
    B, H, W = images.shape
    out = []
    padded = np.pad(images, ((0, 0), (max_shift, max_shift), (max_shift, max_shift)), mode="edge")
    for _ in range(2):
        shifts = rng.integers(-max_shift, max_shift + 1, (B, 2)) if max_shift > 0 else np.zeros((B, 2), int)
        views = np.empty_like(images)
        for b, (dy, dx) in enumerate(shifts):
            r0 = max_shift - dy
            c0 = max_shift - dx
            views[b] = padded[b, r0:r0 + H, c0:c0 + W]
        if noise_sigma > 0:
            views = np.clip(views + rng.normal(0.0, noise_sigma, views.shape), 0.0, 1.0)
        out.append(views)
    return out[0], out[1]


def _shift(image, dy, dx, pad):
    if pad == 0:
        return image.copy()
    H, W = image.shape
    padded = np.pad(image, pad, mode="edge")
    return padded[pad - dy:pad - dy + H, pad - dx:pad - dx + W].copy()


@dataclass
class BandSplit:
    train_images: np.ndarray
    train_labels: np.ndarray
    gallery_images: np.ndarray
    gallery_labels: np.ndarray
    probe_images: np.ndarray
    probe_labels: np.ndarray


@dataclass
class FederationDataset:
    bands: dict  # SpectrumBand -> BandSplit
    num_identities: int
    train_per_identity: int
    test_per_identity: int
    seed: int
    profile: RenderProfile

    def client_bands(self):
        return [b for b in BANDS if b in self.bands]


def build_federation_dataset(num_identities: int = 50, train_per_identity: int = 2,
                             test_per_identity: int = 4, profile: RenderProfile | None = None,
                             seed: int = 0) -> FederationDataset:
    """Session 1 feeds training and the enrollment gallery; session 2 the probes."""
    if num_identities < 2:
        raise ValueError("need at least two identities")
    if train_per_identity < 1 or test_per_identity < 1:
        raise ValueError("train_per_identity and test_per_identity must be positive")
    profile = profile or RenderProfile()
    latents = [gen_identity(i, seed) for i in range(num_identities)]
    bands = {}
    for band in BANDS:
        s1 = [render(lat, band, 1, k, profile, seed) for lat in latents for k in range(train_per_identity)]
        s2 = [render(lat, band, 2, k, profile, seed) for lat in latents for k in range(test_per_identity)]
        tr_x = np.stack([s.image for s in s1])
        tr_y = np.array([s.label for s in s1])
        bands[band] = BandSplit(tr_x, tr_y, tr_x.copy(), tr_y.copy(),
                                np.stack([s.image for s in s2]), np.array([s.label for s in s2]))
    return FederationDataset(bands, num_identities, train_per_identity, test_per_identity, seed, profile)


# -- directory layout ------------------------------------------------------

class DatasetError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_FILE_RE = re.compile(r"^([12])_(\d+)\.png$", re.IGNORECASE)


def _area_matrix(n_in, n_out):
    """Row-stochastic matrix averaging n_in cells into n_out by overlap area."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n_out


def area_resize(image, size=IMAGE_SIZE):
    image = np.asarray(image, dtype=np.float64)
    if image.shape == (size, size):
        return image.copy()
    return _area_matrix(image.shape[0], size) @ image @ _area_matrix(image.shape[1], size).T


def load_image_directory(path, size: int = IMAGE_SIZE) -> list[Sample]:
    """Read ``<band>/<identity>/<session>_<idx>.png`` into Samples.

    Identity directory names are mapped to integer labels in sorted order.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DatasetError([f"{root}: not a directory"])
    problems = []
    entries = []
    for band_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            band = SpectrumBand.parse(band_dir.name)
        except ValueError:
            problems.append(f"{band_dir}: unknown band directory")
            continue
        for id_dir in sorted(band_dir.iterdir()):
            if not id_dir.is_dir():
                problems.append(f"{id_dir}: expected an identity directory")
                continue
            for f in sorted(id_dir.iterdir()):
                m = _FILE_RE.match(f.name)
                if not m:
                    problems.append(f"{f}: name does not match <session>_<idx>.png")
                    continue
                entries.append((band, id_dir.name, int(m.group(1)), int(m.group(2)), f))
    identities = {name: i for i, name in enumerate(sorted({e[1] for e in entries}, key=_natural_key))}
    samples = []
    for band, ident, session, idx, f in entries:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except Exception as exc:  # PIL raises a variety of types
            problems.append(f"{f}: unreadable ({exc})")
            continue
        samples.append(Sample(area_resize(arr, size), identities[ident], band, session, idx))
    if problems:
        raise DatasetError(problems)
    return samples


def _natural_key(name):
    return (0, int(name)) if name.isdigit() else (1, name)


def dataset_from_samples(samples, seed: int = 0, profile: RenderProfile | None = None) -> FederationDataset:
    """Group loaded Samples into the federation layout (session 1 train/gallery, session 2 probes)."""
    bands = {}
    for band in BANDS:
        s1 = sorted((s for s in samples if s.band == band and s.session == 1), key=lambda s: (s.label, s.index))
        s2 = sorted((s for s in samples if s.band == band and s.session == 2), key=lambda s: (s.label, s.index))
        if not s1 or not s2:
            continue
        tr_x = np.stack([s.image for s in s1])
        tr_y = np.array([s.label for s in s1])
        bands[band] = BandSplit(tr_x, tr_y, tr_x.copy(), tr_y.copy(),
                                np.stack([s.image for s in s2]), np.array([s.label for s in s2]))
    labels = {s.label for s in samples}
    n1 = max((len(b.train_labels) for b in bands.values()), default=0)
    n2 = max((len(b.probe_labels) for b in bands.values()), default=0)
    return FederationDataset(bands, len(labels), n1 // max(len(labels), 1), n2 // max(len(labels), 1),
                             seed, profile or RenderProfile())


def write_image_directory(dataset: FederationDataset, path) -> list[Path]:
    """Write a dataset as 8-bit PNGs in the ingestion layout."""
    from PIL import Image

    root = Path(path)
    written = []
    for band, split in dataset.bands.items():
        for session, images, labels in ((1, split.train_images, split.train_labels),
                                        (2, split.probe_images, split.probe_labels)):
            counters = {}
            for img, lab in zip(images, labels):
                k = counters.get(int(lab), 0)
                counters[int(lab)] = k + 1
                out = root / band.value / f"{int(lab):04d}" / f"{session}_{k}.png"
                out.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out)
                written.append(out)
    return written
