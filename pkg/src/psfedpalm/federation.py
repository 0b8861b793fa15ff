"""Federated training: spectrum-grouped anchors and the baseline methods.

One round of the grouped protocol:

1. every client starts from the current global model and trains locally
   against a frozen copy of the opposite group's anchor;
2. the server averages client models per band, then Green+Blue into the
   short anchor and Red+NIR into the long anchor;
3. the global model is the mean of the two anchors.

Baselines share the same scheduler and differ only in which loss terms are
active and which parameter slices are aggregated.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .losses import LossBreakdown, LossHyperparams, total_loss
from .model import (AdamState, ArchitectureDescriptor, NonFiniteGradientError, ParamVector,
                    adam_step, apply_running_stats, init_params)
from .specdata import BANDS, FederationDataset, SpectrumBand, SpectrumGroup, augment_batch, group_of

logger = logging.getLogger(__name__)

METHODS = ("standalone", "fedavg", "fedprox", "fedbn", "fedper", "psfed")
GLOBAL_METHODS = ("fedavg", "fedprox", "psfed")
PERSONAL_METHODS = ("standalone", "fedbn", "fedper")

_ALIASES = {"w/o fl": "standalone", "wo_fl": "standalone", "psfed-palm": "psfed", "psfedpalm": "psfed"}


def canonical_method(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return key


@dataclass
class MethodConfig:
    method: str = "psfed"
    rounds: int = 30
    local_epochs: int = 3
    batch_size: int = 64
    lr: float = 0.01
    hp: LossHyperparams = field(default_factory=LossHyperparams)
    seed: int = 0
    augment_shift: int = 2
    augment_noise: float = 0.05
    max_local_steps: int = 100_000
    checkpoint_dir: str | None = None
    checkpoint_cadence: int = 0

    def __post_init__(self):
        self.method = canonical_method(self.method)
        problems = []
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if self.local_epochs < 0:
            problems.append("local_epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.rounds * self.local_epochs > self.max_local_steps:
            problems.append("rounds * local_epochs exceeds max_local_steps")
        if problems:
            raise ValueError("; ".join(problems))

    def effective_hp(self) -> LossHyperparams:
        """Loss switches implied by the method."""
        if self.method == "psfed":
            return self.hp
        return replace(self.hp, use_global_prox=self.method == "fedprox",
                       use_anchor_prox=False, use_mse=False)


@dataclass
class ClientState:
    client_id: int
    band: SpectrumBand
    images: np.ndarray
    labels: np.ndarray
    params: ParamVector | None = None
    adam: AdamState | None = None

    def __post_init__(self):
        self.band = SpectrumBand.parse(self.band)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    def rng(self, seed: int, round_index: int) -> np.random.Generator:
        return np.random.default_rng([seed, self.client_id, round_index])


@dataclass
class ClientUpdate:
    client_id: int
    band: SpectrumBand
    params: ParamVector
    num_samples: int
    losses: list  # LossBreakdown per step
    adam: AdamState | None = None

    def mean_losses(self) -> LossBreakdown:
        if not self.losses:
            return LossBreakdown()
        keys = LossBreakdown().as_dict().keys()
        return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in self.losses])) for k in keys})


@dataclass
class RoundRecord:
    round: int
    theta_global: ParamVector | None
    theta_s: ParamVector | None
    theta_l: ParamVector | None
    band_models: dict
    client_losses: dict  # client_id -> (band, LossBreakdown)
    wall_time: float = 0.0


class TrainingAborted(RuntimeError):
    pass


# -- aggregation ------------------------------------------------------------

def aggregate_spectrum(models, bands=None) -> ParamVector:
    """Sample-count weighted mean of ``[(client_id, ParamVector, count), ...]``.

    Summation runs in ascending client_id order. ``bands`` (one per model)
    is checked for uniformity when given.
    """
    models = sorted(models, key=lambda m: m[0])
    if not models:
        raise ValueError("cannot aggregate an empty model list")
    if bands is not None and len({SpectrumBand.parse(b) for b in bands}) > 1:
        raise ValueError("aggregate_spectrum received models from more than one band")
    arch = models[0][1].arch
    if any(m[1].arch != arch for m in models):
        raise ValueError("models have different architectures")
    total = float(sum(m[2] for m in models))
    if total <= 0:
        raise ValueError("sample counts must sum to a positive number")
    out = (models[0][2] / total) * models[0][1].values
    for _, params, count in models[1:]:
        out = out + (count / total) * params.values
    return ParamVector(arch, out, models[0][1].layer_map)


def weighted_pair(theta_a: ParamVector, theta_b: ParamVector, w_a: float = 1.0, w_b: float = 1.0) -> ParamVector:
    if len(theta_a) != len(theta_b):
        raise ValueError(f"parameter length mismatch: {len(theta_a)} vs {len(theta_b)}")
    s = w_a + w_b
    return ParamVector(theta_a.arch, (w_a / s) * theta_a.values + (w_b / s) * theta_b.values, theta_a.layer_map)


def aggregate_group(theta_a: ParamVector, theta_b: ParamVector) -> ParamVector:
    """Equal-weight mean of the two band models of one group."""
    return weighted_pair(theta_a, theta_b)


def aggregate_global(theta_s: ParamVector, theta_l: ParamVector) -> ParamVector:
    """Equal-weight mean of the short and long anchors."""
    return weighted_pair(theta_s, theta_l)


def _band_models(updates):
    by_band = {}
    for u in updates:
        by_band.setdefault(u.band, []).append(u)
    models = {}
    counts = {}
    for band, items in by_band.items():
        models[band] = aggregate_spectrum([(u.client_id, u.params, u.num_samples) for u in items],
                                          [u.band for u in items])
        counts[band] = sum(u.num_samples for u in items)
    return models, counts


def fedavg_aggregate(updates) -> ParamVector:
    """Sample-weighted mean over all clients.

    Evaluated pairwise (Green+Blue, Red+NIR, then both) so that with
    balanced bands it reproduces the grouped average bit for bit.
    """
    models, counts = _band_models(updates)
    missing = [b.value for b in BANDS if b not in models]
    if missing:
        # fall back to a flat weighted mean when the topology is not four-band
        return aggregate_spectrum([(u.client_id, u.params, u.num_samples) for u in updates])
    g, b, n, r = SpectrumBand.GREEN, SpectrumBand.BLUE, SpectrumBand.NIR, SpectrumBand.RED
    short = weighted_pair(models[g], models[b], counts[g], counts[b])
    long_ = weighted_pair(models[n], models[r], counts[n], counts[r])
    return weighted_pair(short, long_, counts[g] + counts[b], counts[n] + counts[r])


# -- client side -------------------------------------------------------------

def client_local_training(client: ClientState, theta_start: ParamVector, theta_global: ParamVector,
                          theta_anchor: ParamVector | None, cfg: MethodConfig, round_index: int) -> ClientUpdate:
    """E local epochs of mini-batch Adam on the client's own data.

    ``theta_global`` and ``theta_anchor`` are only read. The returned
    parameters include refreshed normalization running statistics.
    """
    hp = cfg.effective_hp()
    rng = client.rng(cfg.seed, round_index)
    params = theta_start.copy()
    adam = AdamState.fresh(len(params), lr=cfg.lr)
    losses = []
    n = client.num_samples
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            view_a, view_b = augment_batch(client.images[idx], rng, cfg.augment_shift, cfg.augment_noise)
            views = np.concatenate([view_a, view_b])
            labels = np.concatenate([client.labels[idx], client.labels[idx]])
            breakdown, grad, out = total_loss(views, labels, params, theta_global, theta_anchor, hp)
            if not np.isfinite(breakdown.total):
                raise TrainingAborted(
                    f"client {client.client_id} ({client.band.value}) round {round_index}: "
                    f"non-finite loss {breakdown}"
                )
            try:
                adam, params = adam_step(adam, params, grad)
            except NonFiniteGradientError as exc:
                raise TrainingAborted(f"client {client.client_id} round {round_index}: {exc}") from exc
            apply_running_stats(params, out.running_stats)
            losses.append(breakdown)
    return ClientUpdate(client.client_id, client.band, params, n, losses, adam)


# -- server side -------------------------------------------------------------

def _personal_mask(method: str, params: ParamVector):
    if method == "fedbn":
        return params.mask(lambda name: name.startswith("norm"))
    if method == "fedper":
        return params.mask(lambda name: name.startswith("head."))
    return None


@dataclass
class ServerState:
    theta_global: ParamVector
    theta_s: ParamVector
    theta_l: ParamVector
    client_params: dict  # client_id -> ParamVector (personalized methods)


def make_clients(dataset: FederationDataset) -> list[ClientState]:
    """One client per band, ids in table order (NIR, Red, Green, Blue)."""
    return [ClientState(i, band, dataset.bands[band].train_images, dataset.bands[band].train_labels)
            for i, band in enumerate(b for b in BANDS if b in dataset.bands)]


def init_server(arch: ArchitectureDescriptor, clients, seed: int) -> ServerState:
    theta = init_params(arch, seed)
    return ServerState(theta, theta.copy(), theta.copy(), {c.client_id: theta.copy() for c in clients})


def _start_params(method, server: ServerState, client: ClientState) -> ParamVector:
    if method == "standalone":
        return server.client_params[client.client_id]
    if method in ("fedbn", "fedper"):
        own = server.client_params[client.client_id]
        mask = _personal_mask(method, own)
        return ParamVector(own.arch, np.where(mask, own.values, server.theta_global.values), own.layer_map)
    return server.theta_global


def run_round(server: ServerState, clients, cfg: MethodConfig, round_index: int, order=None) -> RoundRecord:
    """Train every client against frozen server state, then aggregate.

    ``order`` permutes client execution; results are keyed by client_id so
    it cannot influence the outcome.
    """
    t0 = time.perf_counter()
    method = cfg.method
    by_id = {c.client_id: c for c in clients}
    order = list(order) if order is not None else sorted(by_id)
    if sorted(order) != sorted(by_id):
        raise ValueError("execution order must be a permutation of the client ids")

    updates = {}
    for cid in order:
        client = by_id[cid]
        anchor = None
        if method == "psfed":
            anchor = server.theta_l if group_of(client.band) is SpectrumGroup.SHORT else server.theta_s
        start = _start_params(method, server, client)
        updates[cid] = client_local_training(client, start, server.theta_global, anchor, cfg, round_index)
    updates = [updates[cid] for cid in sorted(updates)]
    client_losses = {u.client_id: (u.band, u.mean_losses()) for u in updates}
    for u in updates:
        by_id[u.client_id].adam = u.adam

    band_models, counts = _band_models(updates)
    record = RoundRecord(round_index, None, None, None, band_models, client_losses)
    if method == "psfed":
        theta_s = aggregate_group(band_models[SpectrumBand.GREEN], band_models[SpectrumBand.BLUE])
        theta_l = aggregate_group(band_models[SpectrumBand.NIR], band_models[SpectrumBand.RED])
        theta_global = aggregate_global(theta_s, theta_l)
        server.theta_s, server.theta_l, server.theta_global = theta_s, theta_l, theta_global
        record.theta_s, record.theta_l = theta_s, theta_l
    elif method == "standalone":
        server.client_params = {u.client_id: u.params for u in updates}
    else:
        server.theta_global = fedavg_aggregate(updates)
        if method in ("fedbn", "fedper"):
            mask = _personal_mask(method, server.theta_global)
            server.client_params = {
                u.client_id: ParamVector(u.params.arch, np.where(mask, u.params.values, server.theta_global.values),
                                         u.params.layer_map)
                for u in updates
            }
    if method != "standalone":
        record.theta_global = server.theta_global
    record.wall_time = time.perf_counter() - t0
    return record


@dataclass
class TrainingResult:
    method: str
    theta_global: ParamVector | None
    theta_s: ParamVector | None
    theta_l: ParamVector | None
    client_params: dict  # client_id -> ParamVector
    client_bands: dict  # client_id -> SpectrumBand
    records: list
    clients: list = field(default_factory=list, repr=False)

    def eval_models(self):
        """A shared ParamVector for global methods, else band -> client model."""
        if self.method in GLOBAL_METHODS:
            return self.theta_global
        return {self.client_bands[cid]: p for cid, p in sorted(self.client_params.items())}

    def final_components(self) -> dict:
        """Component tag -> ParamVector written as final checkpoints."""
        if self.method == "psfed":
            return {"global": self.theta_global, "anchor_s": self.theta_s, "anchor_l": self.theta_l}
        if self.method in GLOBAL_METHODS:
            return {"global": self.theta_global}
        return {f"client_{cid}": p for cid, p in sorted(self.client_params.items())}


def run_training(cfg: MethodConfig, dataset: FederationDataset, seed: int | None = None,
                 clients=None, order_fn=None, arch: ArchitectureDescriptor | None = None) -> TrainingResult:
    """Run ``cfg.rounds`` communication rounds from a seeded initialization.

    ``order_fn(round_index, client_ids)`` may permute execution order per
    round (used to test scheduling independence).
    """
    if seed is not None and seed != cfg.seed:
        cfg = replace(cfg, seed=seed)
    clients = clients if clients is not None else make_clients(dataset)
    arch = arch or ArchitectureDescriptor(num_classes=dataset.num_identities)
    server = init_server(arch, clients, cfg.seed)
    records = []
    for r in range(1, cfg.rounds + 1):
        ids = sorted(c.client_id for c in clients)
        order = order_fn(r, ids) if order_fn else ids
        try:
            record = run_round(server, clients, cfg, r, order)
        except TrainingAborted:
            if cfg.checkpoint_dir:
                save_checkpoint(Path(cfg.checkpoint_dir) / f"abort_r{r:04d}_global.psfp", server.theta_global,
                                seed=cfg.seed, round=r, component="global")
            raise
        records.append(record)
        logger.info("%s round %d/%d done in %.2fs", cfg.method, r, cfg.rounds, record.wall_time)
        if cfg.checkpoint_dir and cfg.checkpoint_cadence and r % cfg.checkpoint_cadence == 0:
            _write_round_checkpoints(cfg, server, clients, r)
    if cfg.method == "standalone":
        client_params = dict(server.client_params)
    elif cfg.method in ("fedbn", "fedper"):
        client_params = dict(server.client_params)
    else:
        client_params = {c.client_id: server.theta_global for c in clients}
    has_anchors = cfg.method == "psfed"
    return TrainingResult(
        cfg.method,
        server.theta_global if cfg.method != "standalone" else None,
        server.theta_s if has_anchors else None,
        server.theta_l if has_anchors else None,
        client_params,
        {c.client_id: c.band for c in clients},
        records,
        clients,
    )


def _write_round_checkpoints(cfg, server, clients, r):
    root = Path(cfg.checkpoint_dir)
    comps = {}
    if cfg.method != "standalone":
        comps["global"] = (server.theta_global, None)
    if cfg.method == "psfed":
        comps["anchor_s"] = (server.theta_s, None)
        comps["anchor_l"] = (server.theta_l, None)
    if cfg.method in PERSONAL_METHODS:
        for c in clients:
            comps[f"client_{c.client_id}"] = (server.client_params[c.client_id], c.adam)
    for tag, (params, adam) in comps.items():
        save_checkpoint(root / f"r{r:04d}_{tag}.psfp", params, seed=cfg.seed, round=r, component=tag, adam=adam)


# -- logs --------------------------------------------------------------------

LOSS_COLUMNS = ("ce", "con", "task", "prox_global", "prox_anchor", "mse", "total")


def write_loss_log(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client_id", "spectrum", *LOSS_COLUMNS])
        for rec in records:
            for cid, (band, b) in sorted(rec.client_losses.items()):
                w.writerow([rec.round, cid, band.value, *(repr(getattr(b, k)) for k in LOSS_COLUMNS)])
    return path


def write_round_log(records, method: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "method", *LOSS_COLUMNS, *(f"dist_{b.value}" for b in BANDS)])
        for rec in records:
            means = [float(np.mean([getattr(b, k) for _, b in rec.client_losses.values()])) for k in LOSS_COLUMNS]
            dists = []
            for band in BANDS:
                if rec.theta_global is None or band not in rec.band_models:
                    dists.append("")
                else:
                    dists.append(repr(float(np.linalg.norm(rec.band_models[band].values - rec.theta_global.values))))
            w.writerow([rec.round, method, *(repr(m) for m in means), *dists])
    return path
