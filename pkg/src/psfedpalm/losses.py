"""Loss terms with analytic gradients.

Each loss returns ``(value, gradient)``. ``total_loss`` wires them to the
network and returns a :class:`LossBreakdown` plus the flat parameter
gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .model import ParamVector, backward, forward


@dataclass(frozen=True)
class LossHyperparams:
    mu: float = 0.01
    tau: float = 1000.0
    gamma: float = 0.07
    w_ce: float = 0.8
    w_con: float = 0.2
    use_global_prox: bool = True
    use_anchor_prox: bool = True
    use_mse: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.tau < 0:
            raise ValueError("mu and tau must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if abs(self.w_ce + self.w_con - 1.0) > 1e-12:
            raise ValueError("w_ce + w_con must equal 1")


@dataclass
class LossBreakdown:
    ce: float = 0.0
    con: float = 0.0
    task: float = 0.0
    prox_global: float = 0.0
    prox_anchor: float = 0.0
    mse: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    K, M = logits.shape
    if K < 1:
        raise ValueError("cross_entropy needs at least one sample")
    if labels.shape != (K,) or labels.min() < 0 or labels.max() >= M:
        raise ValueError(f"labels must be {K} integers in [0, {M})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(K)
    value = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(value), grad / K


def supcon(embeddings, labels, gamma):
    """Supervised contrastive loss summed (not averaged) over anchors.

    For anchor i the positive set is every other row with the same label and
    the denominator runs over every row except i.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    N = z.shape[0]
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    n_pos = same.sum(axis=1)
    if np.any(n_pos == 0):
        raise ValueError(f"anchors {np.flatnonzero(n_pos == 0).tolist()} have no positive in the batch")

    s = z @ z.T / gamma
    s_masked = s.copy()
    np.fill_diagonal(s_masked, -np.inf)
    log_denom = logsumexp(s_masked, axis=1)
    log_prob = s - log_denom[:, None]
    pos_w = same / n_pos[:, None]
    value = -np.sum(pos_w * log_prob)

    # dL/ds_ia = softmax_ia (a != i) - pos_w_ia
    soft = np.exp(s_masked - log_denom[:, None])
    ds = soft - pos_w
    grad = (ds + ds.T) @ z / gamma
    return float(value), grad


def task_loss(logits, embeddings, labels, hp: LossHyperparams):
    """Weighted cross-entropy + supervised contrastive."""
    ce, g_logits = cross_entropy(logits, labels)
    con, g_emb = supcon(embeddings, labels, hp.gamma)
    value = hp.w_ce * ce + hp.w_con * con
    return value, (hp.w_ce * g_logits, hp.w_con * g_emb), (ce, con)


def proximal(theta_local, theta_ref, mu, mask=None):
    """(mu/2)*||theta_local - theta_ref||^2 with gradient on theta_local only.

    ``mask`` restricts the penalty to selected entries (e.g. trainable slices).
    """
    a = theta_local.values if isinstance(theta_local, ParamVector) else np.asarray(theta_local, dtype=np.float64)
    b = theta_ref.values if isinstance(theta_ref, ParamVector) else np.asarray(theta_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"parameter length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if mask is not None:
        diff = np.where(mask, diff, 0.0)
    return float(0.5 * mu * np.dot(diff, diff)), mu * diff


def repr_mse(v_local, v_anchor, tau):
    """tau * mean squared feature difference, averaged over the batch."""
    v_local = np.asarray(v_local, dtype=np.float64)
    v_anchor = np.asarray(v_anchor, dtype=np.float64)
    if v_local.shape != v_anchor.shape:
        raise ValueError(f"feature shape mismatch: {v_local.shape} vs {v_anchor.shape}")
    if v_local.ndim == 1:
        v_local, v_anchor = v_local[None], v_anchor[None]
    B, n = v_local.shape
    diff = v_local - v_anchor
    value = tau * np.sum(diff * diff) / (n * B)
    return float(value), 2.0 * tau * diff / (n * B)


def total_loss(images, labels, theta_local: ParamVector, theta_global: ParamVector,
               theta_anchor: ParamVector | None, hp: LossHyperparams):
    """Full local objective on one batch of augmented views.

    Returns ``(breakdown, grad, forward_output)``; the forward output carries
    the refreshed running statistics. The anchor is evaluated in eval mode
    and never receives gradient.
    """
    out = forward(theta_local, images, mode="train")
    task, (g_logits, g_emb), (ce, con) = task_loss(out.logits, out.embedding, labels, hp)

    trainable = theta_local.trainable_mask()
    prox_g = prox_a = mse = 0.0
    g_prox = np.zeros(len(theta_local))
    if hp.use_global_prox:
        prox_g, g = proximal(theta_local, theta_global, hp.mu, trainable)
        g_prox += g
    if hp.use_anchor_prox and theta_anchor is not None:
        prox_a, g = proximal(theta_local, theta_anchor, hp.mu, trainable)
        g_prox += g
    if hp.use_mse and theta_anchor is not None:
        v_anchor = forward(theta_anchor, images, mode="eval").embedding
        mse, g_mse = repr_mse(out.embedding, v_anchor, hp.tau)
        g_emb = g_emb + g_mse

    grad = backward(out.cache, g_logits, g_emb) + g_prox
    total = task + prox_a + prox_g + mse
    breakdown = LossBreakdown(ce, con, task, prox_g, prox_a, mse, total)
    return breakdown, grad, out
