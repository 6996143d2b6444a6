"""Training objectives.

Every loss is a plain function of numpy arrays returning ``(value, grad)``
where ``grad`` is the derivative of the scalar value with respect to the
first argument. :meth:`domainmix.diffcore.Tape.head` turns any of them into a
tape node, which is how they are wired into the encoder and discriminator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import as_matrix
from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "LossConfig",
    "domain_classification_loss",
    "domain_balance_loss",
    "identity_loss",
    "triplet_loss",
    "combined_loss",
    "combined_weights",
    "kl_to_uniform",
    "pairwise_distances",
]

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class LossConfig:
    lambda_m: float = 1.0
    lambda_s: float = 1.0
    margin: float = 0.3
    balance_constant: float | None = None  # None -> ln(n)/n
    n_domains: int = 2
    normalize_triplet: bool = False

    def __post_init__(self):
        if self.n_domains < 2:
            raise ConfigError("need at least two domains")
        if self.margin < 0:
            raise ConfigError("triplet margin must be non-negative")
        if self.a < math.log(self.n_domains) / self.n_domains - 1e-15:
            raise ConfigError(
                f"balance constant {self.a} is below ln(n)/n; the balance loss could go negative"
            )

    @property
    def a(self) -> float:
        if self.balance_constant is None:
            return math.log(self.n_domains) / self.n_domains
        return float(self.balance_constant)


def _labels(y, n_rows: int, upper: int, what: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != n_rows:
        raise DimensionError(f"{n_rows} rows but {y.shape[0]} {what}")
    if y.size and (y.min() < 0 or y.max() >= upper):
        raise ContractError(f"{what} must lie in [0, {upper}), got range [{y.min()}, {y.max()}]")
    return y


def domain_classification_loss(probs, d):
    """Mean cross-entropy of discriminator probabilities against domain labels.

    ``d[i]`` is 0 for synthetic and 1 for real samples.
    """
    p = as_matrix(probs)
    B = p.shape[0]
    d = _labels(d, B, p.shape[1], "domain labels")
    rows = np.arange(B)
    picked = np.maximum(p[rows, d], _TINY)
    value = -np.log(picked).mean()
    grad = np.zeros_like(p)
    grad[rows, d] = -1.0 / (B * picked)
    return float(value), grad


def domain_balance_loss(probs, a: float):
    """Mean over rows of ``sum_j (p_j ln p_j + a)``.

    Convex in each row; on the simplex its minimum sits at the uniform row.
    ``0 ln 0`` is taken as 0.
    """
    p = as_matrix(probs)
    B, n = p.shape
    safe = np.maximum(p, _TINY)
    plogp = np.where(p > 0, p * np.log(safe), 0.0)
    value = (plogp.sum(axis=1) + n * a).mean()
    grad = (np.log(safe) + 1.0) / B
    return float(value), grad


def kl_to_uniform(probs) -> np.ndarray:
    """Per-row KL(p || uniform); equals the balance loss term with a = ln(n)/n."""
    p = as_matrix(probs)
    n = p.shape[1]
    plogp = np.where(p > 0, p * np.log(np.maximum(p, _TINY)), 0.0)
    return plogp.sum(axis=1) + math.log(n)


def identity_loss(logits, y):
    """Mean softmax cross-entropy over the full (synthetic + pseudo) head."""
    z = as_matrix(logits)
    B, M = z.shape
    y = _labels(y, B, M, "identity labels")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(B)
    value = -log_p[rows, y].mean()
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    return float(value), grad / B


def pairwise_distances(f: np.ndarray) -> np.ndarray:
    diff = f[:, None, :] - f[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def triplet_loss(features, y, margin: float):
    """Batch-hard triplet loss with the hardest positive and hardest negative.

    Ties in the mining step go to the lowest batch index.
    """
    f = as_matrix(features)
    B = f.shape[0]
    y = np.asarray(y).ravel()
    if y.shape[0] != B:
        raise DimensionError(f"{B} features but {y.shape[0]} labels")
    dist = pairwise_distances(f)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    if not (pos_mask.any(axis=1).all() and neg_mask.any(axis=1).all()):
        bad = np.flatnonzero(~(pos_mask.any(axis=1) & neg_mask.any(axis=1)))
        raise ContractError(f"anchors {bad.tolist()} lack a positive or a negative in the batch")
    # argmax/argmin return the first extreme index -> lowest-index tie-break
    hard_p = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hard_n = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    rows = np.arange(B)
    d_ap = dist[rows, hard_p]
    d_an = dist[rows, hard_n]
    hinge = margin + d_ap - d_an
    active = hinge > 0
    value = np.where(active, hinge, 0.0).mean()

    grad = np.zeros_like(f)
    for partner, sign, d in ((hard_p, 1.0, d_ap), (hard_n, -1.0, d_an)):
        use = active & (d > 0)  # subgradient 0 at coincident points
        u = np.zeros_like(f)
        u[use] = sign * (f[use] - f[partner[use]]) / d[use, None]
        grad += u
        np.add.at(grad, partner, -u)
    return float(value), grad / B


def combined_loss(parts, cfg: LossConfig) -> float:
    """``lambda_m * db + lambda_s * id + tri`` for a mapping of part values.

    On a tape the same weights are applied with ``Tape.weighted_sum`` using
    :func:`combined_weights`.
    """
    w = combined_weights(cfg)
    return float(sum(w[k] * float(parts[k]) for k in ("db", "id", "tri")))


def combined_weights(cfg: LossConfig) -> dict:
    return {"db": cfg.lambda_m, "id": cfg.lambda_s, "tri": 1.0}
