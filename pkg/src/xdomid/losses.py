"""Identification, domain-invariance and baseline objectives.

All losses take taped tensors and return scalar tensors.  Batched inputs
(``N x K`` probabilities, ``N x H x W x C`` maps) are reduced by the batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    alpha: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        _check_lambda(self.lam)
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.shape != (2,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError(f"alpha must be a non-negative 2-vector summing to 1, got {self.alpha}")


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def _check_distribution(p: Tensor, what: str) -> None:
    d = p.data
    if np.any(d < 0) or np.any(np.abs(d.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError(f"{what} is not a probability distribution")


def _batch_size(x: Tensor, vector_rank: int) -> int:
    return x.shape[0] if x.ndim > vector_rank else 1


def cross_entropy(yhat, y) -> Tensor:
    """``-sum(y * log(yhat))`` with probabilities floored at 1e-12."""
    yhat, y = T.core.as_tensor(yhat), T.core.as_tensor(y)
    if yhat.shape != y.shape:
        raise ValueError(f"cross_entropy length mismatch: {yhat.shape} vs {y.shape}")
    n = _batch_size(yhat, 1)
    return T.mul(T.sum(T.mul(y, T.log(yhat, floor=PROB_FLOOR))), -1.0 / n)


def cross_domain_id_loss(yhat_t, yhat_mapped, y) -> Tensor:
    """``-sum(y * log(yhat_t * yhat_mapped))``, evaluated as a sum of two
    cross-entropies (log of a product)."""
    yhat_t, yhat_mapped = T.core.as_tensor(yhat_t), T.core.as_tensor(yhat_mapped)
    if yhat_t.shape != yhat_mapped.shape:
        raise ValueError(f"prediction length mismatch: {yhat_t.shape} vs {yhat_mapped.shape}")
    return T.add(cross_entropy(yhat_t, y), cross_entropy(yhat_mapped, y))


def domain_invariance_loss(d_t, d_mapped, alpha=(0.5, 0.5)) -> Tensor:
    """``-<alpha, log D(t)> - <alpha, log D(t_hat)>``."""
    d_t, d_mapped = T.core.as_tensor(d_t), T.core.as_tensor(d_mapped)
    _check_distribution(d_t, "detector output for target features")
    _check_distribution(d_mapped, "detector output for mapped features")
    a = Tensor(np.asarray(alpha, dtype=np.float64))
    terms = []
    for d in (d_t, d_mapped):
        if d.shape[-1] != 2:
            raise ValueError(f"detector output must have 2 entries, got {d.shape}")
        terms.append(T.mul(T.sum(T.mul(T.log(d, floor=PROB_FLOOR), a)), -1.0 / _batch_size(d, 1)))
    return T.add(terms[0], terms[1])


def total_loss(l_xid, l_d, lam: float) -> Tensor:
    """``(1 - lam) * l_xid + lam * l_d``."""
    _check_lambda(lam)
    if lam == 0.0:
        return T.mul(l_xid, 1.0)
    if lam == 1.0:
        return T.mul(l_d, 1.0)
    return T.add(T.mul(l_xid, 1.0 - lam), T.mul(l_d, lam))


def _squared_error(a, b, what: str) -> Tensor:
    a, b = T.core.as_tensor(a), T.core.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0] if a.ndim == 4 else 1
    return T.mul(T.sum(T.square(T.sub(a, b))), 1.0 / n)


def dpm_loss(t, t_pred) -> Tensor:
    """Squared error between thermal features and their DPM estimate."""
    return _squared_error(t, t_pred, "dpm_loss")


def cpnn_loss(fv, gt) -> Tensor:
    """Squared distance between coupled visible and thermal embeddings."""
    return _squared_error(fv, gt, "cpnn_loss")
