"""Principal component analysis by eigendecomposition of the covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaModel:
    mean: np.ndarray  # (C,)
    components: np.ndarray  # (C, k), orthonormal columns
    explained_variance: np.ndarray  # (k,)
    rank: int
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.components.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components.T + self.mean


def pca_fit(samples: np.ndarray, k: int) -> PcaModel:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be an (n, C) array, got shape {x.shape}")
    n, c = x.shape
    if not 1 <= k <= c:
        raise ValueError(f"k={k} must lie in [1, C={c}]")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # Deterministic sign: largest-magnitude entry of each component positive.
    pivots = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivots, np.arange(c)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    tol = max(evals[0], 0.0) * c * np.finfo(np.float64).eps * 10
    rank = int(np.sum(evals > tol))
    return PcaModel(
        mean=mean,
        components=np.ascontiguousarray(evecs[:, :k]),
        explained_variance=np.clip(evals[:k], 0.0, None),
        rank=rank,
        rank_deficient=rank < k,
    )


def pca_fit_project(samples: np.ndarray, k: int) -> tuple[PcaModel, np.ndarray]:
    model = pca_fit(samples, k)
    return model, model.project(samples)
