"""Gradient descent and Adam over named parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import Parameter


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    """Stateful optimizer; moment buffers are keyed by parameter name."""

    def __init__(self, config: OptimizerConfig | None = None):
        self.config = config or OptimizerConfig()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        params = [p for p in params if p.trainable]
        for p in params:
            if p.tensor.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
        cfg = self.config
        for p in params:
            g = p.tensor.grad
            if cfg.kind == "sgd":
                p.tensor.data = p.tensor.data - cfg.lr * g
                continue
            t = self.t.get(p.name, 0) + 1
            m = cfg.beta1 * self.m.get(p.name, 0.0) + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * self.v.get(p.name, 0.0) + (1.0 - cfg.beta2) * g * g
            self.t[p.name], self.m[p.name], self.v[p.name] = t, m, v
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p.tensor.data = p.tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def optimizer_step(
    params: Iterable[Parameter], config: OptimizerConfig, state: Optimizer | None = None
) -> Optimizer:
    """Apply one update; pass the returned optimizer back in to keep moments."""
    opt = state if state is not None else Optimizer(config)
    opt.step(params)
    return opt
