"""Trunk pretraining, alternating adaptation, and the DPM baseline."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import losses as L
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: F401
from . import networks as N
from . import tensor as T
from .networks import ModelBundle
from .tensor import OptimizerConfig, Optimizer, Parameter, Tensor

DOMAIN_INDEX = {"vis": 0, "thm": 1}


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lam: float = 0.25
    direction: str = "v_to_t"
    # Steps per batch for (theta, rst, detector) phases.
    alternation: tuple[int, int, int] = (1, 1, 1)
    alpha: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.direction not in N.DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if len(self.alternation) != 3 or min(self.alternation) < 0:
            raise ValueError(f"alternation must be three non-negative step counts, got {self.alternation}")
        L.LossConfig(self.lam, tuple(self.alpha))


@dataclass
class TrainReport:
    losses: dict[str, list[float]] = field(default_factory=dict)
    wall_clock: float = 0.0
    checksum: str = ""

    def log(self, key: str, value: float) -> None:
        self.losses.setdefault(key, []).append(float(value))

    def lines(self) -> list[str]:
        keys = sorted(self.losses)
        n = max((len(v) for v in self.losses.values()), default=0)
        out = []
        for e in range(n):
            parts = [f"{k}={self.losses[k][e]:.6f}" for k in keys if e < len(self.losses[k])]
            out.append(f"epoch {e} " + " ".join(parts))
        return out

    def summary(self) -> dict[str, str]:
        s = {"epochs": str(max((len(v) for v in self.losses.values()), default=0))}
        for k, v in sorted(self.losses.items()):
            if v:
                s[f"final_{k}"] = f"{v[-1]:.6f}"
                s[f"first_{k}"] = f"{v[0]:.6f}"
        s["wall_clock_s"] = f"{self.wall_clock:.3f}"
        s["checksum"] = self.checksum
        return s

    def write(self, log_path: str | Path, summary_path: str | Path) -> None:
        Path(log_path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        Path(summary_path).write_text(
            "".join(f"{k}={v}\n" for k, v in self.summary().items()), encoding="utf-8"
        )


@dataclass
class LabeledSet:
    """Single-domain images ``N x S x S x 1`` with contiguous class labels."""

    images: np.ndarray
    labels: np.ndarray
    domain: str


@dataclass
class PairSet:
    """Cross-domain training pairs matched by subject, not by pixel registration."""

    target_images: np.ndarray
    source_images: np.ndarray
    labels: np.ndarray


def parameter_checksum(params: Iterable[Parameter]) -> str:
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _activate(bundle: ModelBundle, active: Iterable[Parameter]) -> list[Parameter]:
    """Make exactly ``active`` differentiable; everything else is frozen."""
    ids = {id(p) for p in active if p.trainable}
    chosen = []
    for p in bundle.parameters():
        p.tensor.requires_grad = id(p) in ids
        if id(p) in ids:
            chosen.append(p)
    return chosen


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _frozen_trunk_features(bundle: ModelBundle, images: np.ndarray, domain: str, chunk: int = 64) -> np.ndarray:
    trunk = bundle.trunk(domain)
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            out.append(N.trunk_forward(images[i : i + chunk], trunk, bundle.trunk_config.depth).data)
    return np.concatenate(out) if out else np.zeros((0,))


def pretrain_trunk(samples: LabeledSet, bundle: ModelBundle, config: TrainConfig) -> TrainReport:
    """Within-domain identity classification of trunk + compression + head.

    Trains the bundle's target-domain path in place.
    """
    labels = np.asarray(samples.labels, dtype=int)
    k = len(np.unique(labels))
    if k < 2:
        raise ValueError("pretraining needs at least 2 identities")
    if samples.domain != bundle.target_domain:
        raise ValueError(
            f"samples are {samples.domain!r} but bundle direction {bundle.direction} targets {bundle.target_domain!r}"
        )
    if labels.max() >= bundle.n_classes:
        raise ValueError(f"label {labels.max()} outside the head's {bundle.n_classes} classes")
    rng = np.random.default_rng([config.seed, 11])
    opt = Optimizer(config.optimizer)
    theta = _activate(bundle, bundle.theta())
    y_all = one_hot(labels, bundle.n_classes)
    report = TrainReport()
    t0 = time.perf_counter()
    for _ in range(config.epochs):
        tot, correct = 0.0, 0
        for idx in _batches(len(labels), config.batch_size, rng):
            probs = N.classify_identity(bundle.features(samples.images[idx], samples.domain), bundle.head)
            loss = L.cross_entropy(probs, y_all[idx])
            T.backward(loss, theta)
            opt.step(theta)
            tot += loss.item() * len(idx)
            correct += int(np.sum(probs.data.argmax(axis=1) == labels[idx]))
        report.log("ce", tot / len(labels))
        report.log("train_acc", correct / len(labels))
    _activate(bundle, bundle.parameters())
    report.wall_clock = time.perf_counter() - t0
    report.checksum = parameter_checksum(bundle.parameters())
    return report


def train_adaptation(pairs: PairSet, bundle: ModelBundle, config: TrainConfig) -> TrainReport:
    """Alternating optimisation of the full framework.

    Per batch, in order: (1) target trunk, compression and head on the total
    loss; (2) the RST on the total loss with those frozen; (3) the domain
    detector on real-vs-mapped classification with everything else frozen.
    The source trunk stays frozen throughout.
    """
    if config.direction != bundle.direction:
        raise ValueError(f"config direction {config.direction} does not match bundle direction {bundle.direction}")
    labels = np.asarray(pairs.labels, dtype=int)
    lam = config.lam
    alpha = tuple(config.alpha)
    tgt, src = bundle.target_domain, bundle.source_domain
    src_trunk_feats = _frozen_trunk_features(bundle, pairs.source_images, src)
    y_all = one_hot(labels, bundle.n_classes)
    d_tgt = DOMAIN_INDEX[tgt]
    d_src = DOMAIN_INDEX[src]

    rng = np.random.default_rng([config.seed, 13])
    opt_theta = Optimizer(config.optimizer)
    opt_phi = Optimizer(config.optimizer)
    opt_det = Optimizer(config.optimizer)
    n_theta, n_phi, n_det = config.alternation
    report = TrainReport()
    t0 = time.perf_counter()

    def mapped_of(idx):
        return N.rst_forward(N.compress(src_trunk_feats[idx], bundle.compression), bundle.rst)

    for _ in range(config.epochs):
        sums = {"l_xid": 0.0, "l_d": 0.0, "total": 0.0, "detector_ce": 0.0}
        for idx in _batches(len(labels), config.batch_size, rng):
            y = y_all[idx]
            nb = len(idx)
            x_tgt = pairs.target_images[idx]
            tgt_feat = mapped_feat = None

            theta = _activate(bundle, bundle.theta())
            for _ in range(n_theta):
                f_t = bundle.features(x_tgt, tgt)
                f_m = mapped_of(idx)
                l_xid = L.cross_domain_id_loss(
                    N.classify_identity(f_t, bundle.head), N.classify_identity(f_m, bundle.head), y
                )
                if lam > 0:
                    l_d = L.domain_invariance_loss(
                        N.domain_detect(f_t, bundle.detector), N.domain_detect(f_m, bundle.detector), alpha
                    )
                    loss = L.total_loss(l_xid, l_d, lam)
                else:
                    # Detector deliberately absent from the graph.
                    loss = l_xid
                T.backward(loss, theta)
                opt_theta.step(theta)
                tgt_feat = f_t.data

            with T.no_grad():
                if tgt_feat is None:
                    tgt_feat = bundle.features(x_tgt, tgt).data
                const_p_t = N.classify_identity(tgt_feat, bundle.head)
                const_d_t = N.domain_detect(tgt_feat, bundle.detector)

            phi = _activate(bundle, bundle.phi())
            for _ in range(n_phi):
                # The target-feature terms are constants with respect to the RST.
                f_m = mapped_of(idx)
                l_xid = L.cross_domain_id_loss(const_p_t, N.classify_identity(f_m, bundle.head), y)
                if lam > 0:
                    l_d = L.domain_invariance_loss(const_d_t, N.domain_detect(f_m, bundle.detector), alpha)
                    loss = L.total_loss(l_xid, l_d, lam)
                else:
                    loss = l_xid
                T.backward(loss, phi)
                opt_phi.step(phi)

            with T.no_grad():
                mapped_feat = mapped_of(idx).data
                p_m = N.classify_identity(mapped_feat, bundle.head)
                l_xid_v = L.cross_domain_id_loss(const_p_t, p_m, y).item()
                l_d_v = L.domain_invariance_loss(const_d_t, N.domain_detect(mapped_feat, bundle.detector), alpha).item()

            det = _activate(bundle, bundle.detector_params())
            det_ce = 0.0
            lab_t = one_hot(np.full(nb, d_tgt), 2)
            lab_s = one_hot(np.full(nb, d_src), 2)
            for _ in range(n_det):
                ce = T.mul(
                    T.add(
                        L.cross_entropy(N.domain_detect(tgt_feat, bundle.detector), lab_t),
                        L.cross_entropy(N.domain_detect(mapped_feat, bundle.detector), lab_s),
                    ),
                    0.5,
                )
                T.backward(ce, det)
                opt_det.step(det)
                det_ce = ce.item()

            sums["l_xid"] += l_xid_v * nb
            sums["l_d"] += l_d_v * nb
            sums["total"] += ((1 - lam) * l_xid_v + lam * l_d_v) * nb
            sums["detector_ce"] += det_ce * nb
        for k, v in sums.items():
            report.log(k, v / len(labels))
    _activate(bundle, bundle.parameters())
    report.wall_clock = time.perf_counter() - t0
    report.checksum = parameter_checksum(bundle.parameters())
    return report


def train_dpm_baseline(
    pairs: PairSet, bundle: ModelBundle, config: TrainConfig, identity_scale: float | None = None
) -> TrainReport:
    """Regress target-domain features from source-domain features.

    Both trunks and the compression stay frozen; only the DPM is trained and
    stored in ``bundle.dpm``.
    """
    if config.direction != bundle.direction:
        raise ValueError(f"config direction {config.direction} does not match bundle direction {bundle.direction}")
    tgt, src = bundle.target_domain, bundle.source_domain
    with T.no_grad():
        f_src = N.compress(_frozen_trunk_features(bundle, pairs.source_images, src), bundle.compression).data
        f_tgt = N.compress(_frozen_trunk_features(bundle, pairs.target_images, tgt), bundle.compression).data
    rng = np.random.default_rng([config.seed, 17])
    bundle.dpm = N.init_dpm("dpm", f_src.shape[-1], rng, identity_scale)
    params = _activate(bundle, bundle.dpm.values())
    opt = Optimizer(config.optimizer)
    report = TrainReport()
    t0 = time.perf_counter()
    with T.no_grad():
        report.log("dpm_loss_init", L.dpm_loss(f_tgt, N.dpm_forward(f_src, bundle.dpm)).item())
    for _ in range(config.epochs):
        tot = 0.0
        for idx in _batches(len(f_src), config.batch_size, rng):
            loss = L.dpm_loss(Tensor(f_tgt[idx]), N.dpm_forward(f_src[idx], bundle.dpm))
            T.backward(loss, params)
            opt.step(params)
            tot += loss.item() * len(idx)
        report.log("dpm_loss", tot / len(f_src))
    _activate(bundle, bundle.parameters())
    report.wall_clock = time.perf_counter() - t0
    report.checksum = parameter_checksum(bundle.parameters())
    return report

