"""End-to-end gallery/probe protocol on a manifest: preprocessing, subject
split, cross-domain pairing, training and scoring."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation as E
from . import imageproc
from . import networks as N
from . import training as TR
from .synthdata import Manifest, Record, Split, split
from .tensor import OptimizerConfig, load_tensor, pca_fit, save_tensor


@dataclass
class ProtocolConfig:
    n_train: int = 30
    n_gallery: int = 30
    templates: int = 4
    crop: int = 64
    sigma1: float = 1.0
    sigma2: float = 2.0
    # Desk-scale trunk widths; depth 3 yields 8 x 8 x 32 maps at crop 64.
    blocks: tuple[int, ...] = (8, 16, 32, 64)
    depth: int = 3
    rst_hidden: int = 200
    pretrain_epochs: int = 8
    adapt_epochs: int = 4
    dpm_epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    # Steps per batch for the (theta, rst, detector) phases.
    alternation: tuple[int, int, int] = (1, 3, 1)
    # DPM starts near the identity map (None = random init).
    dpm_identity_scale: float | None = 0.1

    def trunk_config(self, depth: int | None = None) -> N.TrunkConfig:
        return N.TrunkConfig(tuple(self.blocks), self.depth if depth is None else depth, self.crop)

    def train_config(self, epochs: int, seed: int, direction: str, lam: float = 0.25) -> TR.TrainConfig:
        return TR.TrainConfig(
            epochs=epochs,
            batch_size=self.batch_size,
            seed=seed,
            optimizer=OptimizerConfig("adam", self.lr),
            lam=lam,
            direction=direction,
            alternation=tuple(self.alternation),
        )


def preprocess_records(
    manifest: Manifest, records: Sequence[Record], crop: int, sigma1: float = 1.0, sigma2: float = 2.0
) -> np.ndarray:
    """Stack aligned, DoG-filtered, standardized crops as ``N x S x S x 1``."""
    out = np.empty((len(records), crop, crop, 1))
    for i, rec in enumerate(records):
        img = imageproc.read_image(manifest.resolve(rec))
        out[i, :, :, 0] = imageproc.preprocess(img, rec.landmarks, crop, sigma1, sigma2)
    return out


@dataclass
class PreparedData:
    split: Split
    train_records: list[Record]
    train_images: np.ndarray
    train_labels: np.ndarray  # contiguous class ids
    train_domains: np.ndarray
    gallery_images: np.ndarray
    gallery_subjects: np.ndarray
    probe_images: np.ndarray
    probe_subjects: np.ndarray
    probe_conditions: np.ndarray
    n_classes: int = 0
    meta: dict = field(default_factory=dict)

    def domain_set(self, domain: str) -> TR.LabeledSet:
        m = self.train_domains == domain
        return TR.LabeledSet(self.train_images[m], self.train_labels[m], domain)


def prepare(
    manifest: Manifest,
    cfg: ProtocolConfig,
    seed: int,
    cache: dict | None = None,
) -> PreparedData:
    sp = split(manifest, cfg.n_train, cfg.n_gallery, cfg.templates, seed)
    cache = {} if cache is None else cache

    def load(records):
        key_missing = [r for r in records if (r.path, cfg.crop) not in cache]
        if key_missing:
            arr = preprocess_records(manifest, key_missing, cfg.crop, cfg.sigma1, cfg.sigma2)
            for r, a in zip(key_missing, arr):
                cache[(r.path, cfg.crop)] = a
        return np.stack([cache[(r.path, cfg.crop)] for r in records]) if records else np.zeros((0, cfg.crop, cfg.crop, 1))

    class_of = {s: i for i, s in enumerate(sp.train_subjects)}
    return PreparedData(
        split=sp,
        train_records=sp.train,
        train_images=load(sp.train),
        train_labels=np.array([class_of[r.subject] for r in sp.train]),
        train_domains=np.array([r.domain for r in sp.train]),
        gallery_images=load(sp.gallery),
        gallery_subjects=np.array([r.subject for r in sp.gallery]),
        probe_images=load(sp.probes),
        probe_subjects=np.array([r.subject for r in sp.probes]),
        probe_conditions=np.array([r.condition for r in sp.probes]),
        n_classes=len(sp.train_subjects),
    )


_ARRAYS = (
    "train_images",
    "train_labels",
    "gallery_images",
    "gallery_subjects",
    "probe_images",
    "probe_subjects",
)


def save_prepared(data: PreparedData, out_dir: str | Path) -> None:
    """Write arrays as tensor files plus ``split.json`` with records and strings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in _ARRAYS:
        save_tensor(out / f"{name}.xdt", np.asarray(getattr(data, name), dtype=np.float64))
    sp = data.split
    doc = {
        "train": [asdict(r) for r in sp.train],
        "gallery": [asdict(r) for r in sp.gallery],
        "probes": [asdict(r) for r in sp.probes],
        "train_subjects": list(map(int, sp.train_subjects)),
        "gallery_subjects": list(map(int, sp.gallery_subjects)),
        "train_domains": data.train_domains.tolist(),
        "probe_conditions": data.probe_conditions.tolist(),
        "n_classes": int(data.n_classes),
    }
    (out / "split.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_prepared(out_dir: str | Path) -> PreparedData:
    src = Path(out_dir)
    meta_path = src / "split.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; run preprocess first")
    doc = json.loads(meta_path.read_text(encoding="utf-8"))
    arrs = {name: load_tensor(src / f"{name}.xdt") for name in _ARRAYS}
    sp = Split(
        [Record(**r) for r in doc["train"]],
        [Record(**r) for r in doc["gallery"]],
        [Record(**r) for r in doc["probes"]],
        doc["train_subjects"],
        doc["gallery_subjects"],
    )
    return PreparedData(
        split=sp,
        train_records=sp.train,
        train_images=arrs["train_images"],
        train_labels=arrs["train_labels"].astype(int),
        train_domains=np.array(doc["train_domains"]),
        gallery_images=arrs["gallery_images"],
        gallery_subjects=arrs["gallery_subjects"].astype(int),
        probe_images=arrs["probe_images"],
        probe_subjects=arrs["probe_subjects"].astype(int),
        probe_conditions=np.array(doc["probe_conditions"]),
        n_classes=doc["n_classes"],
    )


def make_pairs(data: PreparedData, direction: str, seed: int) -> TR.PairSet:
    """Pair every target-domain training image with a source-domain image of
    the same subject, drawn by a seeded shuffle (no pixel correspondence)."""
    probe_bundle_target = "thm" if direction == "v_to_t" else "vis"
    source = "vis" if probe_bundle_target == "thm" else "thm"
    rng = np.random.default_rng([seed, 23])
    tgt_idx, src_idx = [], []
    for label in np.unique(data.train_labels):
        t = np.flatnonzero((data.train_labels == label) & (data.train_domains == probe_bundle_target))
        s = np.flatnonzero((data.train_labels == label) & (data.train_domains == source))
        if len(t) == 0 or len(s) == 0:
            continue
        draw = np.concatenate([rng.permutation(s) for _ in range(-(-len(t) // len(s)))])[: len(t)]
        tgt_idx.extend(t)
        src_idx.extend(draw)
    tgt_idx, src_idx = np.array(tgt_idx), np.array(src_idx)
    return TR.PairSet(data.train_images[tgt_idx], data.train_images[src_idx], data.train_labels[tgt_idx])


def pretrain(data: PreparedData, cfg: ProtocolConfig, direction: str, seed: int, depth: int | None = None):
    bundle = N.ModelBundle.create(
        cfg.trunk_config(depth), data.n_classes, direction, seed=seed, rst_hidden=cfg.rst_hidden
    )
    report = TR.pretrain_trunk(
        data.domain_set(bundle.target_domain), bundle, cfg.train_config(cfg.pretrain_epochs, seed, direction)
    )
    bundle.copy_target_trunk_to_source()
    return bundle, report


def adapt(pretrained: N.ModelBundle, data: PreparedData, cfg: ProtocolConfig, lam: float, seed: int):
    bundle = copy.deepcopy(pretrained)
    pairs = make_pairs(data, bundle.direction, seed)
    report = TR.train_adaptation(pairs, bundle, cfg.train_config(cfg.adapt_epochs, seed, bundle.direction, lam))
    return bundle, report


def fit_dpm(pretrained: N.ModelBundle, data: PreparedData, cfg: ProtocolConfig, seed: int):
    bundle = copy.deepcopy(pretrained)
    pairs = make_pairs(data, bundle.direction, seed)
    report = TR.train_dpm_baseline(
        pairs, bundle, cfg.train_config(cfg.dpm_epochs, seed, bundle.direction), cfg.dpm_identity_scale
    )
    return bundle, report


def evaluate(
    bundle: N.ModelBundle,
    data: PreparedData,
    method: str = "proposed",
    conditions: Sequence[str] | None = None,
) -> E.CMCResult:
    gallery = E.enroll(data.gallery_images, data.gallery_subjects, bundle, method=method)
    mask = np.ones(len(data.probe_images), dtype=bool)
    if conditions is not None:
        mask = np.isin(data.probe_conditions, list(conditions))
    feats = E.representation(bundle, data.probe_images[mask], "probe", method)
    sm = E.score_matrix(E.templates(feats), data.probe_subjects[mask], gallery)
    return E.cmc(sm)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    for name, arr in arrays.items():
        save_tensor(Path(path) / f"{name}.xdt", arr)


# ---------------------------------------------------------------- ablation

ABLATION_METHODS = ("learned-compress", "pca-64", "global-avg-pool", "patch-baseline")
PATCH_SIZE = 8


@dataclass
class AblationRow:
    seed: int
    depth: int
    method: str
    lam: float | None
    dims: str
    rank1: float | None
    status: str = "ok"

    def csv(self) -> str:
        lam = "" if self.lam is None else f"{self.lam:g}"
        r1 = "" if self.rank1 is None else f"{self.rank1:.6f}"
        return f"{self.seed},{self.depth},{self.method},{lam},{self.dims},{r1},{self.status}"


def _trunk_maps(bundle: N.ModelBundle, images: np.ndarray, domain: str, depth: int) -> np.ndarray:
    trunk = bundle.trunk(domain)
    return E._chunked_forward(lambda x: N.trunk_forward(x, trunk, depth), images)


def _rank1(gallery_maps: np.ndarray, probe_maps: np.ndarray, data: PreparedData, mask: np.ndarray) -> float:
    gallery = E.build_gallery(E.templates(gallery_maps), data.gallery_subjects)
    sm = E.score_matrix(E.templates(probe_maps), data.probe_subjects[mask], gallery)
    return E.cmc(sm).rank1


def ablate(
    manifest: Manifest,
    cfg: ProtocolConfig,
    depths: Sequence[int] = (1, 2, 3, 4),
    methods: Sequence[str] = ABLATION_METHODS,
    lams: Sequence[float] = (0.0, 0.25),
    seeds: Sequence[int] = (0,),
    direction: str = "v_to_t",
    conditions: Sequence[str] | None = None,
) -> list[AblationRow]:
    """Rank-1 per (seed, depth, method[, lambda]) cell.

    The fixed-feature cells (``pca-64``, ``global-avg-pool``) read one
    backbone, pretrained at the deepest feasible depth, truncated at each
    depth.  ``learned-compress`` pretrains and adapts the full framework at
    that depth, once per lambda.  ``patch-baseline`` matches raw pixel patches
    on a grid as coarse as the trunk output at that depth.  Cells whose depth
    does not fit the crop or the trunk are reported as skipped.
    """
    unknown = [m for m in methods if m not in ABLATION_METHODS]
    if unknown:
        raise ValueError(f"unknown ablation method(s) {unknown}; choose from {ABLATION_METHODS}")
    rows: list[AblationRow] = []
    cache: dict = {}
    for seed in seeds:
        data = prepare(manifest, cfg, seed, cache)
        mask = np.ones(len(data.probe_images), dtype=bool)
        if conditions is not None:
            mask = np.isin(data.probe_conditions, list(conditions))
        feasible = []
        for d in depths:
            reason = ""
            if d < 1 or d > len(cfg.blocks):
                reason = f"skipped: depth {d} outside 1..{len(cfg.blocks)}"
            elif cfg.crop % (2**d):
                reason = f"skipped: crop {cfg.crop} not divisible by 2^{d}"
            if reason:
                for m in methods:
                    for lam in lams if m == "learned-compress" else (None,):
                        rows.append(AblationRow(seed, d, m, lam, "-", None, reason))
            else:
                feasible.append(d)
        backbone = None
        if feasible and ({"pca-64", "global-avg-pool"} & set(methods)):
            backbone, _ = pretrain(data, cfg, direction, seed, depth=max(feasible))
        tgt = "thm" if direction == "v_to_t" else "vis"
        src = "vis" if tgt == "thm" else "thm"
        for d in feasible:
            side = cfg.crop // 2**d
            c = cfg.blocks[d - 1]
            for m in methods:
                if m == "learned-compress":
                    pre, _ = pretrain(data, cfg, direction, seed, depth=d)
                    dims = N.dims_string(side, side, N.compressed_width(c))
                    for lam in lams:
                        bundle, _ = adapt(pre, data, cfg, lam, seed)
                        r1 = evaluate(bundle, data, "proposed", conditions).rank1
                        rows.append(AblationRow(seed, d, m, float(lam), dims, r1))
                elif m == "patch-baseline":
                    g = np.stack([N.patch_features(x, PATCH_SIZE, grid=side) for x in data.gallery_images])
                    p = np.stack([N.patch_features(x, PATCH_SIZE, grid=side) for x in data.probe_images[mask]])
                    dims = N.dims_string(side, side, PATCH_SIZE * PATCH_SIZE)
                    rows.append(AblationRow(seed, d, m, None, dims, _rank1(g, p, data, mask)))
                else:
                    gm = _trunk_maps(backbone, data.gallery_images, "vis", d)
                    pm = _trunk_maps(backbone, data.probe_images[mask], "thm", d)
                    if m == "global-avg-pool":
                        gm, pm = gm.mean(axis=(1, 2)), pm.mean(axis=(1, 2))
                        dims = N.dims_string(1, 1, c)
                    else:
                        k = min(64, c)
                        fit = np.concatenate(
                            [
                                _trunk_maps(backbone, data.domain_set(tgt).images, tgt, d),
                                _trunk_maps(backbone, data.domain_set(src).images, src, d),
                            ]
                        ).reshape(-1, c)
                        pca = pca_fit(fit, k)
                        gm, pm = pca.project(gm), pca.project(pm)
                        dims = N.dims_string(side, side, k)
                    rows.append(AblationRow(seed, d, m, None, dims, _rank1(gm, pm, data, mask)))
    rows.sort(key=lambda r: (r.seed, r.depth))
    return rows


def ablation_medians(rows: Sequence[AblationRow]) -> dict[tuple[int, str, float | None], float]:
    """Median rank-1 across seeds for every evaluated (depth, method, lambda) cell."""
    cells: dict[tuple[int, str, float | None], list[float]] = {}
    for r in rows:
        if r.rank1 is not None:
            cells.setdefault((r.depth, r.method, r.lam), []).append(r.rank1)
    return {k: float(np.median(v)) for k, v in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0))}


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    lines = ["seed,depth,method,lambda,dims,rank1,status"] + [r.csv() for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
