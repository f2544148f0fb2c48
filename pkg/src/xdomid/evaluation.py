"""Gallery enrollment, cosine matching and cumulative match characteristics."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import networks as N
from . import tensor as T
from .networks import ModelBundle

METHODS = ("proposed", "dpm", "none")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("XDOMID_THREADS", "1")))
    except ValueError:
        return 1


def _chunked_forward(fn, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Apply ``fn`` to fixed chunks; results are stitched in index order."""
    starts = list(range(0, len(images), chunk))

    def run(i):
        with T.no_grad():
            return fn(images[i : i + chunk]).data

    workers = worker_count()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(i) for i in starts]
    return np.concatenate(parts)


def representation(bundle: ModelBundle, images: np.ndarray, side: str, method: str = "proposed") -> np.ndarray:
    """Feature maps for gallery (visible) or probe (thermal) images.

    ``proposed`` applies the RST on the source side of the bundle direction,
    ``dpm`` applies the DPM there instead, ``none`` applies no mapping.
    """
    if side not in ("gallery", "probe"):
        raise ValueError(f"side must be 'gallery' or 'probe', got {side!r}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    domain = "vis" if side == "gallery" else "thm"
    mapped_side = domain == bundle.source_domain

    def fn(x):
        f = bundle.features(x, domain)
        if not mapped_side or method == "none":
            return f
        if method == "dpm":
            if not bundle.dpm:
                raise ValueError("bundle has no trained DPM")
            return N.dpm_forward(f, bundle.dpm)
        return N.rst_forward(f, bundle.rst)

    return _chunked_forward(fn, images)


def templates(features: np.ndarray) -> np.ndarray:
    """Flatten each map and scale it to unit length."""
    flat = features.reshape(len(features), -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.where(norms > 0, norms, 1.0)


@dataclass
class Gallery:
    entries: dict[int, list[np.ndarray]] = field(default_factory=dict)
    representation: str = ""

    def add(self, subject: int, template: np.ndarray) -> None:
        t = np.asarray(template, dtype=np.float64)
        for existing in self.entries.values():
            if existing and existing[0].shape != t.shape:
                raise ValueError(f"template length {t.shape} differs from gallery {existing[0].shape}")
        self.entries.setdefault(int(subject), []).append(t)

    @property
    def subjects(self) -> list[int]:
        return sorted(self.entries)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        subs, rows = [], []
        for s in self.subjects:
            for t in self.entries[s]:
                subs.append(s)
                rows.append(t)
        return np.array(subs), np.stack(rows)


def build_gallery(template_rows: np.ndarray, subjects: Sequence[int], representation: str = "") -> Gallery:
    g = Gallery(representation=representation)
    for s, t in zip(subjects, template_rows):
        g.add(s, t)
    return g


def enroll(
    images: np.ndarray,
    subjects: Sequence[int],
    bundle: ModelBundle,
    direction: str | None = None,
    method: str = "proposed",
) -> Gallery:
    """Enroll preprocessed visible images.

    In ``v_to_t`` the RST maps gallery features into thermal space now; in
    ``t_to_v`` templates are plain visible features and probes get mapped.
    """
    direction = direction or bundle.direction
    if direction not in N.DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if direction != bundle.direction:
        raise ValueError(f"bundle was trained for {bundle.direction}, not {direction}")
    feats = representation(bundle, images, "gallery", method)
    return build_gallery(templates(feats), subjects, f"{direction}/{method}")


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    s = (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T
    return np.clip(s, -1.0, 1.0)


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # probes x subjects
    subjects: np.ndarray  # gallery subject ids, ascending
    probe_labels: np.ndarray


def score_vectors(probe_vectors: np.ndarray, gallery: Gallery) -> np.ndarray:
    """Per-subject score = max cosine over that subject's templates."""
    if not gallery.entries:
        raise ValueError("cannot score against an empty gallery")
    subs, rows = gallery.stacked()
    sims = cosine(probe_vectors, rows)
    order = gallery.subjects
    out = np.empty((sims.shape[0], len(order)))
    for j, s in enumerate(order):
        out[:, j] = sims[:, subs == s].max(axis=1)
    return out


def score(probe_images: np.ndarray, gallery: Gallery, bundle: ModelBundle, method: str = "proposed") -> np.ndarray:
    feats = representation(bundle, probe_images, "probe", method)
    return score_vectors(templates(feats), gallery)


def score_matrix(probe_vectors: np.ndarray, probe_labels: Sequence[int], gallery: Gallery) -> ScoreMatrix:
    return ScoreMatrix(score_vectors(probe_vectors, gallery), np.array(gallery.subjects), np.asarray(probe_labels))


@dataclass
class CMCResult:
    rates: np.ndarray  # rates[k-1] = rank-k identification rate
    probe_count: int
    true_ranks: np.ndarray

    @property
    def rank1(self) -> float:
        return float(self.rates[0])

    def rate(self, k: int) -> float:
        return float(self.rates[min(k, len(self.rates)) - 1])


def true_ranks(sm: ScoreMatrix) -> np.ndarray:
    """1-based rank of each probe's true subject; ties favour lower subject ids."""
    subjects = list(sm.subjects)
    col = {s: j for j, s in enumerate(subjects)}
    ranks = np.empty(len(sm.probe_labels), dtype=int)
    for i, lab in enumerate(sm.probe_labels):
        if int(lab) not in col:
            raise ValueError(f"probe {i} has label {lab} which is not enrolled in the gallery")
        j = col[int(lab)]
        row = sm.scores[i]
        s = row[j]
        ranks[i] = 1 + int(np.sum(row > s)) + int(np.sum(row[:j] == s))
    return ranks


def cmc(sm: ScoreMatrix) -> CMCResult:
    ranks = true_ranks(sm)
    n_sub = len(sm.subjects)
    counts = np.bincount(ranks, minlength=n_sub + 1)[1:]
    rates = np.cumsum(counts) / len(ranks)
    return CMCResult(rates, len(ranks), ranks)


def write_cmc_csv(result: CMCResult, path: str | Path) -> None:
    lines = ["rank,id_rate"] + [f"{k},{r:.6f}" for k, r in enumerate(result.rates, 1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cmc_csv(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0].strip() != "rank,id_rate":
        raise ValueError(f"{path}: expected header 'rank,id_rate'")
    rates = []
    for n, line in enumerate(lines[1:], 2):
        try:
            k, r = line.split(",")
            if int(k) != len(rates) + 1:
                raise ValueError
            rates.append(float(r))
        except ValueError:
            raise ValueError(f"{path}:{n}: malformed row {line!r}") from None
    return np.array(rates)


def cmc_svg(curves: dict[str, np.ndarray], width: int = 480, height: int = 320) -> str:
    """A plain SVG line chart of one or more CMC curves."""
    pad = 40
    kmax = max(len(r) for r in curves.values())
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def xy(k, r):
        x = pad + (k - 1) / max(kmax - 1, 1) * (width - 2 * pad)
        y = height - pad - r * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">rank</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">identification rate</text>',
    ]
    for i, (name, rates) in enumerate(sorted(curves.items())):
        c = colours[i % len(colours)]
        pts = " ".join(xy(k, r) for k, r in enumerate(rates, 1))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 14 * i + 10}" font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
