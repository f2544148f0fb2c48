"""Deterministic synthetic visible/thermal face pairs, manifests and splits.

Faces are procedural 2-D drawings (ellipses and strokes) whose layout comes
from a per-subject latent vector.  The visible render is sharp and carries an
identity-specific high-frequency skin texture; the thermal render shows the
same geometry through a temperature remap, blurred and without texture.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageproc import gaussian_blur, write_image

CONDITIONS = ("baseline", "expression", "pose")
RAW_SIZE = 96
THERMAL_BLUR = 2.0
THERMAL_NOISE = 0.02
MAX_YAW = 60.0

_DOMAIN_CODE = {"vis": 1, "thm": 2}
_CONDITION_CODE = {c: i for i, c in enumerate(CONDITIONS)}

# Region intensities.  The thermal column is a temperature remap: skin warm
# against a cold background, while the dark visible features (eyes, lips)
# become the warmest spots.
_VIS = {"brow": 0.15, "eye": 0.10, "nostril": 0.25, "mouth": 0.30}
_THM = {"bg": 0.08, "skin": 0.70, "brow": 0.50, "eye": 0.95, "nostril": 0.45, "mouth": 0.92}

# Out-of-plane depth (pixels) of each part, used to displace it under yaw.
_DEPTH = {"brow": 7.0, "eye": 5.0, "nose": 14.0, "mouth": 8.0}


@dataclass(frozen=True)
class IdentityLatent:
    face_a: float
    face_b: float
    eye_dx: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    brow_dy: float
    brow_len: float
    brow_th: float
    brow_tilt: float
    nose_dy: float
    nose_w: float
    mouth_dy: float
    mouth_hw: float
    mouth_th: float
    skin: float
    tex: tuple  # ((freq, angle, phase, amp), ...)
    moles: tuple  # ((x, y, r), ...) in face coordinates
    heat: tuple  # ((x, y, r, amp), ...) thermal-only warm spots

    @classmethod
    def sample(cls, seed: int, subject: int) -> "IdentityLatent":
        r = np.random.default_rng([seed, subject, 0])
        u = r.uniform
        tex = tuple(
            (float(u(0.9, 1.5)), float(u(0, math.pi)), float(u(0, 2 * math.pi)), float(u(0.04, 0.08)))
            for _ in range(2)
        )
        moles = tuple((float(u(-20, 20)), float(u(-5, 20)), float(u(1.0, 2.0))) for _ in range(3))
        heat = tuple((float(u(-18, 18)), float(u(-25, 15)), float(u(4, 8)), float(u(0.08, 0.18))) for _ in range(2))
        return cls(
            face_a=u(24.2, 36.8),
            face_b=u(31.8, 46.2),
            eye_dx=u(9.9, 17.1),
            eye_y=u(-16.4, -5.6),
            eye_rx=u(2.0, 6.5),
            eye_ry=u(1.24, 3.76),
            brow_dy=u(3.4, 10.6),
            brow_len=u(6.0, 15.0),
            brow_th=u(0.64, 3.16),
            brow_tilt=u(-0.54, 0.54),
            nose_dy=u(9.2, 21.8),
            nose_w=u(1.9, 9.1),
            mouth_dy=u(5.0, 14.0),
            mouth_hw=u(6.0, 15.0),
            mouth_th=u(0.7, 4.3),
            skin=u(0.5, 0.8),
            tex=tex,
            moles=moles,
            heat=heat,
        )


@dataclass(frozen=True)
class RenderSpec:
    domain: str
    yaw: float = 0.0
    expression: float = 0.0
    noise_seed: tuple = ()

    def __post_init__(self) -> None:
        if self.domain not in _DOMAIN_CODE:
            raise ValueError(f"unknown domain {self.domain!r}")
        if abs(self.yaw) > MAX_YAW:
            raise ValueError(f"yaw {self.yaw} outside [-{MAX_YAW}, {MAX_YAW}]")


@dataclass
class Record:
    path: str
    subject: int
    domain: str
    condition: str
    landmarks: list
    yaw: float = 0.0
    index: int = 0


@dataclass
class Manifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    @property
    def subjects(self) -> list[int]:
        return sorted({r.subject for r in self.records})

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------- rendering


def _soft(sd: np.ndarray, width: float = 0.6) -> np.ndarray:
    """Anti-aliased coverage from a signed distance (negative inside)."""
    return 0.5 * (1.0 - np.tanh(sd / width))


def _ellipse_sd(x, y, cx, cy, rx, ry):
    """Approximate signed distance: level value over its gradient norm.

    Accurate to first order near the outline for any aspect ratio; deep inside
    the radial estimate takes over, where the gradient form vanishes.
    """
    u, v = (x - cx) / rx, (y - cy) / ry
    k = np.sqrt(u * u + v * v)
    grad = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    sd = (k - 1.0) * k / np.maximum(grad, 1e-12)
    return np.where(k < 1.0, np.minimum(sd, (k - 1.0) * min(rx, ry)), sd)


def _segment_sd(x, y, x0, y0, x1, y1, half_th):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - (x0 + t * dx), y - (y0 + t * dy)) - half_th


@dataclass
class _Layout:
    """Face parts in face coordinates (origin at the face centre)."""

    squeeze: float
    parts: dict


def _layout(lat: IdentityLatent, yaw: float, expr: np.ndarray) -> _Layout:
    """Place face parts, applying expression offsets and yaw displacement."""
    s = math.sin(math.radians(yaw))
    c = math.cos(math.radians(yaw))

    def px(x, part):
        return x * c + _DEPTH[part] * s

    brow_raise, mouth_stretch, mouth_open, squint = expr
    eye_ry = lat.eye_ry * (1.0 - 0.3 * squint)
    parts = {}
    for side, sign in (("L", -1.0), ("R", 1.0)):
        ex, ey = sign * lat.eye_dx, lat.eye_y
        parts[f"eye{side}"] = (px(ex, "eye"), ey, lat.eye_rx * c, eye_ry)
        by = ey - lat.brow_dy - brow_raise
        bx0 = ex - lat.brow_len / 2
        bx1 = ex + lat.brow_len / 2
        tilt = sign * lat.brow_tilt * lat.brow_len / 2
        parts[f"brow{side}"] = (px(bx0, "brow"), by + tilt, px(bx1, "brow"), by - tilt, lat.brow_th / 2)
    ny = lat.eye_y + lat.nose_dy
    parts["nose"] = (px(0.0, "nose"), ny, lat.nose_w, 1.6)
    parts["bridge"] = (px(0.0, "nose"), lat.eye_y + 2.0, px(0.0, "nose"), ny - 2.0, 0.7)
    my = ny + lat.mouth_dy + 0.5 * mouth_open
    mhw = lat.mouth_hw * (1.0 + mouth_stretch)
    parts["mouth"] = (px(0.0, "mouth"), my, mhw * c, lat.mouth_th / 2 + mouth_open / 2)
    return _Layout(squeeze=c, parts=parts)


def _landmarks(layout: _Layout) -> np.ndarray:
    p = layout.parts
    mx, my, mhw, _ = p["mouth"]
    return np.array(
        [
            p["eyeL"][:2],
            p["eyeR"][:2],
            p["nose"][:2],
            (mx - mhw, my),
            (mx + mhw, my),
        ]
    )


def _render(lat: IdentityLatent, layout: _Layout, place: np.ndarray, spec: RenderSpec) -> np.ndarray:
    """Draw one image.  ``place`` maps face coordinates to pixels (2 x 3)."""
    n = RAW_SIZE
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    # Pixel -> face coordinates.
    a = place[:, :2]
    ainv = np.linalg.inv(a)
    dx, dy = xs - place[0, 2], ys - place[1, 2]
    fx = ainv[0, 0] * dx + ainv[0, 1] * dy
    fy = ainv[1, 0] * dx + ainv[1, 1] * dy
    thermal = spec.domain == "thm"
    p = layout.parts

    face = _soft(_ellipse_sd(fx, fy, 0.0, 0.0, lat.face_a * layout.squeeze, lat.face_b))
    if not thermal:
        bg = np.random.default_rng(spec.noise_seed + (7,)).uniform(0.25, 0.45)
        skin = np.full_like(fx, lat.skin)
        for freq, ang, ph, amp in lat.tex:
            skin += amp * np.sin(freq * (fx * math.cos(ang) + fy * math.sin(ang)) + ph)
        for mx, my, mr in lat.moles:
            skin -= 0.25 * _soft(_ellipse_sd(fx, fy, mx * layout.squeeze, my, mr, mr), 0.4)
        img = bg * (1 - face) + skin * face
        val = _VIS
    else:
        skin = np.full_like(fx, _THM["skin"])
        for hx, hy, hr, amp in lat.heat:
            skin += amp * np.exp(-0.5 * ((fx - hx * layout.squeeze) ** 2 + (fy - hy) ** 2) / hr**2)
        img = _THM["bg"] * (1 - face) + skin * face
        val = _THM

    def paint(mask, key):
        nonlocal img
        img = img * (1 - mask) + val[key] * mask

    for side in ("L", "R"):
        paint(_soft(_segment_sd(fx, fy, *p[f"brow{side}"])), "brow")
        paint(_soft(_ellipse_sd(fx, fy, *p[f"eye{side}"])), "eye")
    nx, ny, nw, nh = p["nose"]
    for sign in (-1.0, 1.0):
        paint(_soft(_ellipse_sd(fx, fy, nx + sign * nw / 2, ny, nw / 3, nh)), "nostril")
    if not thermal:
        img -= 0.12 * _soft(_segment_sd(fx, fy, *p["bridge"]))
    paint(_soft(_ellipse_sd(fx, fy, *p["mouth"])), "mouth")

    if thermal:
        img = gaussian_blur(img, THERMAL_BLUR)
        noise = np.random.default_rng(spec.noise_seed + (1,)).normal(0.0, THERMAL_NOISE, img.shape)
        img = img + noise
    else:
        r = np.random.default_rng(spec.noise_seed + (3,))
        ang = r.uniform(0, 2 * math.pi)
        amp = r.uniform(0.0, 0.15)
        ramp = ((xs - n / 2) * math.cos(ang) + (ys - n / 2) * math.sin(ang)) / n
        img = img + amp * ramp + r.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def _image_draws(seed: int, subject: int, condition: str, index: int):
    """Pose, expression and placement shared by the vis/thm pair of one shot."""
    r = np.random.default_rng([seed, subject, 1, _CONDITION_CODE[condition], index])
    place_scale = r.uniform(0.93, 1.07) 
    place_rot = math.radians(r.uniform(-8, 8))
    centre = RAW_SIZE / 2 + np.array([r.uniform(-4, 4), 4 + r.uniform(-4, 4)])
    expr = np.zeros(4)
    yaw = 0.0
    if condition == "expression":
        expr = np.array([r.uniform(-1.5, 2.5), r.uniform(-0.15, 0.3), r.uniform(0.0, 3.0), r.uniform(0.0, 1.0)])
    elif condition == "pose":
        yaw = float(r.choice([-1.0, 1.0]) * r.uniform(20.0, MAX_YAW))
    c, s = math.cos(place_rot), math.sin(place_rot)
    place = np.array(
        [[place_scale * c, -place_scale * s, centre[0]], [place_scale * s, place_scale * c, centre[1]]]
    )
    return yaw, expr, place


def render_pair(seed: int, subject: int, condition: str, index: int, domain: str):
    """Return (image, landmarks, yaw) for one shot of one subject."""
    lat = IdentityLatent.sample(seed, subject)
    yaw, expr, place = _image_draws(seed, subject, condition, index)
    layout = _layout(lat, yaw, expr)
    spec = RenderSpec(
        domain, yaw, float(np.abs(expr).sum()), (seed, subject, _DOMAIN_CODE[domain], _CONDITION_CODE[condition], index)
    )
    img = _render(lat, layout, place, spec)
    lm = _landmarks(layout) @ place[:, :2].T + place[:, 2]
    return img, lm, yaw


# ---------------------------------------------------------------- dataset


def generate(
    n_subjects: int,
    images_per_subject_per_domain: int,
    conditions: Sequence[str],
    out_dir: str | Path,
    seed: int,
) -> Manifest:
    """Render every (subject, condition, index, domain) and write a manifest.

    ``images_per_subject_per_domain`` counts images per condition.
    """
    if n_subjects < 2:
        raise ValueError(f"need at least 2 subjects, got {n_subjects}")
    if images_per_subject_per_domain < 1:
        raise ValueError("need at least one image per subject and domain")
    for c in conditions:
        if c not in _CONDITION_CODE:
            raise ValueError(f"unknown condition {c!r}; expected one of {CONDITIONS}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    records = []
    for subject in range(n_subjects):
        for cond in conditions:
            for idx in range(images_per_subject_per_domain):
                for domain in ("vis", "thm"):
                    img, lm, yaw = render_pair(seed, subject, cond, idx, domain)
                    rel = f"images/s{subject:03d}_{cond}_{idx:02d}_{domain}.pgm"
                    write_image(out / rel, img)
                    records.append(
                        Record(rel, subject, domain, cond, np.round(lm, 4).tolist(), round(yaw, 4), idx)
                    )
    manifest = Manifest(records, out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    """Parse and validate a JSON-lines manifest; errors name the line."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for key in ("path", "subject", "domain", "condition", "landmarks"):
                if key not in obj:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            lm = obj["landmarks"]
            if (
                not isinstance(lm, list)
                or len(lm) != 5
                or not all(isinstance(p, list) and len(p) == 2 for p in lm)
            ):
                raise ValueError(f"{path}:{lineno}: landmarks must be 5 [x, y] pairs")
            try:
                lm = [[float(a), float(b)] for a, b in lm]
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: non-numeric landmark coordinate") from None
            if obj["domain"] not in _DOMAIN_CODE:
                raise ValueError(f"{path}:{lineno}: unknown domain {obj['domain']!r}")
            if obj["condition"] not in _CONDITION_CODE:
                raise ValueError(f"{path}:{lineno}: unknown condition {obj['condition']!r}")
            if not isinstance(obj["subject"], int) or obj["subject"] < 0:
                raise ValueError(f"{path}:{lineno}: subject must be a non-negative integer")
            rec = Record(
                str(obj["path"]),
                obj["subject"],
                obj["domain"],
                obj["condition"],
                lm,
                float(obj.get("yaw", 0.0)),
                int(obj.get("index", 0)),
            )
            if check_paths:
                p = Path(rec.path)
                if not (p if p.is_absolute() else root / p).exists():
                    raise ValueError(f"{path}:{lineno}: image not found: {rec.path}")
            records.append(rec)
    subjects = sorted({r.subject for r in records})
    if subjects != list(range(len(subjects))):
        raise ValueError(f"{path}: subject ids must be contiguous from 0, got {subjects[:5]}...")
    return Manifest(records, root)


@dataclass
class Split:
    train: list[Record]
    gallery: list[Record]
    probes: list[Record]
    train_subjects: list[int]
    gallery_subjects: list[int]


def split(
    manifest: Manifest,
    n_train_subjects: int,
    n_gallery_subjects: int,
    gallery_templates_per_subject: int = 4,
    seed: int = 0,
) -> Split:
    """Disjoint train / gallery subjects; gallery = baseline visible images,
    probes = every thermal image of a gallery subject."""
    subjects = manifest.subjects
    if n_train_subjects + n_gallery_subjects > len(subjects):
        raise ValueError(
            f"requested {n_train_subjects} train + {n_gallery_subjects} gallery subjects, "
            f"manifest has {len(subjects)}"
        )
    order = np.random.default_rng([seed, 91]).permutation(len(subjects))
    train_s = sorted(subjects[i] for i in order[:n_train_subjects])
    gallery_s = sorted(subjects[i] for i in order[n_train_subjects : n_train_subjects + n_gallery_subjects])
    by_subject: dict[int, list[Record]] = {}
    for r in manifest.records:
        by_subject.setdefault(r.subject, []).append(r)
    train = [r for s in train_s for r in by_subject[s]]
    gallery, probes = [], []
    for s in gallery_s:
        vis = sorted(
            (r for r in by_subject[s] if r.domain == "vis" and r.condition == "baseline"), key=lambda r: r.index
        )
        thm = [r for r in by_subject[s] if r.domain == "thm"]
        if len(vis) < gallery_templates_per_subject or not thm:
            raise ValueError(
                f"subject {s}: {len(vis)} baseline visible images (need {gallery_templates_per_subject}) "
                f"and {len(thm)} thermal probes (need 1)"
            )
        gallery.extend(vis[:gallery_templates_per_subject])
        probes.extend(thm)
    return Split(train, gallery, probes, train_s, gallery_s)
