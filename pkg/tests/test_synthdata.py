import json

import numpy as np
import pytest

from xdomid import synthdata as S
from xdomid.imageproc import read_image


def records(n_subjects, n_vis=4, n_thm=2):
    out = []
    for s in range(n_subjects):
        for i in range(n_vis):
            out.append(S.Record(f"v{s}_{i}.pgm", s, "vis", "baseline", [[0, 0]] * 5, 0.0, i))
        for i in range(n_thm):
            out.append(S.Record(f"t{s}_{i}.pgm", s, "thm", "baseline", [[0, 0]] * 5, 0.0, i))
    return S.Manifest(out)


# ---------------------------------------------------------------- generate


def test_generate_counts(tmp_path):
    m = S.generate(2, 1, ["baseline"], tmp_path, seed=1)
    assert len(m) == 4
    assert len(list((tmp_path / "images").glob("*.pgm"))) == 4
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 4


def test_generate_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    S.generate(3, 1, ["baseline", "pose"], a, seed=4)
    S.generate(3, 1, ["baseline", "pose"], b, seed=4)
    names = sorted(p.name for p in (a / "images").iterdir())
    assert names == sorted(p.name for p in (b / "images").iterdir())
    for n in names:
        assert (a / "images" / n).read_bytes() == (b / "images" / n).read_bytes()
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()


def test_generation_is_order_independent():
    late, _, _ = S.render_pair(3, 5, "expression", 1, "thm")
    S.render_pair(3, 0, "baseline", 0, "vis")
    again, _, _ = S.render_pair(3, 5, "expression", 1, "thm")
    assert late.tobytes() == again.tobytes()


def test_generate_rejections(tmp_path):
    with pytest.raises(ValueError, match="at least 2"):
        S.generate(1, 1, ["baseline"], tmp_path, 0)
    with pytest.raises(ValueError, match="unknown condition"):
        S.generate(2, 1, ["sideways"], tmp_path, 0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot create"):
        S.generate(2, 1, ["baseline"], blocker / "sub", 0)


def test_render_spec_checks():
    with pytest.raises(ValueError, match="yaw"):
        S.RenderSpec("vis", yaw=61.0)
    with pytest.raises(ValueError, match="domain"):
        S.RenderSpec("ir")


def test_domain_gap_exceeds_within_domain_variation():
    cross, within = [], []
    for s in range(20):
        v0, _, _ = S.render_pair(0, s, "baseline", 0, "vis")
        v1, _, _ = S.render_pair(0, s, "baseline", 1, "vis")
        t0, _, _ = S.render_pair(0, s, "baseline", 0, "thm")
        cross.append(np.mean(np.abs(v0 - t0)))
        within.append(np.mean(np.abs(v0 - v1)))
    assert np.mean(cross) > np.mean(within)


def test_thermal_has_less_high_frequency_energy():
    def hf(img):
        return np.mean(np.abs(np.diff(img, axis=0))) + np.mean(np.abs(np.diff(img, axis=1)))

    v, _, _ = S.render_pair(2, 1, "baseline", 0, "vis")
    t, _, _ = S.render_pair(2, 1, "baseline", 0, "thm")
    assert hf(t) < hf(v)


def _part_mask(monkeypatch, seed, subject, condition, index, key):
    """Coverage of one painted part, isolated by re-rendering with its tone changed."""
    base, lm, _ = S.render_pair(seed, subject, condition, index, "vis")
    monkeypatch.setitem(S._VIS, key, S._VIS[key] + 0.5)
    moved, _, _ = S.render_pair(seed, subject, condition, index, "vis")
    monkeypatch.setitem(S._VIS, key, S._VIS[key] - 0.5)
    return (moved - base) / 0.5, lm


def _centroid(mask, near, radius=12):
    ys, xs = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    w = mask * (np.hypot(xs - near[0], ys - near[1]) < radius)
    return np.array([np.sum(w * xs), np.sum(w * ys)]) / np.sum(w)


@pytest.mark.parametrize("condition,index", [("baseline", 0), ("expression", 1), ("pose", 0), ("pose", 2)])
@pytest.mark.parametrize("subject", [0, 7])
def test_landmarks_within_one_pixel(monkeypatch, condition, index, subject):
    eyes, lm = _part_mask(monkeypatch, 11, subject, condition, index, "eye")
    for k in (0, 1):
        assert np.hypot(*(_centroid(eyes, lm[k], 8) - lm[k])) <= 1.0
    nostrils, _ = _part_mask(monkeypatch, 11, subject, condition, index, "nostril")
    assert np.hypot(*(_centroid(nostrils, lm[2], 10) - lm[2])) <= 1.0
    mouth, _ = _part_mask(monkeypatch, 11, subject, condition, index, "mouth")
    assert np.hypot(*(_centroid(mouth, (lm[3] + lm[4]) / 2, 30) - (lm[3] + lm[4]) / 2)) <= 1.0
    # the visibly painted mouth ends at the corners
    ys, xs = np.nonzero(mouth > 0.25)
    mid = (lm[3] + lm[4]) / 2
    axis = (lm[4] - lm[3]) / np.linalg.norm(lm[4] - lm[3])
    proj = (np.stack([xs, ys], 1) - mid) @ axis
    half = np.linalg.norm(lm[4] - lm[3]) / 2
    assert abs(proj.max() - half) <= 1.0 and abs(-proj.min() - half) <= 1.0


def test_condition_tags(tmp_path):
    m = S.generate(3, 2, ["baseline", "expression", "pose"], tmp_path, seed=2)
    tags = {c: [r for r in m.records if r.condition == c] for c in S.CONDITIONS}
    assert sum(len(v) for v in tags.values()) == len(m)
    assert all(r.yaw == 0.0 for r in tags["baseline"] + tags["expression"])
    assert all(0 < abs(r.yaw) <= S.MAX_YAW for r in tags["pose"])
    for s in range(3):
        for i in range(2):
            yaw, expr, _ = S._image_draws(2, s, "baseline", i)
            assert yaw == 0.0 and not expr.any()
    # paired shots share geometry
    for r in m.records:
        if r.domain == "vis":
            twin = next(q for q in m.records if q.domain == "thm" and (q.subject, q.condition, q.index) == (r.subject, r.condition, r.index))
            assert twin.landmarks == r.landmarks and twin.yaw == r.yaw


# ---------------------------------------------------------------- manifests


def test_generated_manifest_loads_cleanly(tmp_path):
    S.generate(2, 1, ["baseline", "pose"], tmp_path, seed=3)
    m = S.load_manifest(tmp_path / "manifest.jsonl")
    assert len(m) == 8 and m.subjects == [0, 1]
    img = read_image(m.resolve(m.records[0]))
    assert img.shape == (S.RAW_SIZE, S.RAW_SIZE)


def test_manifest_round_trip_fixture(tmp_path):
    rows = [
        {"path": "a.pgm", "subject": 0, "domain": "vis", "condition": "baseline",
         "landmarks": [[1.5, 2.0], [3, 4], [5, 6], [7, 8], [9, 10.25]]},
        {"path": "b.pgm", "subject": 1, "domain": "thm", "condition": "pose", "yaw": -30.0, "index": 2,
         "landmarks": [[0, 0], [1, 1], [2, 2], [3, 3], [4, 4]]},
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    for r in rows:
        (tmp_path / r["path"]).write_bytes(b"")
    m = S.load_manifest(tmp_path / "m.jsonl")
    a, b = m.records
    assert (a.path, a.subject, a.domain, a.condition) == ("a.pgm", 0, "vis", "baseline")
    assert a.landmarks == [[1.5, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.25]]
    assert (b.yaw, b.index, b.condition) == (-30.0, 2, "pose")
    assert m.resolve(a) == tmp_path / "a.pgm"


def _write(tmp_path, rows):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(rows) + "\n")
    (tmp_path / "a.pgm").write_bytes(b"")
    return p


GOOD = '{"path": "a.pgm", "subject": 0, "domain": "vis", "condition": "baseline", "landmarks": [[0,0],[1,1],[2,2],[3,3],[4,4]]}'


@pytest.mark.parametrize(
    "bad,match",
    [
        (GOOD.replace("[4,4]]", "]").replace(",]", "]"), "landmarks must be 5"),
        (GOOD.replace('"domain": "vis", ', ""), "missing field 'domain'"),
        (GOOD.replace("a.pgm", "gone.pgm"), "image not found"),
        (GOOD.replace('"vis"', '"uv"'), "unknown domain"),
        (GOOD.replace('"baseline"', '"tilted"'), "unknown condition"),
        (GOOD.replace("[0,0]", '["x",0]'), "non-numeric"),
        ("{not json", "invalid JSON"),
    ],
)
def test_manifest_errors_name_the_line(tmp_path, bad, match):
    p = _write(tmp_path, [GOOD, bad])
    with pytest.raises(ValueError, match=f":2: {match}"):
        S.load_manifest(p)


def test_manifest_subjects_must_be_contiguous(tmp_path):
    p = _write(tmp_path, [GOOD, GOOD.replace('"subject": 0', '"subject": 2')])
    with pytest.raises(ValueError, match="contiguous"):
        S.load_manifest(p)


# ---------------------------------------------------------------- split


def test_split_sixty_subjects():
    sp = S.split(records(60), 30, 30, 4, seed=0)
    assert set(sp.train_subjects).isdisjoint(sp.gallery_subjects)
    assert len(sp.gallery) == 120
    assert all(r.domain == "vis" and r.condition == "baseline" for r in sp.gallery)
    assert len(sp.probes) == 60 and all(r.domain == "thm" for r in sp.probes)
    assert {r.subject for r in sp.probes} == set(sp.gallery_subjects)
    assert {r.subject for r in sp.train} == set(sp.train_subjects)


def test_split_exhaustive_partition():
    sp = S.split(records(10), 4, 6, 2)
    assert sorted(sp.train_subjects + sp.gallery_subjects) == list(range(10))


def test_split_seed_behaviour():
    m = records(12)
    a = S.split(m, 6, 6, 2, seed=1)
    assert a.train_subjects == S.split(m, 6, 6, 2, seed=1).train_subjects
    assert any(S.split(m, 6, 6, 2, seed=s).train_subjects != a.train_subjects for s in range(2, 6))


def test_split_rejections():
    with pytest.raises(ValueError, match="manifest has 4"):
        S.split(records(4), 3, 2)
    with pytest.raises(ValueError, match="2 baseline visible images \\(need 4\\)"):
        S.split(records(4, n_vis=2), 2, 2, 4)
    with pytest.raises(ValueError, match="0 thermal probes"):
        S.split(records(4, n_thm=0), 2, 2, 2)
