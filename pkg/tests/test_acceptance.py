"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict (printed in the terminal
summary) before asserting, so a failing criterion still reports its numbers.
The protocol runs are shared: five seeded 60-subject datasets feed the
ordering, scenario, CMC and pose criteria.
"""

import time

import numpy as np
import pytest

from xdomid import cli
from xdomid import evaluation as E
from xdomid import losses as L
from xdomid import networks as N
from xdomid import protocol as P
from xdomid import synthdata as S
from xdomid import tensor as T
from xdomid.tensor import Tensor

from conftest import check_grads, record_criterion

SEEDS = (0, 1, 2, 3, 4)
FRONTAL = ("baseline", "expression")
CFG = P.ProtocolConfig()  # 30 train / 30 gallery, 4 templates, crop 64, depth 3


# ---------------------------------------------------------------- shared runs


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("protocol")
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        m = S.generate(60, 4, S.CONDITIONS, root / f"seed{seed}", seed)
        out[seed] = (m, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def score_log():
    """Every CMC computed during the protocol runs, with its score matrix."""
    log = []
    real = E.cmc
    mp = pytest.MonkeyPatch()

    def recording(sm):
        r = real(sm)
        log.append((sm, r))
        return r

    mp.setattr(E, "cmc", recording)
    yield log
    mp.undo()


def run_direction(manifest, seed, direction, with_dpm):
    data = P.prepare(manifest, CFG, seed)
    pre, _ = P.pretrain(data, CFG, direction, seed)
    models = {"none": (pre, "none")}
    for lam in (0.0, 0.25):
        models[f"proposed({lam:g})"] = (P.adapt(pre, data, CFG, lam, seed)[0], "proposed")
    if with_dpm:
        models["dpm"] = (P.fit_dpm(pre, data, CFG, seed)[0], "dpm")
    out = {}
    for name, (bundle, method) in models.items():
        out[name] = {
            "frontal": P.evaluate(bundle, data, method, FRONTAL).rank1,
            "pose": P.evaluate(bundle, data, method, ("pose",)).rank1,
        }
    return out


@pytest.fixture(scope="module")
def v_to_t_runs(datasets, score_log):
    runs, elapsed = {}, 0.0
    for seed in SEEDS:
        manifest, gen_time = datasets[seed]
        t0 = time.perf_counter()
        runs[seed] = run_direction(manifest, seed, "v_to_t", with_dpm=True)
        elapsed += gen_time + time.perf_counter() - t0
    return runs, elapsed


@pytest.fixture(scope="module")
def t_to_v_runs(datasets, score_log):
    return {seed: run_direction(datasets[seed][0], seed, "t_to_v", with_dpm=False) for seed in SEEDS}


def medians(runs, key="frontal"):
    names = next(iter(runs.values())).keys()
    return {n: float(np.median([runs[s][n][key] for s in runs])) for n in names}


def fmt(d):
    return " ".join(f"{k}={v:.3f}" for k, v in d.items())


# ---------------------------------------------------------------- 1


def _proj(out, rng):
    return T.sum(T.mul(out, Tensor(rng.normal(size=out.shape))))


def _params(params):
    return [p.tensor for p in params.values()]


def _grad_cases():
    """(name, builder) pairs; a builder takes an rng and returns (loss_fn, tensors)."""

    def conv(r):
        h, cin, cout = r.integers(3, 7), r.integers(1, 4), r.integers(1, 4)
        k = r.choice([1, 3])
        x = Tensor(r.normal(size=(r.integers(1, 3), h, h + 1, cin)))
        w = Tensor(r.normal(size=(k, k, cin, cout)))
        stride, pad = int(r.choice([1, 2])), str(r.choice(["same", "valid"]))
        s = int(r.integers(1 << 30))
        return (lambda: _proj(T.conv2d(x, w, stride, pad), np.random.default_rng(s))), [x, w]

    def unary(fn, positive=False):
        def build(r):
            x = Tensor(np.abs(r.normal(size=(3, 4))) + 0.2 if positive else r.normal(size=(3, 4)))
            s = int(r.integers(1 << 30))
            return (lambda: _proj(fn(x), np.random.default_rng(s))), [x]

        return build

    def dense(r):
        n, m = r.integers(1, 6), r.integers(1, 6)
        x, w, b = Tensor(r.normal(size=(2, n))), Tensor(r.normal(size=(n, m))), Tensor(r.normal(size=m))
        s = int(r.integers(1 << 30))
        return (lambda: _proj(T.dense(x, w, b), np.random.default_rng(s))), [x, w, b]

    def pooled(fn):
        def build(r):
            x = Tensor(r.normal(size=(1, 4, 6, int(r.integers(1, 4)))))
            s = int(r.integers(1 << 30))
            return (lambda: _proj(fn(x), np.random.default_rng(s))), [x]

        return build

    def net(init, forward, cin_of=lambda c: c):
        def build(r):
            c = int(r.integers(2, 5))
            params = init(c, r)
            u = Tensor(r.normal(size=(1, 3, 3, cin_of(c))))
            s = int(r.integers(1 << 30))
            return (lambda: _proj(forward(u, params), np.random.default_rng(s))), _params(params) + [u]

        return build

    def trunk(r):
        cfg = N.TrunkConfig((2, 3), 1, 4)
        params = N.init_trunk("t", cfg, r)
        x = Tensor(r.normal(size=(1, 4, 4, 1)))
        s = int(r.integers(1 << 30))
        return (lambda: _proj(N.trunk_forward(x, params, 1), np.random.default_rng(s))), _params(params) + [x]

    def probs(r, k, n=2):
        return Tensor(r.normal(size=(n, k)))

    def onehot(r, k, n=2):
        return Tensor(np.eye(k)[r.integers(0, k, n)])

    def ce(r):
        k = int(r.integers(2, 6))
        z, y = probs(r, k), onehot(r, k)
        return (lambda: L.cross_entropy(T.softmax(z), y)), [z]

    def xid(r):
        k = int(r.integers(2, 6))
        a, b, y = probs(r, k), probs(r, k), onehot(r, k)
        return (lambda: L.cross_domain_id_loss(T.softmax(a), T.softmax(b), y)), [a, b]

    def ld(r):
        a, b = probs(r, 2), probs(r, 2)
        alpha = r.dirichlet([1, 1])
        return (lambda: L.domain_invariance_loss(T.softmax(a), T.softmax(b), alpha)), [a, b]

    def total(r):
        k = int(r.integers(2, 5))
        a, b, y, d1, d2 = probs(r, k), probs(r, k), onehot(r, k), probs(r, 2), probs(r, 2)
        lam = float(r.uniform())
        return (
            lambda: L.total_loss(
                L.cross_domain_id_loss(T.softmax(a), T.softmax(b), y),
                L.domain_invariance_loss(T.softmax(d1), T.softmax(d2)),
                lam,
            )
        ), [a, b, d1, d2]

    def sq(fn):
        def build(r):
            a, b = Tensor(r.normal(size=(2, 3, 3, 2))), Tensor(r.normal(size=(2, 3, 3, 2)))
            return (lambda: fn(a, b)), [a, b]

        return build

    return [
        ("conv2d", conv),
        ("dense", dense),
        ("tanh", unary(T.tanh)),
        ("relu", unary(T.relu)),
        ("softmax", unary(T.softmax)),
        ("log", unary(T.log, positive=True)),
        ("global_avg_pool", pooled(T.global_avg_pool)),
        ("max_pool2d", pooled(T.max_pool2d)),
        ("trunk_forward", trunk),
        ("compress", net(lambda c, r: N.init_compression("c", c, r), N.compress)),
        ("rst_forward", net(lambda c, r: N.init_rst("r", c, r, hidden=4), N.rst_forward)),
        ("classify_identity", net(lambda c, r: N.init_head("h", 9 * c, 3, r), N.classify_identity)),
        ("domain_detect", net(lambda c, r: N.init_detector("d", c, r, hidden=3), N.domain_detect)),
        ("dpm_forward", net(lambda c, r: N.init_dpm("p", c, r), N.dpm_forward)),
        ("cross_entropy", ce),
        ("cross_domain_id_loss", xid),
        ("domain_invariance_loss", ld),
        ("total_loss", total),
        ("dpm_loss", sq(L.dpm_loss)),
        ("cpnn_loss", sq(L.cpnn_loss)),
    ]


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, build in _grad_cases():
        errs = []
        for cfg_seed in range(20):
            loss_fn, tensors = build(np.random.default_rng([cfg_seed, len(name)]))
            if name == "rst_forward":
                # exercise the residual branch, not just the zero-initialized identity
                for t in tensors[:-1]:
                    t.data[...] = np.random.default_rng(cfg_seed).normal(scale=0.5, size=t.shape)
            errs.append(check_grads(loss_fn, tensors, eps=1e-5))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    ok = not bad and elapsed < 60
    record_criterion(
        1, ok, f"{len(worst)} ops x 20 configs, max rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
        + (f", failing {bad}" if bad else "")
    )
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_loss_identities():
    u4 = np.full(4, 0.25)
    y = np.eye(4)[1]
    checks = {
        "CE(uniform)": abs(L.cross_entropy(u4, y).item() - np.log(4)) <= 1e-9,
        "L_xID(uniform)": abs(L.cross_domain_id_loss(u4, u4, y).item() - 2 * np.log(4)) <= 1e-9,
        "L_D(uniform)": abs(L.domain_invariance_loss([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]).item() - 2 * np.log(2))
        <= 1e-9,
    }
    rng = np.random.default_rng(0)
    xid_ok, total_ok = True, True
    for _ in range(100):
        k = int(rng.integers(2, 10))
        a, b = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        yy = np.eye(k)[rng.integers(k)]
        xid = L.cross_domain_id_loss(a, b, yy).item()
        xid_ok &= abs(xid - (L.cross_entropy(a, yy).item() + L.cross_entropy(b, yy).item())) <= 1e-12
        ld = L.domain_invariance_loss(rng.dirichlet([1, 1]), rng.dirichlet([1, 1])).item()
        total_ok &= abs(L.total_loss(Tensor(xid), Tensor(ld), 0.25).item() - (0.75 * xid + 0.25 * ld)) <= 1e-12
    checks["L_xID = CE + CE (100 inputs)"] = xid_ok
    checks["L_total affine (100 inputs)"] = total_ok
    ok = all(checks.values())
    record_criterion(2, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_rst_identity_at_init():
    rng = np.random.default_rng(3)
    same = 0
    for i in range(50):
        c = int(rng.integers(1, 9))
        params = N.init_rst("rst", c, np.random.default_rng(i), hidden=int(rng.integers(1, 20)))
        u = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 9)), c))
        same += N.rst_forward(u, params).data.tobytes() == u.tobytes()
    ok = same == 50
    record_criterion(3, ok, f"RST(u) == u bitwise on {same}/50 maps")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04_dims_string():
    s = N.TrunkConfig((64, 128, 256, 512), 3, 200).feature_dims()
    ok = s.replace("256", "C") == "25×25×C"
    record_criterion(4, ok, f"crop 200, depth 3 -> {s!r}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_end_to_end_ordering(v_to_t_runs):
    runs, elapsed = v_to_t_runs
    med = medians(runs)
    p25, p0, dpm, none = med["proposed(0.25)"], med["proposed(0)"], med["dpm"], med["none"]
    parts = {
        "p(0.25)>=p(0)": p25 >= p0,
        "p(0.25)>=dpm": p25 >= dpm,
        "trained>=none": min(p25, p0, dpm) >= none,
        "p(0.25)-none>=10pp": p25 - none >= 0.10,
        "runtime<15min": elapsed < 900,
    }
    ok = all(parts.values())
    failed = [k for k, v in parts.items() if not v]
    per_seed = " ".join(f"{runs[s]['proposed(0.25)']['frontal']:.3f}" for s in SEEDS)
    record_criterion(
        5, ok, f"median rank-1 (frontal, 5 seeds) {fmt(med)}; p(0.25) per seed {per_seed}; {elapsed / 60:.1f} min"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    assert ok, failed


# ---------------------------------------------------------------- 6


def test_criterion_06_ablation_depth(datasets):
    rows = []
    for seed in SEEDS[:3]:
        rows += P.ablate(
            datasets[seed][0], CFG, depths=(1, 2, 3, 4), methods=("pca-64", "global-avg-pool", "patch-baseline"),
            seeds=(seed,), conditions=FRONTAL,
        )
    med = P.ablation_medians(rows)
    pca = {d: med[(d, "pca-64", None)] for d in (1, 2, 3, 4)}
    best = max(pca, key=pca.get)
    ok = best in (2, 3)
    others = " ".join(
        f"{m}=[{', '.join(f'{med[(d, m, None)]:.3f}' for d in (1, 2, 3, 4))}]" for m in ("global-avg-pool", "patch-baseline")
    )
    record_criterion(
        6, ok, f"pca-64 median rank-1 by depth 1..4 = [{', '.join(f'{v:.3f}' for v in pca.values())}], "
        f"argmax depth {best}; {others}"
    )
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_scenario_duality(v_to_t_runs, t_to_v_runs):
    v = medians(v_to_t_runs[0])
    t = medians(t_to_v_runs)
    ok = v["proposed(0.25)"] >= v["proposed(0)"] and t["proposed(0.25)"] >= t["proposed(0)"]
    def deltas(runs):
        return " ".join(f"{runs[s]['proposed(0.25)']['frontal'] - runs[s]['proposed(0)']['frontal']:+.3f}" for s in SEEDS)

    record_criterion(
        7, ok, f"v_to_t p(0.25)={v['proposed(0.25)']:.3f} p(0)={v['proposed(0)']:.3f} (per-seed diff {deltas(v_to_t_runs[0])}); "
        f"t_to_v p(0.25)={t['proposed(0.25)']:.3f} p(0)={t['proposed(0)']:.3f} (per-seed diff {deltas(t_to_v_runs)})"
    )
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_cmc_contract(v_to_t_runs, t_to_v_runs, score_log):
    bad = 0
    for sm, r in score_log:
        monotone = np.all(np.diff(r.rates) >= 0)
        complete = len(r.rates) == len(sm.subjects) and r.rates[-1] == 1.0
        bounded = np.all(sm.scores >= -1.0) and np.all(sm.scores <= 1.0)
        bad += not (monotone and complete and bounded)
    ok = bad == 0 and len(score_log) > 0
    record_criterion(8, ok, f"{len(score_log) - bad}/{len(score_log)} evaluations satisfy the CMC/score contract")
    assert ok


# ---------------------------------------------------------------- 9


def _cli_chain(root):
    steps = [
        ["synth-data", "--subjects", "12", "--images-per-domain", "2", "--seed", "4", "--out", f"{root}/raw"],
        ["preprocess", "--manifest", f"{root}/raw/manifest.jsonl", "--n-train", "6", "--n-gallery", "6",
         "--templates", "2", "--seed", "4", "--out", f"{root}/data"],
        ["pretrain", "--data", f"{root}/data", "--pretrain-epochs", "2", "--seed", "4", "--out", f"{root}/pre"],
        ["train", "--data", f"{root}/data", "--checkpoint", f"{root}/pre/pretrain.ckpt", "--epochs", "1",
         "--seed", "4", "--out", f"{root}/train"],
        ["eval", "--data", f"{root}/data", "--checkpoint", f"{root}/train/model.ckpt", "--out", f"{root}/eval"],
    ]
    return [cli.run(argv) for argv in steps]


def test_criterion_09_cli_determinism(tmp_path):
    codes = _cli_chain(tmp_path / "a") + _cli_chain(tmp_path / "b")
    same = {
        name: (tmp_path / "a" / "eval" / name).read_bytes() == (tmp_path / "b" / "eval" / name).read_bytes()
        for name in ("metrics.csv", "cmc.csv")
    }
    ok = all(c == 0 for c in codes) and all(same.values())
    record_criterion(9, ok, f"exit codes {codes}; identical {', '.join(k for k, v in same.items() if v) or 'none'}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_pose_degradation(v_to_t_runs):
    runs = {s: v_to_t_runs[0][s] for s in SEEDS[:3]}
    front, pose = medians(runs, "frontal"), medians(runs, "pose")
    ok = pose["proposed(0.25)"] < front["proposed(0.25)"]
    record_criterion(
        10, ok, "median rank-1 over 3 seeds, pose vs frontal: "
        + " ".join(f"{k}={pose[k]:.3f}/{front[k]:.3f}" for k in front)
    )
    assert ok
