import numpy as np
import pytest

from xdomid import synthdata as S
from xdomid import tensor as T


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(loss_fn, tensors, eps: float = 1e-5) -> float:
    """Max relative error between taped and finite-difference gradients.

    ``loss_fn`` builds a scalar Tensor from the current values of ``tensors``.
    """
    for t in tensors:
        t.requires_grad = True
    T.get_tape().clear()
    loss = loss_fn()
    T.backward(loss, tensors)
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    with T.no_grad():
        for t, ga in zip(tensors, analytic):
            gn = numeric_grad(lambda: loss_fn().item(), t.data, eps)
            worst = max(worst, rel_error(ga, gn))
    return worst


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 subjects, 2 images per condition and domain."""
    out = tmp_path_factory.mktemp("synth_small")
    return S.generate(12, 2, S.CONDITIONS, out, seed=5)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
