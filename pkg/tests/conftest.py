import numpy as np
import pytest

from hybridpt.autodiff import Tape, numeric_grad, rel_error


def check_grads(build, inputs, seed=0, h=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``build(tape, *values) -> Value``; the scalar checked is ``sum(out * R)``
    for a fixed random ``R``.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape()
    vals = [tape.leaf(a) for a in inputs]
    out = build(tape, *vals)
    proj = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    grads = tape.backward(out, seed=proj)

    worst = 0.0
    for i, a in enumerate(inputs):
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            t = Tape(record=False)
            return float((build(t, *[t.leaf(v) for v in args]).data * proj).sum())

        num = numeric_grad(f, a, h)
        ana = grads.get(vals[i].id, np.zeros_like(a))
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail); printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
