import numpy as np
import pytest
from hypothesis import settings

from mtcrl import autodiff as ad

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")

# entries whose gradients are both below this are compared absolutely
REL_FLOOR = 1e-6


def fd_max_rel_error(loss_fn, tensors, *, h=1e-5, per_tensor=None, seed=0, floor=REL_FLOOR):
    """Worst relative gap between backprop and central finite differences.

    ``loss_fn`` rebuilds a scalar loss from the current ``tensors`` values.
    With ``per_tensor`` only that many randomly chosen entries of each
    tensor are probed.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    ad.backward(loss_fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        idx = np.arange(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            with ad.no_grad():
                flat[i] = orig + h
                up = float(loss_fn().values)
                flat[i] = orig - h
                down = float(loss_fn().values)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    for t in tensors:
        t.grad = None
    return worst


def weighted_sum(out, weights):
    """Scalar probe of every output entry: sum(out * weights)."""
    return ad.sum(ad.mul(out, ad.Tensor(weights)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
