import numpy as np
import pytest
import torch

from memmlp import kinematics as kin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def skel():
    return kin.default_skeleton()


def fd_grad(f, x: torch.Tensor, h: float = 1e-6, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``index`` restricts to a subset of flat positions; returns values at those
    positions only.
    """
    flat = x.data.view(-1)
    positions = range(flat.numel()) if index is None else index
    out = []
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def check_grads(loss_fn, tensors, rng=None, max_entries=None, h=1e-6) -> float:
    """Worst relative error between autograd and FD over ``tensors``."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().view(-1).numpy().copy()
        idx = None
        if max_entries is not None and t.numel() > max_entries:
            idx = sorted(rng.choice(t.numel(), size=max_entries, replace=False).tolist())
            analytic = analytic[idx]
        numeric = fd_grad(loss_fn, t, h=h, index=idx)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
