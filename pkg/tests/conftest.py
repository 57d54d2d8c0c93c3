import numpy as np
import pytest

from carbonlace.case_io import load_bundled
from carbonlace.lp import LpProblem


@pytest.fixture(scope="session")
def case2():
    return load_bundled("case2")


@pytest.fixture(scope="session")
def case30():
    return load_bundled("case30")


@pytest.fixture(scope="session")
def case14():
    return load_bundled("case14-tight")


def random_lp(rng: np.random.Generator, m: int, n: int) -> LpProblem:
    """Feasible, bounded LP in equality form with finite box bounds."""
    A = rng.normal(size=(m, n))
    lower = rng.uniform(-2.0, 0.0, size=n)
    upper = lower + rng.uniform(0.5, 3.0, size=n)
    x0 = rng.uniform(lower, upper)
    return LpProblem(rng.normal(size=n), A, A @ x0, lower, upper)


def random_model(rng: np.random.Generator, D: int = 6, out: int | None = None, hidden=(8, 7), masked: bool = True):
    from carbonlace.nn import NetworkModel

    out = D if out is None else out
    sizes = [D, *hidden, out]
    masks = {0: (rng.random((hidden[0], D)) > 0.3) * 1.0} if masked else None
    m = NetworkModel(sizes, output_scale=0.9, input_scale=rng.uniform(5, 10, D), masks=masks, dropout_rate=0.0,
                     seed=int(rng.integers(1 << 30)))
    for W in m.weights:
        W += 0.3 * rng.standard_normal(W.shape)
    for b in m.biases:
        b += 0.2 * rng.standard_normal(b.shape)
    m.apply_masks()
    return m


def gradient_errors(model, d, E, mu, spec, rng, n_weights: int = 6, h: float = 1e-6):
    """Relative errors of analytic vs central-difference gradients on sampled parameters."""
    from carbonlace.nn import batch_gradients, batch_loss

    _, gW, gb = batch_gradients(model, d, E, mu, spec)
    errs = []

    def fd(arr, idx):
        x0 = arr[idx]
        arr[idx] = x0 + h
        lp = batch_loss(model, d, E, mu, spec).total
        arr[idx] = x0 - h
        lm = batch_loss(model, d, E, mu, spec).total
        arr[idx] = x0
        return (lp - lm) / (2 * h)

    for k, W in enumerate(model.weights):
        free = np.argwhere(model.masks[k] > 0) if k in model.masks else np.argwhere(np.ones_like(W) > 0)
        for j in rng.choice(len(free), size=min(n_weights, len(free)), replace=False):
            idx = tuple(free[j])
            g = fd(W, idx)
            errs.append(abs(g - gW[k][idx]) / max(1.0, abs(g)))
        for i in range(model.biases[k].size):
            g = fd(model.biases[k], i)
            errs.append(abs(g - gb[k][i]) / max(1.0, abs(g)))
    return np.array(errs)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance outcome lines, printed once at the end of the run."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
