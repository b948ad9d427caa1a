import numpy as np
import pytest

from mvdml.dataset_io import Dataset

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: "
                                    f"{detail}")


def make_dataset(n=400, p=6, T=3, seed=0, n_binary=2, effect=(0.0, 0.2, 0.35, 0.5),
                 outcomes=1, clusters=10):
    """Small confounded dataset with ``T+1`` treatment levels."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    X[:, p - n_binary:] = (X[:, p - n_binary:] > 0).astype(float)
    logits = np.column_stack([np.zeros(n)] + [0.5 * X[:, t % 3] * (-1) ** t for t in range(T)])
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    D = (rng.random(n)[:, None] > np.cumsum(prob, axis=1)).sum(axis=1).clip(max=T)
    Y = np.column_stack([np.asarray(effect[:T + 1])[D] + X[:, 0] - 0.5 * X[:, 1]
                         + (j + 1) * 0.3 * X[:, 2] + rng.normal(size=n) for j in range(outcomes)])
    names = tuple(f"x{i}" for i in range(p))
    return Dataset(Y, tuple(f"y{j}" for j in range(outcomes)), D,
                   tuple(f"t{t}" for t in range(T + 1)), X, names,
                   np.asarray([f"s{i % clusters}" for i in range(n)], dtype=object),
                   np.asarray([str(1000 + i) for i in range(n)], dtype=object),
                   names[:p - n_binary], ())


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def fitted_small(small_dataset):
    from mvdml.dml import MultivaluedDML

    return MultivaluedDML(max_active=50, n_lambda=40).fit(small_dataset)
