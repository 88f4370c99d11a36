import numpy as np
import pytest

from taskrel import EmbeddingDataset, TrainConfig, standardize, train_lipschitz_softmax
from taskrel.synthetic import gaussian_mixture


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-5):
    """Relative error; ``floor`` keeps vanishing gradients from amplifying FD round-off."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_task():
    """Standardized 3-class, 6-dim mixture with a trained probe."""
    r = np.random.default_rng(7)
    ds = gaussian_mixture(300, r.normal(size=(3, 6)) * 2.0, rng=r)
    ds, _ = standardize(ds)
    h = train_lipschitz_softmax(ds, TrainConfig(epochs=200, batch_size=300))
    return ds, h


def random_dataset(rng, n=20, d=3, K=3):
    return EmbeddingDataset(rng.normal(size=(n, d)), rng.integers(0, K, n), K)


def equality_case(n=400, d=8, K=4, seed=0):
    """Standardized mixture, a permuted-label copy of it, a probe and a near-identity start.

    Returns ``(ref, tgt, h, init, perm)``; ``init`` freezes ``B`` to the
    generating permutation and ``D`` to the reference prior.
    """
    from taskrel.synthetic import permuted_copy
    from taskrel.transforms import FeatureMap, LabelMap, PriorVector, TransformSet

    r = np.random.default_rng(seed)
    ref, _ = standardize(gaussian_mixture(n, r.normal(size=(K, d)) * 2.0, rng=r))
    perm = r.permutation(K)
    tgt = permuted_copy(ref, perm)
    h = train_lipschitz_softmax(ref, TrainConfig(epochs=300, batch_size=n, seed=seed))
    A0 = np.eye(d) + 0.1 * r.normal(size=(d, d)) / np.sqrt(d)
    init = TransformSet(FeatureMap(A0, np.linalg.inv(A0)), LabelMap.from_permutation(perm),
                        PriorVector.from_prior(np.bincount(ref.labels, minlength=K) / n, frozen=True))
    return ref, tgt, h, init, perm


@pytest.fixture(scope="session")
def eq_case():
    return equality_case()


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
