"""Label-aware optimal transport between empirical distributions.

The ground cost between labelled points is

    d((z, y), (z', y')) = ||z - z'||_2 + inf * [y != y']

and its finite surrogate replaces the infinite penalty with
``nu * ||e(y) - e(y')||_2 = nu * sqrt(2)``. With matched class priors the
joint distance splits into a prior-weighted sum of per-class feature-space
distances, which is how the exact (infinite-cost) mode is computed.

Exact couplings come from the Hungarian/Jonker-Volgenant assignment solver
when both marginals are uniform over equally many points, and from POT's
network simplex otherwise.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import InfeasibleError, InputError

SQRT2 = math.sqrt(2.0)
_MARGINAL_TOL = 1e-8


@dataclass
class Coupling:
    """Transport plan with its prescribed marginals."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    meta: dict = field(default_factory=dict)

    def check(self, tol=_MARGINAL_TOL):
        return (np.all(self.plan >= -tol)
                and np.allclose(self.plan.sum(axis=1), self.row_marginal, atol=tol, rtol=0)
                and np.allclose(self.plan.sum(axis=0), self.col_marginal, atol=tol, rtol=0))

    def support(self):
        """``(rows, cols, mass)`` of the strictly positive entries."""
        rows, cols = np.nonzero(self.plan > 0)
        return rows, cols, self.plan[rows, cols]

    def to_csv(self, path):
        rows, cols, mass = self.support()
        with open(path, "w") as fh:
            fh.write("row,col,mass\n")
            for r, c, m in zip(rows, cols, mass):
                fh.write(f"{r},{c},{m:.17g}\n")


@dataclass(frozen=True)
class CostParams:
    nu: float = 1e8
    mode: str = "exact_infinity"   # or "surrogate"

    def __post_init__(self):
        if not self.nu > 0:
            raise InputError("nu must be > 0")
        if self.mode not in ("exact_infinity", "surrogate"):
            raise InputError(f"unknown cost mode {self.mode!r}")


# --------------------------------------------------------------------------
# ground costs


def _check_pair(z, z2):
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z.shape != z2.shape:
        raise InputError(f"dimension mismatch: {z.shape} vs {z2.shape}")
    return z, z2


def base_distance(z, y, z2, y2):
    """Feature distance for equal labels, ``inf`` otherwise."""
    z, z2 = _check_pair(z, z2)
    if y != y2:
        return math.inf
    return float(np.linalg.norm(z - z2))


def surrogate_distance(z, y, z2, y2, nu=1e8):
    z, z2 = _check_pair(z, z2)
    return float(np.linalg.norm(z - z2)) + (nu * SQRT2 if y != y2 else 0.0)


def feature_cost(X, Y):
    """Pairwise Euclidean distances between the rows of ``X`` and ``Y``.

    Small problems use a direct per-pair evaluation; large ones the
    Gram-matrix expansion, which is faster but loses absolute accuracy
    around ``1e-8 * ||x||``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise InputError("dimension mismatch between point sets")
    if X.shape[0] * Y.shape[0] * X.shape[1] <= 2_000_000:
        return cdist(X, Y)
    sq = (np.einsum("ij,ij->i", X, X)[:, None] + np.einsum("ij,ij->i", Y, Y)[None, :]
          - 2.0 * (X @ Y.T))
    return np.sqrt(np.maximum(sq, 0.0))


def surrogate_cost(X, yx, Y, yy, nu=1e8):
    return feature_cost(X, Y) + nu * SQRT2 * (np.asarray(yx)[:, None] != np.asarray(yy)[None, :])


# --------------------------------------------------------------------------
# solvers


def _check_marginals(a, b, shape):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (shape[0],) or b.shape != (shape[1],):
        raise InputError("marginal lengths do not match the cost matrix")
    if np.any(a < 0) or np.any(b < 0):
        raise InfeasibleError("marginals must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise InfeasibleError(f"marginal masses differ: {a.sum()} vs {b.sum()}")
    return a, b


def _is_uniform(w):
    return np.all(w == w[0])


def _pot():
    # keep POT from importing every installed deep-learning backend
    for key in ("POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX",
                "POT_BACKEND_DISABLE_TENSORFLOW", "POT_BACKEND_DISABLE_CUPY"):
        os.environ.setdefault(key, "1")
    import ot
    return ot


def exact_ot(cost, row_marginal=None, col_marginal=None):
    """Exact minimizer of ``<plan, cost>`` over couplings of the marginals.

    Marginals default to uniform. Returns ``(Coupling, value)``.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise InputError("cost must be a non-empty matrix")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix has non-finite entries; mask them before solving")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if row_marginal is None else row_marginal
    b = np.full(m, 1.0 / m) if col_marginal is None else col_marginal
    a, b = _check_marginals(a, b, C.shape)

    if n == m and _is_uniform(a) and _is_uniform(b):
        rows, cols = linear_sum_assignment(C)
        plan = np.zeros_like(C)
        plan[rows, cols] = a[0]
        solver = "assignment"
    else:
        ot = _pot()
        scale = a.sum()
        plan, log = ot.emd(a / scale, b / scale, C, numItermax=max(100000, 50 * n * m), log=True)
        if log.get("result_code", 1) != 1:
            raise InfeasibleError(f"network simplex failed: {log.get('warning')}")
        plan = plan * scale
        solver = "network_simplex"
    value = float(np.sum(plan * C))
    return Coupling(plan, a, b, {"solver": solver}), value


def brute_force_ot(cost):
    """Optimal value over all permutations (uniform square marginals, n <= 8)."""
    C = np.asarray(cost, dtype=np.float64)
    n = C.shape[0]
    if C.shape != (n, n) or n > 8:
        raise InputError("brute force needs a square cost matrix with n <= 8")
    cols = np.array(list(itertools.permutations(range(n))))
    totals = C[np.arange(n), cols].sum(axis=1)
    return float(totals.min()) / n


def sinkhorn(cost, row_marginal=None, col_marginal=None, epsilon=1e-2, max_iters=10000,
             tol=1e-10):
    """Entropic OT in the log domain.

    The returned plan is rounded onto the exact marginals, so its cost is an
    upper bound on the exact value; ``meta["dual_bound"]`` is a feasible dual
    objective (a lower bound) and ``meta["gap"]`` their difference.
    Non-convergence is recorded in ``meta["converged"]``, not raised.
    """
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    a = np.full(n, 1.0 / n) if row_marginal is None else row_marginal
    b = np.full(m, 1.0 / m) if col_marginal is None else col_marginal
    a, b = _check_marginals(a, b, C.shape)
    if not epsilon > 0:
        raise InputError("epsilon must be > 0")
    with np.errstate(divide="ignore"):
        la, lb = np.log(a), np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f = epsilon * (la - logsumexp((g[None, :] - C) / epsilon, axis=1))
        g = epsilon * (lb - logsumexp((f[:, None] - C) / epsilon, axis=0))
        if it % 10 == 0 or it == max_iters:
            P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
            if np.abs(P.sum(axis=1) - a).sum() < tol:
                converged = True
                break
    P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    P = _round_to_marginals(P, a, b)
    primal = float(np.sum(P * C))
    # c-transform of f gives a feasible dual pair
    fin = np.isfinite(f)
    g_feas = np.min(C[fin] - f[fin, None], axis=0)
    dual = float(np.dot(a[fin], f[fin]) + np.dot(b, g_feas))
    meta = {"solver": "sinkhorn", "converged": converged, "iterations": it,
            "dual_bound": dual, "gap": primal - dual, "epsilon": epsilon}
    return Coupling(P, a, b, meta), primal


def _round_to_marginals(P, a, b):
    # Altschuler, Weed & Rigollet rounding
    r = np.minimum(1.0, np.divide(a, P.sum(axis=1), out=np.ones_like(a), where=P.sum(axis=1) > 0))
    P = P * r[:, None]
    c = np.minimum(1.0, np.divide(b, P.sum(axis=0), out=np.ones_like(b), where=P.sum(axis=0) > 0))
    P = P * c[None, :]
    ea = a - P.sum(axis=1)
    eb = b - P.sum(axis=0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


# --------------------------------------------------------------------------
# label-aware distances between datasets


def _uniform(n):
    return np.full(n, 1.0 / n)


def class_masses(labels, weights, K):
    return np.bincount(labels, weights=weights, minlength=K)


def label_aware_coupling(X, yx, Y, yy, a=None, b=None, nu=1e8):
    """Exact coupling for the surrogate cost.

    When class masses agree and ``nu`` dominates every feature distance, the
    optimum never moves mass across labels, so the problem is solved class by
    class (cheaper, same optimum). Otherwise the full surrogate problem is
    solved. Returns ``(Coupling, value)`` with the value under the surrogate
    cost.
    """
    yx = np.asarray(yx)
    yy = np.asarray(yy)
    n, m = len(yx), len(yy)
    a = _uniform(n) if a is None else np.asarray(a, dtype=np.float64)
    b = _uniform(m) if b is None else np.asarray(b, dtype=np.float64)
    K = int(max(yx.max(), yy.max())) + 1
    ma, mb = class_masses(yx, a, K), class_masses(yy, b, K)
    if np.allclose(ma, mb, atol=1e-12, rtol=0):
        plan = np.zeros((n, m))
        value = 0.0
        max_feat = 0.0
        min_mass = min(a[a > 0].min(), b[b > 0].min())
        for k in np.flatnonzero(ma > 0):
            ri = np.flatnonzero(yx == k)
            ci = np.flatnonzero(yy == k)
            Ck = feature_cost(X[ri], Y[ci])
            max_feat = max(max_feat, float(Ck.max()))
            cpl, v = exact_ot(Ck, a[ri], b[ci])
            plan[np.ix_(ri, ci)] = cpl.plan
            value += v
        # any cross-label mass is at least min_mass and costs nu*sqrt2 each,
        # while the whole block-diagonal plan costs at most max_feat
        if nu * SQRT2 * min_mass > max_feat:
            return Coupling(plan, a, b, {"solver": "per_class"}), value
    C = surrogate_cost(X, yx, Y, yy, nu)
    return exact_ot(C, a, b)


def joint_wasserstein(P, Q, params=None, weights_p=None, weights_q=None):
    """Wasserstein distance between two labelled empirical distributions.

    ``P`` and ``Q`` are :class:`~taskrel.dataset.EmbeddingDataset` objects
    sharing a label space; sample weights default to uniform.

    In ``exact_infinity`` mode the result is the prior-weighted sum of
    per-class feature-space distances, or ``inf`` when the class priors of
    the two sides differ by more than ``1e-6``. In ``surrogate`` mode the full
    problem under the ``nu``-penalized cost is solved.
    """
    params = params or CostParams()
    if P.d != Q.d:
        raise InputError("feature dimensions differ")
    a = _uniform(P.n) if weights_p is None else np.asarray(weights_p, dtype=np.float64)
    b = _uniform(Q.n) if weights_q is None else np.asarray(weights_q, dtype=np.float64)
    a = a / a.sum()
    b = b / b.sum()
    if params.mode == "surrogate":
        _, value = label_aware_coupling(P.features, P.labels, Q.features, Q.labels, a, b,
                                        params.nu)
        return value
    K = max(P.K, Q.K)
    pa, pb = class_masses(P.labels, a, K), class_masses(Q.labels, b, K)
    if np.max(np.abs(pa - pb)) > 1e-6:
        return math.inf
    total = 0.0
    for k in range(K):
        if pa[k] <= 0 and pb[k] <= 0:
            continue
        ri = np.flatnonzero(P.labels == k)
        ci = np.flatnonzero(Q.labels == k)
        wa = a[ri] / a[ri].sum()
        wb = b[ci] / b[ci].sum()
        _, v = exact_ot(feature_cost(P.features[ri], Q.features[ci]), wa, wb)
        total += 0.5 * (pa[k] + pb[k]) * v
    return total
