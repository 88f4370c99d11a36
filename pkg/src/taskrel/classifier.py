"""Lipschitz-constrained softmax linear probes.

The probe is ``h(z) = softmax(W z + b)`` trained with cross-entropy plus a
hinged, squared gradient-norm penalty

    mean_i [ l(h(z_i), y_i) + rho * max_y max(0, ||grad_z l(h(z_i), y)|| - tau)^2 ]

so that ``z -> l(h(z), y)`` is (approximately) ``tau``-Lipschitz on the data.
All gradients are analytic; nothing here depends on an autodiff framework.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._blobs import decode_array, encode_array
from .dataset import StandardizationStats, _as_rng, check_prior, empirical_prior
from .errors import DivergenceError, InputError


def softmax(s, axis=-1):
    s = s - np.max(s, axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(s, axis=-1):
    s = s - np.max(s, axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


@dataclass
class SoftmaxClassifier:
    """Linear softmax probe with weights ``(K, d)`` and bias ``(K,)``.

    ``stats`` records the standardization applied to the training features;
    callers are expected to pass already-standardized inputs.
    """

    weights: np.ndarray
    bias: np.ndarray
    stats: StandardizationStats | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InputError("weights must be (K, d) and bias (K,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InputError("classifier parameters must be finite")

    @property
    def K(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.weights.shape[1]

    def logits(self, z):
        return np.asarray(z, dtype=np.float64) @ self.weights.T + self.bias

    def predict_probs(self, z):
        return softmax(self.logits(z))

    def predict(self, z):
        return np.argmax(self.logits(z), axis=-1)

    def to_json(self):
        return json.dumps({
            "d": self.d,
            "K": self.K,
            "weights": encode_array(self.weights),
            "bias": encode_array(self.bias),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "info": self.info,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        try:
            W = decode_array(obj["weights"])
            b = decode_array(obj["bias"])
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"malformed classifier file: {exc}") from None
        if W.shape != (obj["K"], obj["d"]):
            raise InputError("classifier weight shape does not match header")
        stats = None if obj.get("stats") is None else StandardizationStats.from_dict(obj["stats"])
        return cls(W, b, stats, obj.get("info", {}))


def _check_labels(y, K):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= K):
        raise InputError(f"label out of range [0, {K})")
    return y.astype(np.int64)


def per_sample_losses(h, Z, y):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = _check_labels(np.atleast_1d(y), h.K)
    return -log_softmax(h.logits(Z))[np.arange(len(y)), y]


def cross_entropy_loss(h, z, y):
    """``-log softmax(W z + b)[y]`` for a single sample."""
    return float(per_sample_losses(h, z, y)[0])


def input_gradients(h, Z, y):
    """Rows ``grad_z l(h(z_i), y_i) = W^T (p_i - e_{y_i})``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = _check_labels(np.atleast_1d(y), h.K)
    V = softmax(h.logits(Z))
    V[np.arange(len(y)), y] -= 1.0
    return V @ h.weights


def grad_norm_wrt_input(h, z, y):
    return float(np.linalg.norm(input_gradients(h, z, y)[0]))


def _all_label_grad_norms(P, W):
    """``(n, K)`` array of ``||W^T (p_i - e_k)||`` for every label k."""
    U = P @ W
    cross = U @ W.T
    sq = np.sum(U * U, axis=1)[:, None] - 2.0 * cross + np.sum(W * W, axis=1)[None, :]
    return np.sqrt(np.maximum(sq, 0.0))


def max_grad_norms(h, Z):
    """Per-sample maximum over labels of the input-gradient norm."""
    P = h.predict_probs(Z)
    return _all_label_grad_norms(np.atleast_2d(P), h.weights).max(axis=1)


def average_loss(h, ds):
    """Mean cross-entropy of ``h`` over ``ds``."""
    return float(np.mean(per_sample_losses(h, ds.features, ds.labels)))


def accuracy(h, ds):
    return float(np.mean(h.predict(ds.features) == ds.labels))


def class_mean_losses(h, ds):
    """Mean loss of ``h`` within each class of ``ds`` (0 for empty classes)."""
    losses = per_sample_losses(h, ds.features, ds.labels)
    counts = np.bincount(ds.labels, minlength=ds.K)
    sums = np.bincount(ds.labels, weights=losses, minlength=ds.K)
    return np.divide(sums, counts, out=np.zeros(ds.K), where=counts > 0)


def reweighted_loss(h, ds, D):
    """``(1/n) sum_i D(y_i) / P(y_i) * l(h(z_i), y_i)`` with ``P`` the empirical prior."""
    D = check_prior(D, ds.K)
    P = empirical_prior(ds)
    if np.any((P == 0) & (D > 0)):
        raise InputError("target prior puts mass on a class absent from the dataset")
    C = np.divide(D, P, out=np.zeros_like(D), where=P > 0)
    losses = per_sample_losses(h, ds.features, ds.labels)
    return float(np.mean(C[ds.labels] * losses))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Hyperparameters for :func:`train_lipschitz_softmax`.

    ``learning_rate=None`` picks ``min(0.1, 0.25 / rho)``; the squared hinge
    has curvature of order ``rho`` and plain SGD diverges above that.
    """

    tau: float = 0.02
    rho: float = 1e4
    learning_rate: float | None = None
    momentum: float = 0.9
    epochs: int = 5000
    batch_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0 or self.rho < 0:
            raise InputError("tau and rho must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must be in [0, 1)")

    @property
    def lr(self):
        if self.learning_rate is not None:
            return self.learning_rate
        return min(0.1, 0.25 / self.rho) if self.rho > 0 else 0.1

    def to_dict(self):
        return asdict(self)


def penalized_objective(W, b, Z, y, tau, rho):
    """Training objective and its gradient w.r.t. ``(W, b)``.

    Returns ``(value, mean_ce, gW, gb, max_norms)``. The penalty is taken at
    the label maximizing the input-gradient norm; its subgradient at the
    hinge kink is zero.
    """
    n = Z.shape[0]
    S = Z @ W.T + b
    logP = log_softmax(S)
    P = np.exp(logP)
    rows = np.arange(n)
    ce = -logP[rows, y]
    G = P.copy()
    G[rows, y] -= 1.0
    gW = G.T @ Z / n
    gb = G.sum(axis=0) / n

    norms = _all_label_grad_norms(P, W)
    star = np.argmax(norms, axis=1)
    g = norms[rows, star]
    excess = np.maximum(g - tau, 0.0)
    value = ce.mean() + rho * np.mean(excess ** 2)

    active = (excess > 0) & (g > 0)
    if rho > 0 and np.any(active):
        Za, Pa, ga = Z[active], P[active], g[active]
        V = Pa.copy()
        V[np.arange(len(ga)), star[active]] -= 1.0
        U = V @ W                       # input gradients at the maximizing label
        WU = U @ W.T                    # (n_a, K)
        Q = Pa * WU - Pa * np.sum(Pa * WU, axis=1, keepdims=True)   # softmax Jacobian applied
        c = (2.0 * rho * excess[active] / ga / n)[:, None]
        gW = gW + (c * V).T @ U + (c * Q).T @ Za
        gb = gb + (c * Q).sum(axis=0)
    return value, float(ce.mean()), gW, gb, g


def train_lipschitz_softmax(ds, cfg=None, init=None):
    """Fit a softmax probe on ``ds`` under the gradient-norm penalty.

    Mini-batch SGD with heavy-ball momentum, deterministic given ``cfg.seed``.
    The returned classifier's ``info`` holds the final mean loss, training
    accuracy and the largest per-sample gradient norm.
    """
    cfg = cfg or TrainConfig()
    rng = _as_rng(cfg.seed)
    Z = np.asarray(ds.features, dtype=np.float64)
    y = ds.labels
    n, d = Z.shape
    if init is None:
        W = np.zeros((ds.K, d))
        b = np.zeros(ds.K)
    else:
        W, b = init.weights.copy(), init.bias.copy()
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    lr, mom = cfg.lr, cfg.momentum
    bs = min(cfg.batch_size, n)
    full = bs == n
    # overflow is detected explicitly below and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = np.arange(n) if full else rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                value, _, gW, gb, _ = penalized_objective(W, b, Z[idx], y[idx], cfg.tau, cfg.rho)
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch}; lower the learning rate")
                vW = mom * vW - lr * gW
                vb = mom * vb - lr * gb
                W = W + vW
                b = b + vb
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DivergenceError(f"parameters diverged at epoch {epoch}; lower the learning rate")
    value, ce, _, _, g = penalized_objective(W, b, Z, y, cfg.tau, cfg.rho)
    if not math.isfinite(value):
        raise DivergenceError("non-finite final training loss")
    clf = SoftmaxClassifier(W, b)
    clf.info = {
        "final_loss": ce,
        "final_objective": float(value),
        "accuracy": accuracy(clf, ds),
        "max_grad_norm": float(g.max()),
        "frac_above_1.05tau": float(np.mean(g > 1.05 * cfg.tau)),
        "config": cfg.to_dict(),
    }
    return clf
