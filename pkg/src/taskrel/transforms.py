"""Prior, label and feature transformations of a reference task.

A reference task ``R`` is mapped towards a target ``T`` in three steps:

* re-weight its class prior to ``D`` (importance weights ``C = D / P_R``),
* relabel through a column-stochastic ``B`` of shape ``(K_T, K_R)``,
* move features by an invertible linear map ``A`` (inverse tracked as ``A_bar``).

The reference probe follows along as ``z -> B softmax(W A_bar z + b)``, and
the bound on the target loss is

    reweighted reference loss + H(Y_T | Y_R; B, D) + tau * W_d(R''', T).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ._blobs import decode_array, encode_array
from .classifier import average_loss, max_grad_norms, reweighted_loss, softmax
from .dataset import EmbeddingDataset, check_prior, empirical_prior
from .errors import InfeasibleError, InputError
from .transport import CostParams, joint_wasserstein

MODES = ("learned-a", "learned-all")


def column_softmax(logits):
    return softmax(logits, axis=0)


@dataclass
class FeatureMap:
    A: np.ndarray
    A_bar: np.ndarray

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d), np.eye(d))

    def invertibility_residual(self):
        """``(||A A_bar - I||_F, ||A_bar A - I||_F)``."""
        eye = np.eye(self.A.shape[0])
        return (float(np.linalg.norm(self.A @ self.A_bar - eye)),
                float(np.linalg.norm(self.A_bar @ self.A - eye)))


@dataclass
class LabelMap:
    """Column-softmax parameterization of ``B``; ``-inf`` logits give exact zeros."""

    logits: np.ndarray
    frozen: bool = False

    @property
    def B(self):
        return column_softmax(self.logits)

    @classmethod
    def from_permutation(cls, perm, frozen=True):
        """``B[perm[j], j] = 1``: reference label ``j`` becomes target label ``perm[j]``."""
        perm = np.asarray(perm, dtype=np.int64)
        K = perm.size
        if sorted(perm.tolist()) != list(range(K)):
            raise InputError("not a permutation")
        logits = np.full((K, K), -np.inf)
        logits[perm, np.arange(K)] = 0.0
        return cls(logits, frozen)


@dataclass
class PriorVector:
    logits: np.ndarray
    frozen: bool = False

    @property
    def D(self):
        return softmax(self.logits)

    @classmethod
    def from_prior(cls, prior, frozen=False):
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(prior, dtype=np.float64)), frozen)


@dataclass
class TransformSet:
    feature_map: FeatureMap
    label_map: LabelMap
    prior: PriorVector
    mode: str = "learned-a"

    @property
    def A(self):
        return self.feature_map.A

    @property
    def A_bar(self):
        return self.feature_map.A_bar

    @property
    def B(self):
        return self.label_map.B

    @property
    def D(self):
        return self.prior.D

    def copy(self):
        return TransformSet(
            FeatureMap(self.A.copy(), self.A_bar.copy()),
            LabelMap(self.label_map.logits.copy(), self.label_map.frozen),
            PriorVector(self.prior.logits.copy(), self.prior.frozen),
            self.mode,
        )

    def to_json(self):
        K_T, K_R = self.label_map.logits.shape
        return json.dumps({
            "d": int(self.A.shape[0]),
            "K_T": int(K_T),
            "K_R": int(K_R),
            "mode": self.mode,
            "B_frozen": self.label_map.frozen,
            "D_frozen": self.prior.frozen,
            "A": encode_array(self.A),
            "A_bar": encode_array(self.A_bar),
            "B_logits": encode_array(self.label_map.logits),
            "D_logits": encode_array(self.prior.logits),
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        o = json.loads(text)
        return cls(
            FeatureMap(decode_array(o["A"]), decode_array(o["A_bar"])),
            LabelMap(decode_array(o["B_logits"]), bool(o["B_frozen"])),
            PriorVector(decode_array(o["D_logits"]), bool(o["D_frozen"])),
            o["mode"],
        )


def initial_transforms(ref_prior, K_T, d, mode="learned-a", rng=None):
    """Starting point: ``A = A_bar = I``, ``D = P_R`` and a random ``B``.

    ``learned-a`` freezes ``D`` and sets ``B`` to a random permutation (which
    needs ``K_R == K_T``); ``learned-all`` draws Gaussian ``B`` logits and
    leaves everything trainable.
    """
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    rng = np.random.default_rng(rng)
    K_R = len(ref_prior)
    if mode == "learned-a":
        if K_R != K_T:
            raise InputError(
                f"learned-a needs as many reference classes as target classes "
                f"({K_R} != {K_T}); subsample the reference classes first")
        label_map = LabelMap.from_permutation(rng.permutation(K_T), frozen=True)
        prior = PriorVector.from_prior(ref_prior, frozen=True)
    else:
        label_map = LabelMap(rng.normal(size=(K_T, K_R)), frozen=False)
        prior = PriorVector.from_prior(ref_prior, frozen=False)
    return TransformSet(FeatureMap.identity(d), label_map, prior, mode)


# --------------------------------------------------------------------------
# label mismatch


def column_entropies(B):
    """``-sum_i B_ij log B_ij`` for each column, with ``0 log 0 = 0``."""
    B = np.asarray(B, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(B > 0, B * np.log(B), 0.0)
    return -t.sum(axis=0)


def conditional_entropy(B, prior):
    """Conditional entropy of target labels given reference labels.

    ``-sum_j prior_j sum_i B_ij log B_ij``; lies in ``[0, log K_T]``.
    """
    B = B.B if isinstance(B, LabelMap) else np.asarray(B, dtype=np.float64)
    prior = check_prior(prior, B.shape[1])
    return float(np.dot(prior, column_entropies(B)))


# --------------------------------------------------------------------------
# pushing the reference task forward


def relabel(labels, B):
    """Reference label ``j`` -> ``argmax_i B_ij`` (ties go to the lowest ``i``)."""
    return np.argmax(np.asarray(B), axis=0)[np.asarray(labels)]


def push_reference(ref, A, B):
    """Transformed reference batch ``(A z, argmax_y B e(y))``.

    ``ref`` is an :class:`EmbeddingDataset`; ``A`` a matrix or
    :class:`FeatureMap`; ``B`` a matrix or :class:`LabelMap`.
    """
    A = A.A if isinstance(A, FeatureMap) else np.asarray(A, dtype=np.float64)
    B = B.B if isinstance(B, LabelMap) else np.asarray(B, dtype=np.float64)
    if B.shape[1] != ref.K:
        raise InputError(f"B has {B.shape[1]} columns but the reference has {ref.K} classes")
    feats = np.asarray(ref.features, dtype=np.float64) @ A.T
    return EmbeddingDataset(feats, relabel(ref.labels, B), B.shape[0], ref.name)


class TransformedClassifier:
    """``z -> B softmax(W A_bar z + b)``, a probe on the target label set."""

    def __init__(self, h, A_bar, B):
        self.h = h
        self.A_bar = np.asarray(A_bar, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        # logits in terms of the untransformed input
        self._W = h.weights @ self.A_bar

    @property
    def K(self):
        return self.B.shape[0]

    def _ref_probs(self, Z):
        return softmax(np.atleast_2d(np.asarray(Z, dtype=np.float64)) @ self._W.T + self.h.bias)

    def predict_probs(self, Z):
        return self._ref_probs(Z) @ self.B.T

    def predict(self, Z):
        return np.argmax(self.predict_probs(Z), axis=-1)

    def losses(self, Z, y):
        Q = self.predict_probs(Z)
        y = np.atleast_1d(y)
        with np.errstate(divide="ignore"):
            return -np.log(Q[np.arange(len(y)), y])

    def input_gradients(self, Z, y):
        """``grad_z -log (B p(z))_y`` for each row of ``Z``."""
        P = self._ref_probs(Z)
        y = np.atleast_1d(y)
        Brows = self.B[y]                           # (n, K_R)
        q = np.sum(Brows * P, axis=1, keepdims=True)
        G = -Brows / q                              # d loss / d p
        S = P * (G - np.sum(P * G, axis=1, keepdims=True))
        return S @ self._W

    def max_grad_norms(self, Z):
        Z = np.atleast_2d(Z)
        out = np.zeros(Z.shape[0])
        for y in range(self.K):
            g = np.linalg.norm(self.input_gradients(Z, np.full(Z.shape[0], y)), axis=1)
            out = np.maximum(out, g)
        return out


def transformed_classifier(h_R, A, B):
    """Reference probe carried to the target task through ``A`` and ``B``.

    ``A`` may be a :class:`FeatureMap` (its ``A_bar`` is used) or a plain
    matrix (inverted exactly).
    """
    A_bar = A.A_bar if isinstance(A, FeatureMap) else np.linalg.inv(np.asarray(A, dtype=np.float64))
    B = B.B if isinstance(B, LabelMap) else B
    return TransformedClassifier(h_R, A_bar, B)


def lipschitz_check(h, features, tau=None):
    """Largest input-gradient norm of the loss over samples and labels.

    Works with a :class:`SoftmaxClassifier` or a :class:`TransformedClassifier`.
    When ``tau`` is given, a value above ``1.05 * tau`` raises a
    ``RuntimeWarning``: the bound's third term then understates the shift.
    """
    if isinstance(h, TransformedClassifier):
        value = float(h.max_grad_norms(features).max())
    else:
        value = float(max_grad_norms(h, features).max())
    if tau is not None and value > 1.05 * tau:
        warnings.warn(f"loss gradient norm {value:.4g} exceeds the budget tau={tau:.4g}",
                      RuntimeWarning, stacklevel=2)
    return value


# --------------------------------------------------------------------------
# the bound


@dataclass
class BoundReport:
    reweighted_reference_loss: float
    label_mismatch: float
    distribution_mismatch: float
    tau: float
    wasserstein: float
    ot_mode: str = "exact_infinity"
    measured_transferability: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def task_relatedness(self):
        return self.reweighted_reference_loss + self.label_mismatch + self.distribution_mismatch

    @property
    def gap(self):
        if self.measured_transferability is None:
            return None
        return self.task_relatedness - self.measured_transferability

    def to_dict(self):
        out = asdict(self)
        out["task_relatedness"] = self.task_relatedness
        out["gap"] = self.gap
        return out


def project_prior(D, B, target_prior):
    """Rescale ``D`` inside each relabelled group so the pushed prior equals the target's.

    Reference classes sharing a target label ``t = argmax_i B_i.`` keep their
    relative weights; the group total becomes ``target_prior[t]``.
    """
    D = np.asarray(D, dtype=np.float64)
    target_prior = np.asarray(target_prior, dtype=np.float64)
    sigma = np.argmax(np.asarray(B), axis=0)
    group = np.bincount(sigma, weights=D, minlength=len(target_prior))
    missing = (target_prior > 0) & (group <= 0)
    if np.any(missing):
        raise InfeasibleError(
            f"no reference mass maps to target classes {np.flatnonzero(missing).tolist()}")
    scale = np.divide(target_prior, group, out=np.zeros_like(group), where=group > 0)
    return D * scale[sigma]


def evaluate_bound(ref_ds, tgt_ds, h_R, transforms, tau, ot_mode="exact_infinity", h_T=None,
                   nu=1e8, project=True, prior_tol=1e-6):
    """Evaluate the three bound terms for fixed transformations.

    With ``project=True`` (default) the transformed prior is first projected
    onto the target prior (see :func:`project_prior`), which is what makes
    the infinite-cost distance finite; otherwise a mismatch larger than
    ``prior_tol`` raises :class:`InfeasibleError`. ``ot_mode="surrogate"``
    replaces the exact distance with the ``nu``-penalized one.
    """
    B = transforms.B
    D = transforms.D
    K_T, K_R = B.shape
    if ref_ds.K != K_R or tgt_ds.K != K_T:
        raise InputError(f"transforms are ({K_T}, {K_R}) but data have K_R={ref_ds.K}, "
                         f"K_T={tgt_ds.K}")
    if K_R < K_T:
        raise InputError("reference must have at least as many classes as the target")
    P_T = empirical_prior(tgt_ds)
    pushed_prior = np.bincount(np.argmax(B, axis=0), weights=D, minlength=K_T)
    if project:
        D_eff = project_prior(D, B, P_T)
    else:
        if np.max(np.abs(pushed_prior - P_T)) > prior_tol:
            raise InfeasibleError("transformed prior does not match the target prior")
        D_eff = D

    term1 = reweighted_loss(h_R, ref_ds, D_eff)
    term2 = conditional_entropy(B, D_eff)
    pushed = push_reference(ref_ds, transforms.A, B)
    counts = np.bincount(ref_ds.labels, minlength=K_R)
    w = np.divide(D_eff, counts, out=np.zeros(K_R), where=counts > 0)[ref_ds.labels]
    keep = w > 0
    pushed = pushed.take(np.flatnonzero(keep))
    w = w[keep]
    mode = "surrogate" if ot_mode == "surrogate" else "exact_infinity"
    W = joint_wasserstein(pushed, tgt_ds, CostParams(nu=nu, mode=mode), weights_p=w)
    if not math.isfinite(W):
        raise InfeasibleError("transformed and target priors differ; distance is infinite")

    tc = transformed_classifier(h_R, transforms.feature_map, B)
    diag = {
        "prior_used": D_eff.tolist(),
        "prior_shift_l1": float(np.abs(D_eff - D).sum()),
        "prior_residual": float(np.linalg.norm(P_T - B @ D)),
        "invertibility_residual": list(transforms.feature_map.invertibility_residual()),
        "transformed_lipschitz": lipschitz_check(tc, tgt_ds.features),
        "reference_lipschitz": lipschitz_check(h_R, ref_ds.features),
    }
    measured = None
    if h_T is not None:
        measured = average_loss(h_T, tgt_ds)
        diag["target_lipschitz"] = lipschitz_check(h_T, tgt_ds.features)
    return BoundReport(term1, term2, tau * W, tau, W, mode, measured, diag)
