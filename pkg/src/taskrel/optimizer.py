"""Learning the transformations that minimize the transfer bound.

Each epoch alternates an exact coupling solve with gradient steps on

    sum_ij pi_ij d~(A z_i, sigma(y_i); z_j, y_j)            distance
    + sum_y D(y) L_R(y)                                    reweighted reference loss
    + H(Y_T | Y_R; B, D)                                   label mismatch
    + w_p ||P_T - B D||^2                                  prior matching
    + w_i (||A A_bar - I||_F + ||A_bar A - I||_F)          invertibility

where ``L_R(y)`` is the reference probe's mean loss on class ``y`` and
``sigma(j) = argmax_i B_ij``. The coupling is held fixed during the steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import class_mean_losses
from .dataset import empirical_prior, sample_indices
from .errors import DivergenceError, InputError
from .transforms import (
    MODES,
    column_entropies,
    evaluate_bound,
    initial_transforms,
    relabel,
    transformed_classifier,
)
from .transport import SQRT2, label_aware_coupling

TRACE_COLUMNS = ("epoch", "objective", "term1", "term2", "term3", "prior_pen", "inv_pen")


@dataclass
class Alg1Config:
    epochs: int = 2000
    batch_ref: int = 1000
    batch_tgt: int = 1000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    steps_per_epoch: int = 1
    penalty_prior_weight: float = 1.0
    penalty_inv_weight: float = 1.0
    mode: str = "learned-a"
    target_labels: str = "supervised"
    tau: float = 0.02
    nu: float = 1e8
    lam: float = 0.01
    replace: bool = True
    eval_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise InputError("epochs and steps_per_epoch must be >= 1")
        if self.batch_ref < 1 or self.batch_tgt < 1:
            raise InputError("batch sizes must be >= 1")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if self.target_labels not in ("supervised", "pseudo"):
            raise InputError("target_labels must be 'supervised' or 'pseudo'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InputError("lr_schedule must be 'constant' or 'cosine'")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise InputError("learning_rate must be > 0 and momentum in [0, 1)")
        if self.tau < 0 or self.nu <= 0 or self.lam < 0:
            raise InputError("tau, lam must be >= 0 and nu > 0")
        if self.penalty_prior_weight < 0 or self.penalty_inv_weight < 0:
            raise InputError("penalty weights must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BoundTrace:
    objective: list = field(default_factory=list)
    term1: list = field(default_factory=list)
    term2: list = field(default_factory=list)
    term3: list = field(default_factory=list)
    prior_pen: list = field(default_factory=list)
    inv_pen: list = field(default_factory=list)

    def append(self, value, terms):
        self.objective.append(value)
        for k in ("term1", "term2", "term3", "prior_pen", "inv_pen"):
            getattr(self, k).append(terms[k])

    def __len__(self):
        return len(self.objective)

    def as_array(self):
        cols = [np.arange(len(self))] + [np.asarray(getattr(self, c)) for c in TRACE_COLUMNS[1:]]
        return np.column_stack(cols)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for row in self.as_array():
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


# --------------------------------------------------------------------------
# objective pieces


def coupling_distance(X_R, y_pushed, X_T, y_T, A, support, nu):
    """Coupling-weighted surrogate distance and its gradient w.r.t. ``A``.

    ``support`` is ``(rows, cols, mass)`` of the coupling; ``X_R`` holds the
    untransformed reference features.
    """
    rows, cols, mass = support
    diff = X_R[rows] @ A.T - X_T[cols]
    dist = np.linalg.norm(diff, axis=1)
    cross = y_pushed[rows] != y_T[cols]
    value = float(np.sum(mass * dist) + nu * SQRT2 * np.sum(mass[cross]))
    # the norm's subgradient at 0 is taken as 0
    coef = np.divide(mass, dist, out=np.zeros_like(dist), where=dist > 0)
    grad_A = (diff * coef[:, None]).T @ X_R[rows]
    return value, grad_A


def _softmax_vjp(probs, grad, axis):
    return probs * (grad - np.sum(probs * grad, axis=axis, keepdims=True))


def penalty_terms(transforms, class_losses, target_prior, cfg):
    """Everything except the distance term, with gradients.

    Returns ``(terms, grads)`` where ``terms`` has ``term1``, ``term2``,
    ``prior_pen``, ``inv_pen`` and ``grads`` has ``A``, ``A_bar``,
    ``B_logits``, ``D_logits``.
    """
    A, Ab = transforms.A, transforms.A_bar
    B, D = transforms.B, transforms.D
    d = A.shape[0]
    eye = np.eye(d)

    term1 = float(np.dot(D, class_losses))
    H_cols = column_entropies(B)
    term2 = float(np.dot(D, H_cols))
    r = B @ D - target_prior
    prior_pen = cfg.penalty_prior_weight * float(r @ r)

    M1 = A @ Ab - eye
    M2 = Ab @ A - eye
    n1, n2 = np.linalg.norm(M1), np.linalg.norm(M2)
    inv_pen = cfg.penalty_inv_weight * (n1 + n2)
    gA = np.zeros_like(A)
    gAb = np.zeros_like(Ab)
    wi = cfg.penalty_inv_weight
    if n1 > 0:
        gA += wi * (M1 @ Ab.T) / n1
        gAb += wi * (A.T @ M1) / n1
    if n2 > 0:
        gA += wi * (Ab.T @ M2) / n2
        gAb += wi * (M2 @ A.T) / n2

    gD = class_losses + H_cols + 2.0 * cfg.penalty_prior_weight * (B.T @ r)
    with np.errstate(divide="ignore", invalid="ignore"):
        logB = np.where(B > 0, np.log(B), 0.0)
    gB = -D[None, :] * (logB + 1.0) * (B > 0) + 2.0 * cfg.penalty_prior_weight * np.outer(r, D)

    grads = {
        "A": gA,
        "A_bar": gAb,
        "B_logits": np.zeros_like(B) if transforms.label_map.frozen else _softmax_vjp(B, gB, 0),
        "D_logits": np.zeros_like(D) if transforms.prior.frozen else _softmax_vjp(D, gD, 0),
    }
    terms = {"term1": term1, "term2": term2, "prior_pen": prior_pen, "inv_pen": inv_pen}
    return terms, grads


def objective_and_gradients(batch_R, batch_T, coupling, transforms, h_R, cfg,
                            class_losses=None, target_prior=None):
    """Full per-step objective for a fixed coupling, and its gradients.

    ``batch_R`` carries reference labels and untransformed features,
    ``batch_T`` the target labels in use (true or pseudo). ``class_losses``
    defaults to per-class mean losses of ``h_R`` on ``batch_R``;
    ``target_prior`` to the label frequencies of ``batch_T``.

    Returns ``(value, terms, grads)``.
    """
    if class_losses is None:
        class_losses = class_mean_losses(h_R, batch_R)
    if target_prior is None:
        target_prior = empirical_prior(batch_T)
    plan = coupling.plan if hasattr(coupling, "plan") else np.asarray(coupling)
    rows, cols = np.nonzero(plan > 0)
    support = (rows, cols, plan[rows, cols])
    y_pushed = relabel(batch_R.labels, transforms.B)
    dist, gA_dist = coupling_distance(batch_R.features, y_pushed, batch_T.features,
                                      batch_T.labels, transforms.A, support, cfg.nu)
    terms, grads = penalty_terms(transforms, class_losses, target_prior, cfg)
    terms["term3"] = dist
    grads["A"] = grads["A"] + gA_dist
    value = dist + terms["term1"] + terms["term2"] + terms["prior_pen"] + terms["inv_pen"]
    return value, terms, grads


def pseudo_label_targets(features, h_R, transforms):
    """``argmax_y (B h_R(A_bar z))_y`` for each target sample (ties -> lowest)."""
    tc = transformed_classifier(h_R, transforms.feature_map, transforms.label_map)
    return np.argmax(tc.predict_probs(features), axis=1)


# --------------------------------------------------------------------------
# the alternating loop


class WassersteinTerm:
    """Per-epoch distance term: solve the coupling once, reuse it for the steps."""

    name = "wasserstein"

    def __init__(self, cfg):
        self.nu = cfg.nu

    def prepare(self, X_R, y_pushed, X_T, y_T, A):
        coupling, _ = label_aware_coupling(X_R @ A.T, y_pushed, X_T, y_T, nu=self.nu)
        self.support = coupling.support()
        self.args = (X_R, y_pushed, X_T, y_T)

    def __call__(self, A):
        return coupling_distance(*self.args, A, self.support, self.nu)


def learning_rate_at(cfg, epoch):
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def _check_inputs(ref_ds, tgt_ds, h_R, cfg):
    if ref_ds.d != tgt_ds.d or h_R.d != ref_ds.d:
        raise InputError("reference, target and probe dimensions differ")
    if h_R.K != ref_ds.K:
        raise InputError("probe class count differs from the reference")
    if ref_ds.K < tgt_ds.K:
        raise InputError(f"reference has {ref_ds.K} classes, target {tgt_ds.K}; need K_R >= K_T")
    d = ref_ds.d
    for name, b, n in (("batch_ref", cfg.batch_ref, ref_ds.n), ("batch_tgt", cfg.batch_tgt, tgt_ds.n)):
        eff = b if cfg.replace else min(b, n)
        if eff < d:
            raise InputError(f"{name}={eff} is smaller than the feature dimension {d}")


def run_alternating(ref_ds, tgt_ds, h_R, cfg, distance, init=None):
    """Shared optimization loop; ``distance`` supplies the third term.

    Returns ``(transforms, trace)``.
    """
    _check_inputs(ref_ds, tgt_ds, h_R, cfg)
    rng = np.random.default_rng(cfg.seed)
    P_R = empirical_prior(ref_ds)
    if init is None:
        transforms = initial_transforms(P_R, tgt_ds.K, ref_ds.d, cfg.mode, rng)
    else:
        transforms = init.copy()
    class_losses = class_mean_losses(h_R, ref_ds)
    P_T_full = empirical_prior(tgt_ds)
    pseudo = cfg.target_labels == "pseudo"
    nR = cfg.batch_ref if cfg.replace else min(cfg.batch_ref, ref_ds.n)
    nT = cfg.batch_tgt if cfg.replace else min(cfg.batch_tgt, tgt_ds.n)
    X_ref = np.asarray(ref_ds.features, dtype=np.float64)
    X_tgt = np.asarray(tgt_ds.features, dtype=np.float64)

    params = {
        "A": lambda: transforms.feature_map.A,
        "A_bar": lambda: transforms.feature_map.A_bar,
        "B_logits": lambda: transforms.label_map.logits,
        "D_logits": lambda: transforms.prior.logits,
    }
    velocity = {k: np.zeros_like(get()) for k, get in params.items()}
    trace = BoundTrace()

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        D = transforms.D
        idx_R = sample_indices(ref_ds.labels, ref_ds.K, D, nR, rng, cfg.replace)
        if pseudo:
            if cfg.replace:
                idx_T = rng.integers(0, tgt_ds.n, size=nT)
            else:
                idx_T = rng.permutation(tgt_ds.n)[:nT]
            y_T = pseudo_label_targets(X_tgt[idx_T], h_R, transforms)
            target_prior = np.bincount(y_T, minlength=tgt_ds.K) / nT
        else:
            idx_T = sample_indices(tgt_ds.labels, tgt_ds.K, P_T_full, nT, rng, cfg.replace)
            y_T = tgt_ds.labels[idx_T]
            target_prior = P_T_full
        X_R, X_T = X_ref[idx_R], X_tgt[idx_T]
        y_pushed = relabel(ref_ds.labels[idx_R], transforms.B)
        distance.prepare(X_R, y_pushed, X_T, y_T, transforms.A)

        for step in range(cfg.steps_per_epoch):
            dist, gA_dist = distance(transforms.A)
            terms, grads = penalty_terms(transforms, class_losses, target_prior, cfg)
            grads["A"] = grads["A"] + gA_dist
            terms["term3"] = dist
            value = dist + terms["term1"] + terms["term2"] + terms["prior_pen"] + terms["inv_pen"]
            if not math.isfinite(value):
                raise DivergenceError(f"objective became non-finite at epoch {epoch}")
            if step == 0:
                trace.append(value, terms)
            for k, get in params.items():
                if k == "B_logits" and transforms.label_map.frozen:
                    continue
                if k == "D_logits" and transforms.prior.frozen:
                    continue
                v = cfg.momentum * velocity[k] - lr * grads[k]
                velocity[k] = v
                p = get()
                # -inf logits stay -inf; their gradient is exactly zero
                p += np.where(np.isfinite(p), v, 0.0)
            if not np.all(np.isfinite(transforms.A)) or not np.all(np.isfinite(transforms.A_bar)):
                raise DivergenceError(f"feature map diverged at epoch {epoch}")
    return transforms, trace


def evaluation_sets(ref_ds, tgt_ds, h_R, transforms, cfg):
    """Datasets used for the final report (pseudo-labelled target if needed)."""
    rng = np.random.default_rng([cfg.seed, 1])
    ref_eval, tgt_eval = ref_ds, tgt_ds
    if cfg.eval_size is not None:
        if ref_ds.n > cfg.eval_size:
            ref_eval = ref_ds.take(np.sort(rng.choice(ref_ds.n, cfg.eval_size, replace=False)))
        if tgt_ds.n > cfg.eval_size:
            tgt_eval = tgt_ds.take(np.sort(rng.choice(tgt_ds.n, cfg.eval_size, replace=False)))
    if cfg.target_labels == "pseudo":
        tgt_eval = tgt_eval.with_labels(pseudo_label_targets(tgt_eval.features, h_R, transforms))
    return ref_eval, tgt_eval


def alg1_minimize(ref_ds, tgt_ds, h_R, cfg=None, init=None, h_T=None, ot_mode="exact_infinity"):
    """Learn ``(A, A_bar, B, D)`` minimizing the transfer bound.

    In ``learned-a`` mode the reference must have exactly ``K_T`` classes
    (see :func:`taskrel.dataset.subsample_classes`); ``B`` is frozen to a
    random permutation and ``D`` to the reference prior unless ``init`` says
    otherwise. With ``cfg.target_labels == "pseudo"`` the target labels are
    never read: they are re-predicted every epoch by the transformed probe.

    Returns ``(transforms, trace, report)``; the report is evaluated on the
    full datasets (or ``cfg.eval_size`` subsamples) after projecting the
    transformed prior onto the target's. ``h_T``, if given, supplies the
    measured transferability on ``tgt_ds`` with its true labels.
    """
    cfg = cfg or Alg1Config()
    transforms, trace = run_alternating(ref_ds, tgt_ds, h_R, cfg, WassersteinTerm(cfg), init)
    ref_eval, tgt_eval = evaluation_sets(ref_ds, tgt_ds, h_R, transforms, cfg)
    report = evaluate_bound(ref_eval, tgt_eval, h_R, transforms, cfg.tau, ot_mode=ot_mode,
                            nu=cfg.nu)
    if h_T is not None:
        from .classifier import average_loss
        report.measured_transferability = average_loss(h_T, tgt_ds)
    report.diagnostics["target_labels"] = cfg.target_labels
    report.diagnostics["mode"] = cfg.mode
    # the nu-penalized distance the optimizer last saw, next to the exact one
    report.diagnostics["surrogate_distance_last_batch"] = float(trace.term3[-1])
    return transforms, trace, report
