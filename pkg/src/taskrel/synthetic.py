"""Synthetic embedding tasks with known structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .dataset import EmbeddingDataset, _as_rng, class_counts


def random_rotation(d, rng):
    """Haar-random matrix in SO(d).

    Reflections are excluded on purpose: a continuous path of invertible
    matrices from the identity cannot reach ``det = -1``.
    """
    rng = _as_rng(rng)
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def gaussian_mixture(n, means, scales=1.0, prior=None, rng=None, name=""):
    """``n`` labelled draws from an axis-aligned Gaussian mixture.

    ``scales`` is a scalar or a ``(K, d)`` array of per-class standard
    deviations. Class counts follow ``prior`` exactly (largest remainder).
    """
    rng = _as_rng(rng)
    means = np.asarray(means, dtype=np.float64)
    K, d = means.shape
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=np.float64)
    labels = np.repeat(np.arange(K), class_counts(prior, n))
    labels = labels[rng.permutation(n)]
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (K, d))
    X = means[labels] + rng.normal(size=(n, d)) * scales[labels]
    return EmbeddingDataset(X, labels, K, name)


def transfer_instance(seed, n=2000, d=16, K=4, sep=1.5, noise=0.3, tilt=0.5):
    """Reference/target pair related by a rotation, relabelling, prior tilt and noise.

    The reference is a balanced Gaussian mixture. The target draws from the
    same mixture under a Dirichlet-tilted prior (``tilt`` mixes it with the
    uniform prior), adds isotropic noise of scale ``noise``, rotates by a
    random ``Q`` in SO(d) and relabels class ``y`` as ``perm[y]``.

    Returns ``(ref, tgt, truth)`` where ``truth`` holds ``Q``, ``perm`` and
    the target prior indexed by target label.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(K, d)) * sep
    scales = rng.uniform(0.5, 1.5, size=(K, d))
    ref = gaussian_mixture(n, means, scales, rng=rng, name=f"ref{seed}")
    raw = rng.dirichlet(np.ones(K))
    prior = (1.0 - tilt) / K + tilt * raw
    base = gaussian_mixture(n, means, scales, prior=prior, rng=rng)
    Q = random_rotation(d, rng)
    perm = rng.permutation(K)
    X = (base.features + noise * rng.normal(size=base.features.shape)) @ Q.T
    tgt = EmbeddingDataset(X, perm[base.labels], K, f"tgt{seed}")
    tgt_prior = np.zeros(K)
    tgt_prior[perm] = prior
    return ref, tgt, {"Q": Q, "perm": perm, "prior": tgt_prior}


def permuted_copy(ds, perm):
    """Same features, labels relabelled ``y -> perm[y]`` (the equality case)."""
    perm = np.asarray(perm)
    return EmbeddingDataset(ds.features, perm[ds.labels], ds.K, ds.name + "-perm")


def model_zoo(ground_ref, ground_tgt, noise_levels, seed=0, d_out=None):
    """Embeddings of one ground task under several synthetic "encoders".

    Encoder ``m`` applies a random linear map and adds noise of scale
    ``noise_levels[m]`` to both tasks, so higher noise means a worse encoder.
    Returns a list of ``(ref_m, tgt_m)`` pairs.
    """
    rng = np.random.default_rng(seed)
    d = ground_ref.d
    d_out = d_out or d
    zoo = []
    for m, s in enumerate(noise_levels):
        M = rng.normal(size=(d_out, d)) / np.sqrt(d)
        pair = []
        for ds in (ground_ref, ground_tgt):
            X = ds.features @ M.T + s * rng.normal(size=(ds.n, d_out))
            pair.append(EmbeddingDataset(X, ds.labels, ds.K, f"{ds.name}-m{m}"))
        zoo.append(tuple(pair))
    return zoo
