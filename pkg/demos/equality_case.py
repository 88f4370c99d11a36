"""When the target is the reference with its labels renamed, the bound should
collapse onto the reference probe's own loss.

Run:  python demos/equality_case.py
"""

import numpy as np

from taskrel import Alg1Config, TrainConfig, alg1_minimize, average_loss, standardize
from taskrel import train_lipschitz_softmax
from taskrel.dataset import empirical_prior
from taskrel.synthetic import gaussian_mixture, permuted_copy
from taskrel.transforms import FeatureMap, LabelMap, PriorVector, TransformSet

rng = np.random.default_rng(0)
ref, _ = standardize(gaussian_mixture(400, rng.normal(size=(4, 8)) * 2.0, rng=rng))
perm = rng.permutation(4)
tgt = permuted_copy(ref, perm)
h = train_lipschitz_softmax(ref, TrainConfig(epochs=300, batch_size=ref.n))
print(f"reference probe loss: {average_loss(h, ref):.6f}")

# Start A slightly away from the identity so there is something to learn.
A0 = np.eye(8) + 0.1 * rng.normal(size=(8, 8)) / np.sqrt(8)
init = TransformSet(FeatureMap(A0, np.linalg.inv(A0)), LabelMap.from_permutation(perm),
                    PriorVector.from_prior(empirical_prior(ref), frozen=True))
cfg = Alg1Config(epochs=300, batch_ref=ref.n, batch_tgt=ref.n, learning_rate=1e-2,
                 steps_per_epoch=5, replace=False)
transforms, trace, report = alg1_minimize(ref, tgt, h, cfg, init=init)

print(f"distance term, first epoch: {trace.term3[0]:.4f}  last epoch: {trace.term3[-1]:.2e}")
print(f"task-relatedness:           {report.task_relatedness:.6f}")
print(f"  reweighted reference loss {report.reweighted_reference_loss:.6f}")
print(f"  label mismatch            {report.label_mismatch:.6f}")
print(f"  tau * W                   {report.distribution_mismatch:.2e}")
print(f"||A - I||_F after training: {np.linalg.norm(transforms.A - np.eye(8)):.2e}")
