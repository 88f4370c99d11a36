"""Rank five synthetic encoders of the same task by the full bound and by the
fast moment-matching score, then correlate both with a stand-in accuracy.

The "fine-tuning accuracy" here is the training accuracy of an unconstrained
probe on each encoder's target embeddings; real studies would supply measured
accuracies instead.

Run:  python demos/model_selection.py [out_dir]
"""

import sys
import tempfile

from taskrel import Alg1Config, TrainConfig, TransferRecord, accuracy, alg1_minimize
from taskrel import emit_report, fast_task_relatedness, standardize, train_lipschitz_softmax
from taskrel.harness import summarize
from taskrel.synthetic import model_zoo, transfer_instance

out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp()
ref, tgt, _ = transfer_instance(0, n=1000, d=16, K=4, sep=2.0, noise=0.3)
cfg = Alg1Config(epochs=100, batch_ref=500, batch_tgt=500, learning_rate=1e-2, steps_per_epoch=5)

records = []
for m, (r, t) in enumerate(model_zoo(ref, tgt, [0.1, 0.4, 0.8, 1.5, 3.0], seed=0)):
    r, _ = standardize(r)
    t, _ = standardize(t)
    h = train_lipschitz_softmax(r, TrainConfig(epochs=300, batch_size=r.n))
    acc = accuracy(train_lipschitz_softmax(t, TrainConfig(tau=100.0, epochs=300,
                                                          batch_size=t.n, learning_rate=0.1)), t)
    _, _, full = alg1_minimize(r, t, h, cfg)
    _, fast = fast_task_relatedness(r, t, h, cfg)
    records.append(TransferRecord(f"enc{m}", "synthetic", full.task_relatedness, acc,
                                  full.reweighted_reference_loss, full.label_mismatch,
                                  full.distribution_mismatch, "supervised"))
    records.append(TransferRecord(f"enc{m}", "synthetic", fast.score, acc,
                                  fast.reweighted_reference_loss, fast.label_mismatch,
                                  fast.gamma, "fast"))
    print(f"enc{m}: full={full.task_relatedness:.4f} fast={fast.score:.4f} accuracy={acc:.3f}")

for s in summarize(records):
    print(f"[{s['mode']}] pearson={s['pearson']} spearman={s['spearman']} ranking={s['ranking']}")
print("wrote", *emit_report(records, f"{out_dir}/zoo"))
