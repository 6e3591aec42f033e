"""
Pretrain with CMSC, then probe the representations
==================================================

A short run on a small synthetic corpus: pretraining loss, patient
distances and a linear probe against a random encoder. Takes about 10 s.
"""

import dataclasses
import tempfile

from ecgcl.signals import SyntheticConfig, generate_synthetic, read_manifest
from ecgcl.trainer import TrainConfig, linear_eval, patient_distances, pretrain

root = tempfile.mkdtemp()
generate_synthetic(SyntheticConfig(num_patients=40, frames_per_patient=8, num_leads=4,
                                   class_separation=3.0, seed=1), root)
manifest = read_manifest(root)
print(len(manifest.entries), "frames from", len(manifest.patients), "patients")

config = TrainConfig(method="cmsc", E=128, epochs=10, batch_size=64, lr=1e-3, seed=0)
params, _, log = pretrain(manifest, config)
losses = log.series("train", "pretrain_loss")
print("pretrain loss: %.3f -> %.3f" % (losses[0], losses[-1]))

# frames from one patient end up closer together than frames from different patients
_, _, dist = patient_distances(params, manifest, config)
print("intra %.3f  inter %.3f" % (dist["intra_mean"], dist["inter_mean"]))

random_params, _, _ = pretrain(manifest, dataclasses.replace(config, method="random"))
probe = dataclasses.replace(config, epochs=20, lr=1e-2)
for name, p in [("cmsc", params), ("random", random_params)]:
    _, _, m = linear_eval(p, manifest, probe)
    print("%-6s linear-probe test AUC %.4f" % (name, m.summary["test_auc"]))
