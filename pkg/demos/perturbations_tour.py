"""
Perturbing a single ECG frame
=============================

Noise, flips and STFT masking on one synthetic lead.
"""

import numpy as np
from ecgcl import perturb
from ecgcl.signals import SyntheticConfig, generate_synthetic

_, frames = generate_synthetic(SyntheticConfig(num_patients=4, frames_per_patient=1, num_leads=1))
x = frames[0].samples.astype(np.float64)
rng = np.random.default_rng(1)

# flips are exact involutions
print(np.array_equal(perturb.flip_y(perturb.flip_y(x)), x), np.array_equal(perturb.flip_x(perturb.flip_x(x)), x))

# the STFT used for masking inverts to machine precision
spec = perturb.stft(x)
print("spectrogram bins (freq, time):", spec.values.shape)
back = perturb.istft(spec)
print("round-trip rel. error:", np.linalg.norm(back - x) / np.linalg.norm(x))

# mask 20% of the time bins once
masked = perturb.spec_augment(x, axis="t", w=0.2, R=1, rng=rng)
print("samples changed by masking:", int(np.sum(np.abs(masked - x) > 1e-9)), "of", x.size)

# chains are written as text
chain = perturb.parse_chain("gaussian(sigma=0.05r)>sa(axis=f,w=0.2,R=1)>flipx")
y = perturb.apply_chain(x, chain, rng)
print(perturb.format_chain(chain), "->", y.shape)
