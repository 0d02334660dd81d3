"""Finite-difference check of every parameter tensor of the full model.

    python demos/gradient_check.py
"""
import numpy as np

from patchseg.model import NetworkConfig, build_model, probe_batch, randomize_biases

cfg = NetworkConfig(use_3d=True, use_dist=True, use_prob=True)
model = randomize_biases(build_model(cfg, seed=0))
errs = model.grad_check(probe_batch(cfg, n=4), eps=1e-6, dtype=np.float64, max_entries=24)
for name, e in sorted(errs.items(), key=lambda kv: -kv[1]):
    print(f"{name:16s} {e:.2e}")
print(f"{model.count_params()} parameters, worst relative error {max(errs.values()):.2e}")
