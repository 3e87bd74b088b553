"""Gaussian information through a reduction, from closed forms to a network layer.

Run: python3 demos/02_information_loss.py
"""
import math

import numpy as np

from complab.infoloss import (JointGaussian, gaussian_mutual_info, info_loss_proxy, layer_info_report,
                              svd_project)
from complab.model import build_model
from complab.netspec import builtin_design

# Two correlated scalars: information rises without bound as |rho| -> 1.
for rho in (0.0, 0.5, 0.9, 0.99, 1.0):
    r = gaussian_mutual_info(JointGaussian.from_cov(np.array([[1, rho], [rho, 1.0]]), 1))
    proxy = info_loss_proxy(r.value) if math.isfinite(r.value) else 0.0
    print(f"rho={rho:<5} MI={r.value:8.4f} nats  1/MI={proxy:8.3f}  {r.flag or ''}")

# A low-rank projection keeps the top of the spectrum.
rng = np.random.default_rng(0)
a = rng.standard_normal((8, 3)) @ np.diag([5.0, 2.0, 0.5])
m = a @ a.T
print("\nretained energy by rank:", [round(svd_project(m, d).retention, 3) for d in range(1, 5)])

# Per-reduction estimates on an untrained, narrowed design1 and design1_conv.
batch = rng.standard_normal((96, 28, 28, 3)).astype(np.float32)
for name in ("design1", "design1_conv"):
    model = build_model(builtin_design(name).scaled(8), np.random.default_rng(1))
    print(f"\n{name} (untrained, width / 8)")
    print(layer_info_report(model, batch, sample_dims=16).to_table())
