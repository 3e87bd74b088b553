"""Six decay rules over a 3000-iteration run, plotted to lr_policies.png.

Run: python3 demos/03_learning_rates.py
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from complab.optim import DecayPolicy, lr_at

total = 3000
policies = {
    "fixed": DecayPolicy("fixed", c=0.01),
    "exponential": DecayPolicy("exponential", lambda0=0.05, gamma=0.999),
    "step": DecayPolicy("step", lambda0=0.05, gamma=0.1, step=total // 3),
    "inverse": DecayPolicy("inverse", lambda0=0.05, gamma=0.01, c=0.75),
    "poly": DecayPolicy("poly", lambda0=0.05, c=1.0, max_iter=total),
    "sigmoid": DecayPolicy("sigmoid", lambda0=0.05, gamma=-5, step=total // 2),
}
its = np.arange(total)
for name, p in policies.items():
    lr = [lr_at(p, int(i)) for i in its]
    print(f"{name:<12} start {lr[0]:.4f}  middle {lr[total // 2]:.4f}  end {lr[-1]:.6f}")
    plt.plot(its, lr, label=name)
plt.xlabel("iteration")
plt.ylabel("learning rate")
plt.legend()
plt.savefig("lr_policies.png", dpi=120)
print("wrote lr_policies.png")
