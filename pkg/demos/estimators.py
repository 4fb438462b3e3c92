"""The measurement tools on inputs whose answers are known in closed form.

    python3 demos/estimators.py
"""

import numpy as np

from vexpert.analysis import knn_entropy, knn_mutual_information, pca_fit
from vexpert.losses import mi_loss
from vexpert.routing import CTASchedule

rng = np.random.default_rng(0)

print("kNN mutual information on correlated Gaussians (n=5000)")
for rho in (0.0, 0.5, 0.9, 0.99):
    xy = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=5000)
    est = knn_mutual_information(xy[:, 0], xy[:, 1]).value
    print(f"  rho={rho:<5} estimate {est:.4f}   exact {-0.5 * np.log(1 - rho**2):.4f}")

print("kNN entropy of N(0, I_d)")
for d in (1, 2, 4):
    est = knn_entropy(rng.standard_normal((5000, d)))
    print(f"  d={d} estimate {est:.4f}   exact {0.5 * d * np.log(2 * np.pi * np.e):.4f}")

print("PCA recovers the variance spectrum")
x = rng.standard_normal((4000, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
print(f"  explained variance {pca_fit(x, 4).explained_variance.round(2)} (expected 9, 4, 1, 0.25)")

print("Teacher/expert MI loss")
print(f"  each teacher owns one expert:  {mi_loss(np.eye(3)[None]).item():.4f} (= -ln 3)")
print(f"  every teacher uses all alike:  {mi_loss(np.full((1, 3, 3), 1 / 3)).item():.4f}")

sched = CTASchedule(n_experts=6, k_min=2, horizon=10)
print(f"Top-K annealing, L=6 -> 2 over 10 steps: {[sched(s) for s in range(13)]}")
