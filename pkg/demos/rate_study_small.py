"""Root mean squared error against the noise level on a coarse grid.

A quick version of the rate study: 20 replications at three noise levels.
The full-size study runs through ``heatest rate-study``.
"""

from heatest.experiments import Model, rate_study
from heatest.grid import DiffusivityField

model = Model(DiffusivityField.constant(0.02), sigma=10.0, T=1.0, nx=256, dt=5e-5)
deltas = (0.08, 0.05, 0.03)
study = rate_study(model, deltas, n_reps=20, seed=3, progress=lambda i, n: print(f"\r{i}/{n}", end="", flush=True))
print()
for mode, res in study.items():
    print(f"{mode}: log-log slope of RMSE on eps = {res.slope:.3f} +- {res.slope_se:.3f}")
    for row in res.rows:
        print(f"  eps={row['epsilon']:.5f}  rmse={row['rmse']:.5f}  failures={row['failures']}")
