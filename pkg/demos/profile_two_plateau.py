"""Estimate the two-plateau diffusivity along the interval from one path.

The field sits at 0.04 on the left and 0.02 on the right, with a narrow
trough between x = 0.4 and x = 0.6 where both logistic factors are small.
Prints the estimate at the 19 interior points; at this coarse resolution the
trough is blurred by the kernel.
"""

from heatest.experiments import PROFILE_POINTS, Model, profile_study
from heatest.grid import DiffusivityField

model = Model(DiffusivityField.two_plateau(), sigma=10.0, T=1.0, nx=256, dt=5e-5)
delta = 0.04
study = profile_study(model, [delta], n_reps=1, seed=1)[delta]
print(f"{'x0':>5} {'theta_hat':>10} {'truth':>8}")
for row in study["rows"]:
    print(f"{row['x0']:5.2f} {row['theta_hat']:10.5f} {row['theta_true']:8.5f}")
print(f"mean absolute error {study['mae']:.5f} over {len(PROFILE_POINTS)} points")
