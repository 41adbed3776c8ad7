"""Closed-form against time-stepping responses for the oscillator families.

Run: python demos/solver_crosscheck.py
"""
# %% Imports
import numpy as np

from dynsurrogate.crosscheck import mdof_oracle_check, sdof_oracle_check, sdof_residual_check, tangent_fd_check
from dynsurrogate.dynamics import mdof_modal_data, sdof_linear_response, sdof_newmark_response
from dynsurrogate.sampling import dataspace, sample_loads

# %% One load, two solvers
# A linear single-mass oscillator under a three-term harmonic load. The
# closed form is exact on the observation grid; Newmark integrates on a
# finer grid and is sampled back.
space = dataspace(1)
load = sample_loads(space, "test", 0, np.arange(1))
exact = sdof_linear_response(space.system, load, space.grid)
num = sdof_newmark_response(space.system, load, space.grid)
t = space.grid.times
print(f"{len(t)} observation points, step {t[1] - t[0]:.3f} s")
for name in ("displacement", "acceleration"):
    e, n = getattr(exact, name)[0], getattr(num, name)[0]
    print(f"{name:13s} peak {np.abs(e).max():.4g}   max |exact - newmark| {np.abs(e - n).max():.3e}")

# %% Step size and truncation error
# Average-acceleration Newmark is second order, so halving the fine step
# should cut the acceleration discrepancy by about four.
for dt in (2e-3, 1e-3, 5e-4):
    grid = space.grid.with_fine_step(dt)
    n = sdof_newmark_response(space.system, load, grid)
    err = np.abs(exact.acceleration - n.acceleration).max()
    print(f"fine step {dt:.0e} s: max acceleration error {err:.3e}")

# %% Frame natural frequencies
modes = mdof_modal_data(dataspace(6).system)
print("natural frequencies [rad/s]:", np.round(modes.natural_freqs, 3))

# %% Batch checks
for result in sdof_oracle_check(100) + mdof_oracle_check(50) + [sdof_residual_check(), tangent_fd_check()]:
    print(result.line())
