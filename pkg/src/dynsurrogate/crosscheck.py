"""Cross-checks between the closed-form and time-stepping solvers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    MdofParams,
    eval_load,
    mdof_internal_force,
    mdof_linear_response,
    mdof_modal_data,
    mdof_newmark_response,
    sdof_linear_response,
    sdof_newmark_response,
)
from .sampling import dataspace, sample_loads


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.value < self.limit)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.value:.3e} < {self.limit:.1e}{extra}"


def sdof_oracle_check(n_loads: int = 100, seed: int = 0) -> list[CheckResult]:
    """Max-abs closed-form vs Newmark difference on random Case-1 loads."""
    space = dataspace(1)
    loads = sample_loads(space, "test", seed, np.arange(n_loads))
    exact = sdof_linear_response(space.system, loads, space.grid)
    num = sdof_newmark_response(space.system, loads, space.grid)
    du = np.abs(exact.displacement - num.displacement).max()
    da = np.abs(exact.acceleration - num.acceleration).max()
    return [CheckResult("sdof displacement max-abs [m]", du, 1e-4),
            CheckResult("sdof acceleration max-abs [m/s^2]", da, 1e-4,
                        f"peak |a| {np.abs(exact.acceleration).max():.3g}")]


def mdof_oracle_check(n_loads: int = 50, seed: int = 0, dof: int = 6) -> list[CheckResult]:
    """Per-sample relative error (percent) of modal vs Newmark response at ``dof``."""
    space = dataspace(6)
    loads = sample_loads(space, "test", seed, np.arange(n_loads))
    exact = mdof_linear_response(space.system, loads, space.grid, dof)
    num = mdof_newmark_response(space.system, loads, space.grid, dof)

    def rel(a, b):
        return 100 * np.linalg.norm(a - b, axis=-1) / np.linalg.norm(a, axis=-1)

    ru = rel(exact.displacement, num.displacement)
    ra = rel(exact.acceleration, num.acceleration)
    w = mdof_modal_data(space.system).natural_freqs
    return [
        CheckResult("mdof displacement relative error [%]", ru.max(), 0.5, f"mean {ru.mean():.3f}%"),
        CheckResult("mdof acceleration relative error [%]", ra.max(), 0.5, f"mean {ra.mean():.3f}%"),
        CheckResult("first natural frequency deviation [%]", 100 * abs(w[0] / 15.73 - 1), 0.5, f"{w[0]:.4f} rad/s"),
        CheckResult("second natural frequency deviation [%]", 100 * abs(w[1] / 44.16 - 1), 0.5, f"{w[1]:.4f} rad/s"),
    ]


def sdof_residual_check(n_loads: int = 20, seed: int = 0, cubic_ratio: float = 1.0) -> CheckResult:
    """Equation-of-motion residual of Newmark states for the cubic oscillator."""
    space = dataspace(5, cubic_ratio=cubic_ratio)
    loads = sample_loads(space, "test", seed, np.arange(n_loads))
    res = sdof_newmark_response(space.system, loads, space.grid)
    s = space.system
    u, v, a = res.displacement, res.velocity, res.acceleration
    p = eval_load(loads, space.grid.times)
    r = s.mass * a + s.damping * v + s.stiffness * u + s.cubic_coeff * u**3 - p
    return CheckResult("cubic sdof residual [N]", np.abs(r).max(), 1e-6, f"peak |p| {np.abs(p).max():.3g} N")


def tangent_fd_check(params: MdofParams | None = None, n_trials: int = 10, seed: int = 0) -> CheckResult:
    """Worst relative mismatch between the analytic tangent and central differences."""
    params = params or MdofParams.default(1.0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        u = rng.normal(scale=0.05, size=6)
        _, kt = mdof_internal_force(params, u)
        fd = np.empty((6, 6))
        for j in range(6):
            h = 1e-6 * max(1.0, abs(u[j]))
            e = np.zeros(6)
            e[j] = h
            fd[:, j] = (mdof_internal_force(params, u + e)[0] - mdof_internal_force(params, u - e)[0]) / (2 * h)
        worst = max(worst, np.abs(fd - kt).max() / np.abs(kt).max())
    return CheckResult("frame tangent vs finite differences (relative)", worst, 1e-6)


def run_checks(case: int, n_loads: int | None = None, seed: int = 0) -> list[CheckResult]:
    if case == 1:
        return sdof_oracle_check(n_loads or 100, seed)
    if case == 6:
        return mdof_oracle_check(n_loads or 50, seed)
    if case == 5:
        return [sdof_residual_check(n_loads or 20, seed), tangent_fd_check(seed=seed)]
    raise ValueError(f"no cross-check defined for case {case}; choose 1, 5 or 6")
