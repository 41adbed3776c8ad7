"""Reference solvers for the SDOF and six-story shear-frame systems.

Two independent routes are provided for every linear system: closed-form
(harmonic forcing of an underdamped oscillator, superposed over modes for the
frame) and average-acceleration Newmark integration with Newton iterations.
The Newmark route is the only one available once the cubic springs are active.

All routines accept loads with leading batch dimensions so that whole datasets
can be generated without Python-level loops over samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * np.pi


class NewtonConvergenceError(RuntimeError):
    """Newton iterations failed inside a Newmark step."""

    def __init__(self, step: int, sample: int | None = None, residual: float = np.nan):
        self.step = step
        self.sample = sample
        self.residual = residual
        where = f"step {step}" if sample is None else f"step {step}, sample {sample}"
        super().__init__(f"Newton iterations did not converge at {where} (residual {residual:.3e})")


class EigenConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class HarmonicLoadParams:
    """Sum-of-sines load ``p(t) = sum_i a_i sin(w_i t + phi_i)``.

    Arrays may carry leading batch dimensions; the last axis indexes the
    harmonic terms.
    """

    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        if not (self.amplitudes.shape == self.frequencies.shape == self.phases.shape):
            raise ValueError("amplitudes, frequencies and phases must have the same shape")
        if self.amplitudes.ndim == 0:
            raise ValueError("load parameters must be at least 1-D")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be non-negative")
        if np.any(self.frequencies < 0):
            raise ValueError("frequencies must be non-negative")
        if np.any(self.phases < 0) or np.any(self.phases > TWO_PI):
            raise ValueError("phases must lie in [0, 2*pi)")

    @property
    def n_terms(self) -> int:
        return self.amplitudes.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.amplitudes.shape[:-1]

    def __getitem__(self, idx) -> "HarmonicLoadParams":
        return HarmonicLoadParams(self.amplitudes[idx], self.frequencies[idx], self.phases[idx])

    def scaled(self, factor: float) -> "HarmonicLoadParams":
        return HarmonicLoadParams(factor * self.amplitudes, self.frequencies, self.phases)

    def concat(self, other: "HarmonicLoadParams") -> "HarmonicLoadParams":
        """Superpose two loads by concatenating their terms."""
        return HarmonicLoadParams(
            np.concatenate([self.amplitudes, other.amplitudes], axis=-1),
            np.concatenate([self.frequencies, other.frequencies], axis=-1),
            np.concatenate([self.phases, other.phases], axis=-1),
        )


@dataclass(frozen=True)
class SdofParams:
    mass: float
    damping: float
    stiffness: float
    cubic_coeff: float = 0.0

    def __post_init__(self):
        if self.mass <= 0 or self.stiffness <= 0:
            raise ValueError("mass and stiffness must be positive")
        if self.damping < 0 or self.cubic_coeff < 0:
            raise ValueError("damping and cubic coefficient must be non-negative")

    @classmethod
    def default(cls, cubic_ratio: float = 0.0) -> "SdofParams":
        """m = 13.5 kg, T_n = 0.5 s, 2% damping; ``b = cubic_ratio * k``."""
        m, wn, xi = 13.5, TWO_PI / 0.5, 0.02
        k = m * wn**2
        return cls(mass=m, damping=2.0 * m * wn * xi, stiffness=k, cubic_coeff=cubic_ratio * k)

    @property
    def natural_freq(self) -> float:
        return float(np.sqrt(self.stiffness / self.mass))

    @property
    def damping_ratio(self) -> float:
        return self.damping / (2.0 * self.mass * self.natural_freq)

    @property
    def is_linear(self) -> bool:
        return self.cubic_coeff == 0.0


@dataclass(frozen=True)
class MdofParams:
    """Six-story shear frame; masses are given per pair of stories."""

    story_masses: tuple[float, float, float] = (14000.0, 12000.0, 10000.0)
    youngs_modulus: float = 2e11
    moment_of_inertia: float = 4.2e-4
    story_height: float = 3.5
    damping_ratio: float = 0.02
    cubic_coeff: float = 0.0

    def __post_init__(self):
        vals = [*self.story_masses, self.youngs_modulus, self.moment_of_inertia,
                self.story_height, self.damping_ratio]
        if len(self.story_masses) != 3 or any(v <= 0 for v in vals):
            raise ValueError("MDOF physical parameters must be positive")
        if self.cubic_coeff < 0:
            raise ValueError("cubic coefficient must be non-negative")

    @classmethod
    def default(cls, cubic_ratio: float = 0.0) -> "MdofParams":
        base = cls()
        return cls(cubic_coeff=cubic_ratio * base.story_stiffness)

    @property
    def ei_over_h3(self) -> float:
        return self.youngs_modulus * self.moment_of_inertia / self.story_height**3

    @property
    def story_stiffness(self) -> float:
        return 24.0 * self.ei_over_h3

    @property
    def is_linear(self) -> bool:
        return self.cubic_coeff == 0.0

    @property
    def n_dof(self) -> int:
        return 6


@dataclass(frozen=True)
class TimeGrid:
    duration: float
    obs_step: float
    fine_step: float = 1e-3

    def __post_init__(self):
        if self.duration <= 0 or self.obs_step <= 0 or self.fine_step <= 0:
            raise ValueError("time grid steps must be positive")
        if self.fine_step > self.obs_step:
            raise ValueError("fine_step must not exceed obs_step")
        _integer_ratio(self.duration, self.obs_step, "obs_step must divide duration")
        _integer_ratio(self.obs_step, self.fine_step, "fine_step must divide obs_step")

    @property
    def n_steps(self) -> int:
        return _integer_ratio(self.duration, self.obs_step)

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def substeps(self) -> int:
        return _integer_ratio(self.obs_step, self.fine_step)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.obs_step

    def with_fine_step(self, fine_step: float) -> "TimeGrid":
        return TimeGrid(self.duration, self.obs_step, fine_step)


def _integer_ratio(num: float, den: float, msg: str = "non-integer ratio") -> int:
    r = num / den
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        raise ValueError(msg)
    return k


@dataclass
class ResponseSeries:
    """Displacement and acceleration on the observation grid.

    For MDOF Newmark output the arrays carry a trailing DOF axis.
    """

    displacement: np.ndarray
    acceleration: np.ndarray
    velocity: np.ndarray | None = None


@dataclass
class SdofAnalyticCoeffs:
    decay: float
    damped_freq: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray


@dataclass
class ModalData:
    natural_freqs: np.ndarray          # (6,) ascending
    shapes: np.ndarray                 # (6, 6), column i is the mass-normalized mode i
    damping_ratios: np.ndarray = field(default=None)
    decays: np.ndarray = field(default=None)
    damped_freqs: np.ndarray = field(default=None)
    participation: np.ndarray = field(default=None)


# ---------------------------------------------------------------------------
# Loads
# ---------------------------------------------------------------------------


def eval_load(load: HarmonicLoadParams, t) -> np.ndarray:
    """Evaluate the harmonic load at time(s) ``t``.

    Returns an array of shape ``load.batch_shape + np.shape(t)``.
    """
    t = np.asarray(t, dtype=np.float64)
    a = load.amplitudes[..., None, :]
    w = load.frequencies[..., None, :]
    ph = load.phases[..., None, :]
    tt = t.reshape(-1, 1)
    out = np.sum(a * np.sin(w * tt + ph), axis=-1)
    return out.reshape(load.batch_shape + t.shape)


# ---------------------------------------------------------------------------
# Closed-form damped oscillator under harmonic forcing
# ---------------------------------------------------------------------------


def _harmonic_coeffs(mass, damping, stiffness, amps, freqs, phases):
    """Coefficients of ``m u'' + c u' + k u = sum a sin(w t + phi)`` from rest.

    ``amps`` may be negative (modal participation factors carry a sign).
    Returns decay, damped frequency and the A, B, C..F coefficient arrays.
    """
    wn = np.sqrt(stiffness / mass)
    xi = damping / (2.0 * mass * wn)
    decay = damping / (2.0 * mass)
    disc = 4.0 * mass * stiffness - damping**2
    if np.any(disc <= 0):
        raise ValueError("closed-form solution requires an underdamped system (c^2 < 4mk)")
    zeta = np.sqrt(disc) / (2.0 * mass)

    r = freqs / wn
    one_r2 = 1.0 - r**2
    two_xr = 2.0 * xi * r
    den = one_r2**2 + two_xr**2
    ac = amps * np.cos(phases) / stiffness
    as_ = amps * np.sin(phases) / stiffness

    C = ac * one_r2 / den
    D = -ac * two_xr / den
    E = as_ * two_xr / den
    F = as_ * one_r2 / den

    # u(0) = 0 and u'(0) = 0 fix the homogeneous part.
    A = -np.sum(D + F, axis=-1)
    B = (decay * A - np.sum(freqs * (C + E), axis=-1)) / zeta
    return decay, zeta, A, B, C, D, E, F


def _harmonic_response(mass, damping, stiffness, amps, freqs, phases, t):
    """Displacement and acceleration of the closed-form solution on times ``t``.

    ``amps`` etc. have shape (..., Np); outputs have shape (..., len(t)).
    """
    decay, zeta, A, B, C, D, E, F = _harmonic_coeffs(mass, damping, stiffness, amps, freqs, phases)
    t = np.asarray(t, dtype=np.float64)
    env = np.exp(-decay * t)
    cz, sz = np.cos(zeta * t), np.sin(zeta * t)
    A_ = np.expand_dims(A, -1)
    B_ = np.expand_dims(B, -1)
    hom = A_ * cz + B_ * sz
    hom_d = -A_ * zeta * sz + B_ * zeta * cz
    hom_dd = -A_ * zeta**2 * cz - B_ * zeta**2 * sz
    u = env * hom
    a = decay**2 * env * hom - 2.0 * decay * env * hom_d + env * hom_dd

    wt = freqs[..., :, None] * t
    s, c = np.sin(wt), np.cos(wt)
    S = (C + E)[..., :, None]
    Cc = (D + F)[..., :, None]
    w2 = (freqs**2)[..., :, None]
    u = u + np.sum(S * s + Cc * c, axis=-2)
    a = a - np.sum(w2 * (S * s + Cc * c), axis=-2)
    return u, a


def sdof_coefficients(params: SdofParams, load: HarmonicLoadParams) -> SdofAnalyticCoeffs:
    decay, zeta, A, B, C, D, E, F = _harmonic_coeffs(
        params.mass, params.damping, params.stiffness,
        load.amplitudes, load.frequencies, load.phases)
    return SdofAnalyticCoeffs(float(decay), float(zeta), A, B, C, D, E, F)


def sdof_linear_response(params: SdofParams, load: HarmonicLoadParams, grid: TimeGrid) -> ResponseSeries:
    """Closed-form response of the linear SDOF oscillator starting from rest."""
    if not params.is_linear:
        raise ValueError("closed-form SDOF solution requires cubic_coeff = 0")
    u, a = _harmonic_response(params.mass, params.damping, params.stiffness,
                              load.amplitudes, load.frequencies, load.phases, grid.times)
    u[..., 0] = 0.0
    return ResponseSeries(u, a)


# ---------------------------------------------------------------------------
# Shear frame
# ---------------------------------------------------------------------------


def _mdof_mass_stiffness(params: MdofParams) -> tuple[np.ndarray, np.ndarray]:
    m1, m2, m3 = params.story_masses
    M = np.diag([m1, m1, m2, m2, m3, m3]).astype(np.float64)
    K = 48.0 * np.eye(6) - 24.0 * (np.eye(6, k=1) + np.eye(6, k=-1))
    K[5, 5] = 24.0
    return M, params.ei_over_h3 * K


def rayleigh_coefficients(w1: float, w2: float, xi: float) -> tuple[float, float]:
    return 2.0 * xi * w1 * w2 / (w1 + w2), 2.0 * xi / (w1 + w2)


def assemble_mdof(params: MdofParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mass, linear stiffness and Rayleigh damping matrices of the frame."""
    M, K = _mdof_mass_stiffness(params)
    modes = eig_sym_positive(M, K)
    a0, a1 = rayleigh_coefficients(modes.natural_freqs[0], modes.natural_freqs[1], params.damping_ratio)
    return M, K, a0 * M + a1 * K


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Returns (eigenvalues, eigenvectors) unsorted; columns of the second output
    are the eigenvectors. Stops once the off-diagonal Frobenius norm drops
    below ``tol`` times the Frobenius norm of ``A``.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(A, A.T, rtol=1e-12, atol=0.0):
        raise ValueError("matrix must be symmetric")
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V

    offdiag = ~np.eye(n, dtype=bool)

    def off(X):
        return np.sqrt(np.sum(X[offdiag] ** 2))

    for _ in range(max_sweeps):
        if off(A) < tol * scale:
            return np.diag(A).copy(), V
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t**2 + 1.0)
                s = t * c
                # A <- J^T A J with the (p, q) rotation
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    if off(A) < tol * scale:
        return np.diag(A).copy(), V
    raise EigenConvergenceError(f"Jacobi sweeps did not converge within {max_sweeps} sweeps")


def eig_sym_positive(M: np.ndarray, K: np.ndarray) -> ModalData:
    """Natural frequencies and mass-normalized mode shapes of ``K phi = w^2 M phi``.

    ``M`` must be diagonal and positive.
    """
    M = np.asarray(M, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    d = np.diag(M)
    if np.any(d <= 0) or np.any(M - np.diag(d)):
        raise ValueError("mass matrix must be diagonal with positive entries")
    s = 1.0 / np.sqrt(d)
    lam, psi = jacobi_eigh(s[:, None] * K * s[None, :])
    order = np.argsort(lam)
    lam, psi = lam[order], psi[:, order]
    phi = s[:, None] * psi
    phi = phi / np.sqrt(np.einsum("ji,j,ji->i", phi, d, phi))
    # Deterministic sign: the largest-magnitude entry of each shape is positive.
    idx = np.argmax(np.abs(phi), axis=0)
    phi = phi * np.sign(phi[idx, np.arange(phi.shape[1])])
    return ModalData(natural_freqs=np.sqrt(np.clip(lam, 0.0, None)), shapes=phi)


def mdof_modal_data(params: MdofParams) -> ModalData:
    M, K = _mdof_mass_stiffness(params)
    modes = eig_sym_positive(M, K)
    wn = modes.natural_freqs
    a0, a1 = rayleigh_coefficients(wn[0], wn[1], params.damping_ratio)
    decays = 0.5 * (a0 + a1 * wn**2)
    modes.damping_ratios = decays / wn
    modes.decays = decays
    modes.damped_freqs = np.sqrt(wn**2 - decays**2)
    modes.participation = -modes.shapes.T @ np.diag(M)
    return modes


def mdof_linear_response(params: MdofParams, ground_accel: HarmonicLoadParams, grid: TimeGrid,
                         dof: int = 6) -> ResponseSeries:
    """Modal-superposition response of the linear frame at story ``dof`` (1-based)."""
    if not params.is_linear:
        raise ValueError("closed-form MDOF solution requires cubic_coeff = 0")
    if not 1 <= dof <= 6:
        raise ValueError(f"dof must be in 1..6, got {dof}")
    modes = mdof_modal_data(params)
    t = grid.times
    u = 0.0
    a = 0.0
    for i in range(6):
        wn = modes.natural_freqs[i]
        qi, qi_dd = _harmonic_response(
            1.0, 2.0 * modes.decays[i], wn**2,
            modes.participation[i] * ground_accel.amplitudes,
            ground_accel.frequencies, ground_accel.phases, t)
        u = u + modes.shapes[dof - 1, i] * qi
        a = a + modes.shapes[dof - 1, i] * qi_dd
    u[..., 0] = 0.0
    return ResponseSeries(u, a)


def mdof_internal_force(params: MdofParams, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Restoring force of the cubic shear frame and its tangent.

    ``u`` has shape (..., 6). Returns force (..., 6) and tangent (..., 6, 6).
    """
    u = np.asarray(u, dtype=np.float64)
    k, b = params.story_stiffness, params.cubic_coeff
    drift = np.diff(u, axis=-1, prepend=0.0)          # story i drift u_i - u_{i-1}, u_0 = 0
    g = k * drift + b * drift**3
    dg = k + 3.0 * b * drift**2
    g_next = np.concatenate([g[..., 1:], np.zeros_like(g[..., :1])], axis=-1)
    force = g - g_next
    dg_next = np.concatenate([dg[..., 1:], np.zeros_like(dg[..., :1])], axis=-1)
    tangent = np.zeros(u.shape + (6,))
    idx = np.arange(6)
    tangent[..., idx, idx] = dg + dg_next
    tangent[..., idx[:-1], idx[1:]] = -dg[..., 1:]
    tangent[..., idx[1:], idx[:-1]] = -dg[..., 1:]
    return force, tangent


# ---------------------------------------------------------------------------
# Newmark integration
# ---------------------------------------------------------------------------

InternalForce = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def newmark_integrate(mass: np.ndarray, damping: np.ndarray, internal_force: InternalForce,
                      load_fn: Callable[[float], np.ndarray], grid: TimeGrid, *,
                      beta: float = 0.25, gamma: float = 0.5,
                      tol: float = 1e-10, max_iter: int = 20) -> ResponseSeries:
    """Integrate ``M u'' + C u' + F(u) = p(t)`` from rest.

    ``load_fn(t)`` returns the load with shape (..., ndof); leading dimensions
    are treated as independent samples integrated in lockstep. The result
    arrays have shape (..., n_points, ndof) and hold the integrator's state at
    the observation instants.
    """
    M = np.atleast_2d(np.asarray(mass, dtype=np.float64))
    Cm = np.atleast_2d(np.asarray(damping, dtype=np.float64))
    ndof = M.shape[0]
    dt = grid.fine_step
    sub = grid.substeps
    n_fine = grid.n_steps * sub

    p = np.asarray(load_fn(0.0), dtype=np.float64)
    batch = p.shape[:-1]
    u = np.zeros(batch + (ndof,))
    v = np.zeros_like(u)
    f0, _ = internal_force(u)
    a = np.linalg.solve(M, (p - f0)[..., None])[..., 0] if ndof > 1 else (p - f0) / M[0, 0]

    U = np.empty(batch + (grid.n_points, ndof))
    V = np.empty_like(U)
    Acc = np.empty_like(U)
    U[..., 0, :], V[..., 0, :], Acc[..., 0, :] = u, v, a

    c_m = 1.0 / (beta * dt**2)
    c_c = gamma / (beta * dt)
    for step in range(1, n_fine + 1):
        t = step * dt
        p = np.asarray(load_fn(t), dtype=np.float64)
        u_pred = u + dt * v + dt**2 * (0.5 - beta) * a
        v_pred = v + dt * (1.0 - gamma) * a
        u_new = u_pred.copy()
        for it in range(max_iter + 1):
            a_new = c_m * (u_new - u_pred)
            v_new = v_pred + gamma * dt * a_new
            f, kt = internal_force(u_new)
            inertia = a_new @ M.T
            damp = v_new @ Cm.T
            R = p - inertia - damp - f
            ref = np.maximum.reduce([np.abs(p).max(-1), np.abs(f).max(-1),
                                     np.abs(inertia).max(-1), np.abs(damp).max(-1)])
            err = np.abs(R).max(-1)
            if np.all(err <= tol * ref):
                break
            if it == max_iter:
                worst = np.unravel_index(np.argmax(err / np.where(ref > 0, ref, 1.0)), err.shape)
                sample = int(np.ravel_multi_index(worst, err.shape)) if err.shape else None
                raise NewtonConvergenceError(step, sample, float(np.max(err)))
            kt_eff = kt + c_m * M + c_c * Cm
            if ndof == 1:
                du = R / kt_eff[..., 0]
            else:
                du = np.linalg.solve(kt_eff, R[..., None])[..., 0]
            u_new = u_new + du
        u, v, a = u_new, v_new, a_new
        if step % sub == 0:
            k = step // sub
            U[..., k, :], V[..., k, :], Acc[..., k, :] = u, v, a
    return ResponseSeries(U, Acc, V)


def _load_vector_fn(load: HarmonicLoadParams, direction: np.ndarray):
    """Load callable returning eval_load(t) times a fixed spatial pattern."""
    direction = np.asarray(direction, dtype=np.float64)

    def fn(t):
        return eval_load(load, t)[..., None] * direction

    return fn


def sdof_newmark_response(params: SdofParams, load: HarmonicLoadParams, grid: TimeGrid,
                          **kwargs) -> ResponseSeries:
    """Newmark response of the (possibly cubic) SDOF oscillator; arrays (..., n)."""
    k, b = params.stiffness, params.cubic_coeff

    def fint(u):
        return k * u + b * u**3, (k + 3.0 * b * u**2)[..., None]

    res = newmark_integrate([[params.mass]], [[params.damping]], fint,
                            _load_vector_fn(load, [1.0]), grid, **kwargs)
    return ResponseSeries(res.displacement[..., 0], res.acceleration[..., 0], res.velocity[..., 0])


def mdof_newmark_response(params: MdofParams, ground_accel: HarmonicLoadParams, grid: TimeGrid,
                          dof: int | None = 6, **kwargs) -> ResponseSeries:
    """Newmark response of the (possibly cubic) frame.

    With ``dof=None`` all six stories are returned along a trailing axis.
    """
    if dof is not None and not 1 <= dof <= 6:
        raise ValueError(f"dof must be in 1..6, got {dof}")
    M, _, C = assemble_mdof(params)
    res = newmark_integrate(M, C, lambda u: mdof_internal_force(params, u),
                            _load_vector_fn(ground_accel, -np.diag(M)), grid, **kwargs)
    if dof is None:
        return res
    j = dof - 1
    return ResponseSeries(res.displacement[..., j], res.acceleration[..., j], res.velocity[..., j])
