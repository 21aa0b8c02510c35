"""Galerkin system for transport-noise Navier-Stokes on the 2-d torus.

In the divergence-free basis ``h_i`` the coefficients solve

    dc_i/dt = -sum_{j,l} B[j,l,i] c_j c_l - nu lambda_i c_i + sum_k sum_j A[k,j,i] c_j dz^k/dt

with ``B[j,l,i] = b(h_j, h_l, h_i)`` and ``A[k,j,i] = ((sigma_k . grad) h_j, h_i)``.
The driver is piecewise linear, so on each segment the system is an ODE with a
constant slope, integrated by classical RK4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BasisMismatch, EnergyViolation, NumericalBlowup, OracleUnavailable
from .roughpath import GridPath, write_rows
from .spectral import SIN, ModeBasis, SigmaFamily, SpectralField, convective_tensor, mode_norm, operator_matrix

BLOWUP = 1e6


@dataclass(frozen=True)
class GalerkinTensors:
    basis: ModeBasis
    sigma: SigmaFamily
    nu: float
    B: np.ndarray     # (M, M, M), [j, l, i]
    A: np.ndarray     # (K, M, M), [k, j, i]

    @property
    def M(self) -> int:
        return len(self.basis)

    @property
    def lam(self) -> np.ndarray:
        return self.basis.eigenvalues

    def nonlinear(self, c: np.ndarray) -> np.ndarray:
        """``sum_{j,l} B[j,l,i] c_j c_l``."""
        return np.outer(c, c).ravel() @ self.B.reshape(self.M * self.M, self.M)

    def drift(self, c: np.ndarray) -> np.ndarray:
        return -self.nonlinear(c) - self.nu * self.lam * c

    def noise_matrix(self, zdot: np.ndarray) -> np.ndarray:
        """Matrix ``L`` with ``(L c)_i = sum_k sum_j A[k,j,i] c_j zdot_k``."""
        return np.einsum("k,kji->ij", np.asarray(zdot, dtype=float), self.A)


def assemble_tensors(basis: ModeBasis, sigma: SigmaFamily, nu: float, nonlinear: bool = True) -> GalerkinTensors:
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    if not basis.solenoidal.all():
        raise BasisMismatch("Galerkin basis must be divergence free")
    M = len(basis)
    B = convective_tensor(basis, basis) if nonlinear else np.zeros((M, M, M))
    A = np.stack([operator_matrix(sigma.as_field(k), basis, basis).T for k in range(sigma.K)]) \
        if sigma.K else np.zeros((0, M, M))
    return GalerkinTensors(basis, sigma, float(nu), B, A)


def step(c: np.ndarray, dt: float, zdot: np.ndarray, tensors: GalerkinTensors,
         noise: np.ndarray | None = None) -> np.ndarray:
    """One RK4 step with the driver slope ``zdot`` frozen over the step."""
    L = tensors.noise_matrix(zdot) if noise is None else noise

    def f(x):
        return tensors.drift(x) + L @ x

    k1 = f(c)
    k2 = f(c + 0.5 * dt * k1)
    k3 = f(c + 0.5 * dt * k2)
    k4 = f(c + dt * k3)
    out = c + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)) or np.linalg.norm(out) > BLOWUP:
        raise NumericalBlowup(f"coefficient norm exceeded {BLOWUP:g}")
    return out


def cumulative_simpson(f: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Running integral on a grid whose consecutive pairs of steps have equal length.

    Even nodes use composite Simpson; odd nodes add a third-order half-panel rule.
    """
    n = times.size
    out = np.zeros_like(f, dtype=float)
    for j in range(2, n, 2):
        h = times[j] - times[j - 1]
        out[j] = out[j - 2] + h / 3.0 * (f[j - 2] + 4 * f[j - 1] + f[j])
    for j in range(1, n - 1, 2):
        h = times[j] - times[j - 1]
        out[j] = out[j - 1] + h / 12.0 * (5 * f[j - 1] + 8 * f[j] - f[j + 1])
    return out


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray          # every RK4 node
    states: np.ndarray         # (n, M)
    energy: np.ndarray         # |u_t|^2
    dissipation: np.ndarray    # int_0^t |grad u|^2 dr
    grid_index: np.ndarray     # positions of the driver grid nodes in ``times``
    driver: GridPath           # driver restricted to [0, T]
    tensors: GalerkinTensors
    substeps: int

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def grid_times(self) -> np.ndarray:
        return self.times[self.grid_index]

    @property
    def grid_states(self) -> np.ndarray:
        return self.states[self.grid_index]

    def field(self, j: int = -1) -> SpectralField:
        return self.tensors.basis.synthesize(self.states[j])

    def energy_defect(self) -> np.ndarray:
        """``|u_t|^2 + 2 nu int_0^t |grad u|^2 - |u_0|^2`` at every node."""
        return self.energy + 2 * self.tensors.nu * self.dissipation - self.energy[0]


def project_initial(u0: SpectralField, basis: ModeBasis, tol: float = 1e-12) -> np.ndarray:
    if u0.coef.size and np.any(~u0.wavevectors.any(axis=1) & (np.abs(u0.coef).sum(axis=1) > 0)):
        raise BasisMismatch("initial datum has a non-zero mean")
    c = basis.coordinates(u0)
    total = float(np.sum(u0.coef ** 2))
    if total - float(c @ c) > tol * max(1.0, total):
        raise BasisMismatch("initial datum has modes outside the Galerkin space")
    return c


def run(u0, driver: GridPath, T: float, tensors: GalerkinTensors, substeps: int = 8,
        energy_tol: float = 1e-8) -> Trajectory:
    """Integrate from ``u0`` (field or coefficients) along the piecewise-linear ``driver`` up to ``T``."""
    if substeps < 2 or substeps % 2:
        raise ValueError("substeps per segment must be an even number >= 2")
    if driver.K != tensors.sigma.K:
        raise BasisMismatch(f"driver has {driver.K} channels, noise has {tensors.sigma.K}")
    c = project_initial(u0, tensors.basis) if isinstance(u0, SpectralField) else np.asarray(u0, float).copy()
    if c.shape != (tensors.M,):
        raise BasisMismatch("coefficient vector does not match the basis")
    last = int(np.searchsorted(driver.times, T - 1e-12 * max(1.0, T)))
    if last >= driver.n or abs(driver.times[last] - T) > 1e-12 * max(1.0, T) or last == 0:
        raise ValueError(f"T={T} is not a positive node of the driver grid")
    drv = GridPath(driver.times[: last + 1], driver.values[: last + 1])
    nseg = last
    times = np.empty(nseg * substeps + 1)
    states = np.empty((nseg * substeps + 1, tensors.M))
    times[0], states[0] = 0.0, c
    j = 0
    for m in range(nseg):
        t0, t1 = drv.times[m], drv.times[m + 1]
        zdot = (drv.values[m + 1] - drv.values[m]) / (t1 - t0)
        L = tensors.noise_matrix(zdot)
        dt = (t1 - t0) / substeps
        for q in range(substeps):
            try:
                c = step(c, dt, zdot, tensors, noise=L)
            except NumericalBlowup as exc:
                raise NumericalBlowup(f"{exc} at t={t0 + (q + 1) * dt:.6g}") from None
            j += 1
            times[j] = t1 if q == substeps - 1 else t0 + (q + 1) * dt
            states[j] = c
    energy = (states ** 2).sum(axis=1)
    grad2 = (tensors.lam[None, :] * states ** 2).sum(axis=1)
    diss = cumulative_simpson(grad2, times)
    traj = Trajectory(times, states, energy, diss, np.arange(0, times.size, substeps), drv, tensors, substeps)
    excess = energy[-1] + 2 * tensors.nu * diss[-1] - energy[0]
    if excess > energy_tol * max(1.0, energy[0]):
        raise EnergyViolation(f"terminal energy exceeds the initial energy by {excess:.3e}")
    return traj


def taylor_green(shift=(0.0, 0.0), amplitude: float = 1.0) -> SpectralField:
    """``amplitude * TG(x + shift)`` with ``TG = (cos x sin y, -sin x cos y)``."""
    a1, a2 = shift
    c = mode_norm(np.array([[1, 1]]))[0]
    phases = (a1 + a2, a1 - a2)
    vecs = (np.array([0.5, -0.5]), np.array([-0.5, -0.5]))
    wv, par, coef = [], [], []
    for n, ph, v in zip(([1, 1], [1, -1]), phases, vecs):
        # sin(n.x + ph) = cos(ph) sin(n.x) + sin(ph) cos(n.x)
        wv += [n, n]
        par += [SIN, 1 - SIN]
        coef += [amplitude * math.cos(ph) * v / c, amplitude * math.sin(ph) * v / c]
    return SpectralField.from_terms(np.array(wv), np.array(par), np.array(coef), divfree=True)


def exact_oracle_shifted_tg(sigma: SigmaFamily, z_t, nu: float, t: float) -> SpectralField:
    """Closed-form solution for constant noise from Taylor-Green data: a decaying translate."""
    if sigma.d != 2 or not sigma.is_constant:
        raise OracleUnavailable("the translation oracle needs constant noise coefficients in 2-d")
    z_t = np.atleast_1d(np.asarray(z_t, dtype=float))
    if z_t.size != sigma.K:
        raise OracleUnavailable("driver value has the wrong number of channels")
    shift = sum((np.asarray(s) * zk for s, zk in zip(sigma.channels, z_t)), np.zeros(2))
    return taylor_green(shift, math.exp(-2.0 * nu * t))


def write_trajectory_csv(traj: Trajectory, file, every: int = 1) -> None:
    M = traj.tensors.M
    header = ["t"] + [f"c_{i + 1}" for i in range(M)] + ["energy", "dissipation_integral"]
    idx = range(0, traj.times.size, every)
    write_rows(file, header, ([float(traj.times[j]), *map(float, traj.states[j]), float(traj.energy[j]),
                               float(traj.dissipation[j])] for j in idx))
