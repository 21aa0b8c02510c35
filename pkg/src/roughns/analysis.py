"""Post-processing of Galerkin trajectories: drift, remainders, pressure, energy and stability.

Test functions are basis modes.  The divergence-free remainder is tested
against ``h_i`` and the gradient remainder against the gradient modes ``g_i``,
so every remainder is a coefficient vector; its ``H^-a`` dual norm is
``sqrt(sum_i (1 + |n_i|^2)^-a r_i^2)``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DriverMismatch, GridMismatch
from .galerkin import Trajectory, cumulative_simpson
from .roughpath import GridControl, SewingResult, lift_control, p_variation, sewing_integrate, variation_control, write_rows
from .spectral import advect, convective, convective_tensor, inner
from .urd import DriverMatrices

SLOPE_LEVELS = (3, 8)


def dual_norm(r: np.ndarray, lam: np.ndarray, a: float) -> np.ndarray:
    return np.sqrt((r ** 2 * (1.0 + lam) ** (-a)).sum(axis=-1))


def _grid_integral(traj: Trajectory, values: np.ndarray) -> np.ndarray:
    """Running integral of per-node ``values`` sampled at the driver grid nodes."""
    return cumulative_simpson(values, traj.times)[traj.grid_index]


@dataclass(frozen=True)
class MuResult:
    times: np.ndarray
    mu: np.ndarray        # (n, M): mu_t(h_i) = -int_0^t [nu (grad u, grad h_i) + B_P(u)(h_i)] dr
    omega: GridControl    # int_s^t (1 + |u_r|_1)^2 dr


def compute_mu(traj: Trajectory) -> MuResult:
    tens = traj.tensors
    drift = np.array([tens.drift(c) for c in traj.states])
    h1 = np.sqrt(((1.0 + tens.lam) * traj.states ** 2).sum(axis=1))
    W = _grid_integral(traj, (1.0 + h1) ** 2)
    omega = np.clip(W[None, :] - W[:, None], 0.0, None)
    return MuResult(traj.grid_times, _grid_integral(traj, drift), GridControl(traj.grid_times, omega))


def _check_grid(traj: Trajectory, drivers: DriverMatrices) -> None:
    gt, lt = traj.grid_times, drivers.lift.times
    if gt.size != lt.size or not np.allclose(gt, lt, rtol=0, atol=1e-12 * max(1.0, gt[-1])):
        raise GridMismatch("trajectory and driver matrices live on different grids")
    if not np.allclose(traj.driver.values, drivers.lift.path.values, rtol=0, atol=1e-12):
        raise GridMismatch("trajectory was driven by a different path")
    if len(traj.tensors.basis) != drivers.M:
        raise GridMismatch("trajectory and driver matrices use different bases")


@dataclass
class _Precomputed:
    c: np.ndarray
    F: np.ndarray      # running integral of the drift
    BQ: np.ndarray     # running integral of B_Q(u)(g_i)
    MPc: np.ndarray    # (n, K, M)
    CPc: np.ndarray    # (n, K, K, M)
    MQc: np.ndarray    # (n, K, G)
    CQc: np.ndarray    # (n, K, K, G)


_CACHE = threading.local()


def _precompute(traj: Trajectory, drivers: DriverMatrices) -> _Precomputed:
    hit = getattr(_CACHE, "entry", None)
    if hit is not None and hit[0] is traj and hit[1] is drivers:
        return hit[2]
    _check_grid(traj, drivers)
    tens = traj.tensors
    BQt = convective_tensor(drivers.basis, drivers.grad_basis)
    M, G = drivers.M, drivers.G
    S = traj.states
    drift = -(np.einsum("nj,nl->njl", S, S).reshape(-1, M * M) @ tens.B.reshape(M * M, M)) - tens.nu * tens.lam * S
    bq = np.einsum("nj,nl->njl", S, S).reshape(-1, M * M) @ BQt.reshape(M * M, G)
    c = traj.grid_states
    pre = _Precomputed(
        c=c,
        F=_grid_integral(traj, drift),
        BQ=_grid_integral(traj, bq),
        MPc=np.einsum("kab,nb->nka", drivers.MP, c),
        CPc=np.einsum("ikab,nb->nika", drivers.CP, c),
        MQc=np.einsum("kab,nb->nka", drivers.MQ, c),
        CQc=np.einsum("ikab,nb->nika", drivers.CQ, c),
    )
    _CACHE.entry = (traj, drivers, pre)
    return pre


def _pair_terms(pre: _Precomputed, drivers: DriverMatrices, s: np.ndarray, t: np.ndarray):
    """``du, u_sharp, u^{P,nat}, h = (AQ1 + AQ2) u_s`` on the pairs ``(s, t)``."""
    vals = drivers.lift.path.values
    Z = vals[t] - vals[s]
    ZZ = drivers.lift.ZZ[s, t]
    du = pre.c[t] - pre.c[s]
    a1 = np.einsum("pk,pka->pa", Z, pre.MPc[s])
    a2 = np.einsum("pik,pika->pa", ZZ, pre.CPc[s])
    usharp = du - a1
    uP = du - (pre.F[t] - pre.F[s]) - a1 - a2
    h = np.einsum("pk,pka->pa", Z, pre.MQc[s]) + np.einsum("pik,pika->pa", ZZ, pre.CQc[s])
    return du, usharp, uP, h


# --------------------------------------------------------------------------- pressure

@dataclass(frozen=True)
class PressurePath:
    times: np.ndarray
    pi: np.ndarray        # (n, G): pi_t(g_i)
    sewn: np.ndarray      # (n, G): the sewn part I_t
    sewing: SewingResult
    zeta: float


def pressure_control(traj: Trajectory, drivers: DriverMatrices, p: float | None = None) -> GridControl:
    """Control ``omega`` with ``|dh_sut| <= omega(s,t)^(3/p)`` built from the p-variation of the inputs."""
    pre = _precompute(traj, drivers)
    p = drivers.lift.p if p is None else p
    n = pre.c.shape[0]
    s, t = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    du, usharp, _, _ = _pair_terms(pre, drivers, s.ravel(), t.ravel())
    du, usharp = du.reshape(n, n, -1), usharp.reshape(n, n, -1)
    C1 = math.sqrt(sum(np.linalg.norm(m, 2) ** 2 for m in drivers.MQ))
    C2 = math.sqrt(sum(np.linalg.norm(m, 2) ** 2 for m in drivers.CQ.reshape(-1, *drivers.CQ.shape[2:])))
    S = (lift_control(drivers.lift, p).values + variation_control(usharp, p / 2).values
         + variation_control(du, p).values)
    return GridControl(drivers.lift.times, (1.0 + 1e-9) * (C1 + C2) ** (p / 3) * S)


def recover_pressure(traj: Trajectory, drivers: DriverMatrices, p: float | None = None) -> PressurePath:
    """``pi_t = -int_0^t B_Q(u) dr + I_t`` with ``I`` the sewing of ``h_st = (AQ1_st + AQ2_st) u_s``."""
    pre = _precompute(traj, drivers)
    p = drivers.lift.p if p is None else p
    n = pre.c.shape[0]
    s, t = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    h = _pair_terms(pre, drivers, s.ravel(), t.ravel())[3].reshape(n, n, -1)
    h[np.tril_indices(n)] = 0.0
    omega = pressure_control(traj, drivers, p)
    sew = sewing_integrate(h, p / 3.0, omega)
    return PressurePath(traj.grid_times, -pre.BQ + sew.values, sew.values, sew, p / 3.0)


def pressure_germ_defect(traj: Trajectory, drivers: DriverMatrices, triples) -> float:
    """Max gap between ``dh_sut`` and ``-AQ1_ut u_sharp_su - AQ2_ut du_su`` on the given triples."""
    pre = _precompute(traj, drivers)
    a, b, c = (np.asarray(x) for x in zip(*triples))
    h = lambda s, t: _pair_terms(pre, drivers, s, t)[3]
    du, usharp, _, _ = _pair_terms(pre, drivers, a, b)
    direct = h(a, c) - h(a, b) - h(b, c)
    ident = -np.einsum("pab,pb->pa", drivers.AQ1(b, c), usharp) - np.einsum("pab,pb->pa", drivers.AQ2(b, c), du)
    return float(np.abs(direct - ident).max())


# --------------------------------------------------------------------------- remainders

@dataclass(frozen=True)
class RemainderValues:
    s: np.ndarray
    t: np.ndarray
    du: np.ndarray
    usharp: np.ndarray
    uP: np.ndarray
    uQ: np.ndarray


@dataclass(frozen=True)
class RemainderScan:
    levels: np.ndarray
    dt: np.ndarray
    sup_uPnat: np.ndarray   # H^-3
    sup_uQnat: np.ndarray   # H^-3
    sup_usharp: np.ndarray  # H^-2
    sup_du: np.ndarray      # H^-1
    values: RemainderValues | None = field(default=None, repr=False)

    QUANTITIES = ("uPnat", "uQnat", "usharp", "du")

    def sup(self, name: str) -> np.ndarray:
        return getattr(self, f"sup_{name}")


def remainder_values(traj: Trajectory, drivers: DriverMatrices, s, t, pressure: PressurePath | None = None
                     ) -> RemainderValues:
    pre = _precompute(traj, drivers)
    s, t = np.asarray(s), np.asarray(t)
    if pressure is None:
        pressure = recover_pressure(traj, drivers)
    du, usharp, uP, h = _pair_terms(pre, drivers, s, t)
    uQ = (pressure.pi[t] - pressure.pi[s]) + (pre.BQ[t] - pre.BQ[s]) - h
    return RemainderValues(s, t, du, usharp, uP, uQ)


def _dyadic_levels(n: int) -> int:
    L = int(round(math.log2(n - 1)))
    if 2 ** L != n - 1:
        raise GridMismatch("remainder scans need 2^L driver segments")
    return L


def compute_remainders(traj: Trajectory, drivers: DriverMatrices, pressure: PressurePath | None = None,
                       levels=None) -> RemainderScan:
    """Sup over pairs with ``t - s = 2^-level T`` of the dual norms of every remainder."""
    n = traj.grid_times.size
    L = _dyadic_levels(n)
    levels = np.arange(1, L + 1) if levels is None else np.asarray(levels)
    ss, tt, lev = [], [], []
    for l in levels:
        w = 2 ** (L - int(l))
        s = np.arange(0, n - w)
        ss.append(s)
        tt.append(s + w)
        lev.append(np.full(s.size, l))
    s, t, lev = np.concatenate(ss), np.concatenate(tt), np.concatenate(lev)
    vals = remainder_values(traj, drivers, s, t, pressure)
    lam = drivers.basis.eigenvalues
    lamg = drivers.grad_basis.eigenvalues
    norms = {"uPnat": dual_norm(vals.uP, lam, 3), "uQnat": dual_norm(vals.uQ, lamg, 3),
             "usharp": dual_norm(vals.usharp, lam, 2), "du": dual_norm(vals.du, lam, 1)}
    sups = {k: np.array([v[lev == l].max() for l in levels]) for k, v in norms.items()}
    return RemainderScan(levels, traj.T * 2.0 ** -levels.astype(float), sups["uPnat"], sups["uQnat"],
                         sups["usharp"], sups["du"], vals)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    levels: tuple


def fit_slopes(scan: RemainderScan, levels=SLOPE_LEVELS, control: RemainderScan | None = None,
               quantities=RemainderScan.QUANTITIES) -> dict[str, SlopeFit]:
    """Least-squares slope of ``log sup`` against ``log dt`` over the level range.

    With a ``sigma = 0`` control scan, up to two finest levels are dropped when
    the control sup exceeds a tenth of the measured one (quadrature floor).
    """
    out = {}
    for q in quantities:
        lv = [l for l in scan.levels if levels[0] <= l <= levels[1]]
        if control is not None:
            for _ in range(2):
                l = lv[-1]
                i, j = list(scan.levels).index(l), list(control.levels).index(l)
                if control.sup(q)[j] > 0.1 * scan.sup(q)[i] and len(lv) > 2:
                    lv.pop()
                else:
                    break
        idx = [list(scan.levels).index(l) for l in lv]
        if not np.any(scan.sup(q)[idx] > 0):
            out[q] = SlopeFit(math.nan, math.nan, math.nan, tuple(int(l) for l in lv))
            continue
        x = np.log(scan.dt[idx])
        y = np.log(np.maximum(scan.sup(q)[idx], 1e-300))
        A = np.vstack([x, np.ones_like(x)]).T
        (k, b), *_ = np.linalg.lstsq(A, y, rcond=None)
        ss = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float(((y - A @ [k, b]) ** 2).sum()) / ss if ss > 0 else 1.0
        out[q] = SlopeFit(float(k), float(b), r2, tuple(int(l) for l in lv))
    return out


def variation_scan(data, q: float, varpi=None, L: float = 1.0, lift=None) -> dict[str, float]:
    """Local q-variation (steps with ``varpi <= L``) next to the unrestricted one.

    ``data`` is a two-index table ``(n, n, ...)``; ``varpi`` defaults to ``omega_Z`` of ``lift``.
    """
    if varpi is None:
        if lift is None:
            raise ValueError("need varpi or a lift to build omega_Z")
        varpi = lift_control(lift)
    return {"local": p_variation(data, q, (varpi, L)), "global": p_variation(data, q)}


def pair_table(traj: Trajectory, drivers: DriverMatrices, name: str) -> np.ndarray:
    """Dense ``(n, n, dim)`` table of ``du``, ``usharp``, ``uP`` or ``uQ`` (zero below the diagonal)."""
    n = traj.grid_times.size
    s, t = np.triu_indices(n, 1)
    vals = remainder_values(traj, drivers, s, t)
    v = getattr(vals, name)
    out = np.zeros((n, n, v.shape[1]))
    out[s, t] = v
    return out


# --------------------------------------------------------------------------- single-equation form

@dataclass(frozen=True)
class FullSpaceForms:
    """Stiffness and convection forms against every element of the full test basis."""

    stiffness: np.ndarray   # (F, M): (grad h_j, grad f_i)
    convection: np.ndarray  # (M, M, F): b(h_j, h_l, f_i)


def full_space_forms(drivers: DriverMatrices) -> FullSpaceForms:
    """Built element by element from field products, independently of the tensor assembly."""
    basis, full = drivers.basis, drivers.full
    M, F, d = len(basis), len(full), basis.d
    hs = [basis.element(j) for j in range(M)]
    fs = [full.element(i) for i in range(F)]
    units = np.eye(d)
    dh = [[advect(units[a], h) for a in range(d)] for h in hs]
    df = [[advect(units[a], f) for a in range(d)] for f in fs]
    stiff = np.array([[sum(inner(df[i][a], dh[j][a]) for a in range(d)) for j in range(M)] for i in range(F)])
    conv = np.zeros((M, M, F))
    for j in range(M):
        for l in range(M):
            conv[j, l] = full.coordinates(convective(hs[j], hs[l]))
    return FullSpaceForms(stiff, conv)


def single_equation_remainder(traj: Trajectory, drivers: DriverMatrices, pressure: PressurePath, s, t,
                              forms: FullSpaceForms | None = None) -> np.ndarray:
    """``u^nat_st(f) = du(f) + int [nu (grad u, grad f) + B(u)(f)] - u_s((A1 + A2)^* f) + dpi(f)`` on the full basis."""
    _check_grid(traj, drivers)
    forms = full_space_forms(drivers) if forms is None else forms
    s, t = np.asarray(s), np.asarray(t)
    M, F = drivers.M, len(drivers.full)
    S = traj.states
    Cint = _grid_integral(traj, S)
    CCint = _grid_integral(traj, np.einsum("nj,nl->njl", S, S).reshape(-1, M * M))
    c = traj.grid_states
    out = np.zeros((s.size, F))
    out[:, :M] += c[t] - c[s]
    out += traj.tensors.nu * (Cint[t] - Cint[s]) @ forms.stiffness.T
    out += (CCint[t] - CCint[s]) @ forms.convection.reshape(M * M, F)
    cs = np.zeros((s.size, F))
    cs[:, :M] = c[s]
    out -= np.einsum("pab,pb->pa", drivers.A1(s, t) + drivers.A2(s, t), cs)
    out[:, M:] += pressure.pi[t] - pressure.pi[s]
    return out


# --------------------------------------------------------------------------- energy and stability

def energy_defect(traj: Trajectory) -> float:
    """``max_t | |u_t|^2 + 2 nu int_0^t |grad u|^2 - |u_0|^2 |``."""
    return float(np.abs(traj.energy_defect()).max())


def _same_driver(a: Trajectory, b: Trajectory) -> None:
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise DriverMismatch("trajectories use different time grids")
    if not np.array_equal(a.driver.values, b.driver.values):
        raise DriverMismatch("trajectories were driven by different paths")
    if a.tensors is not b.tensors and (a.tensors.nu != b.tensors.nu or not np.array_equal(a.tensors.A, b.tensors.A)):
        raise DriverMismatch("trajectories use different coefficients")


def gronwall_check(traj1: Trajectory, traj2: Trajectory, traj_half: Trajectory | None = None) -> dict:
    """Fit ``|v_t|^2 + int_0^t |grad v|^2 <= C |v_0|^2 exp(c int_0^t |u1|_0^2 |u1|_1^2 dr)`` for ``v = u1 - u2``.

    With ``traj_half`` (perturbation halved) also returns the ratio of the left
    sides, which should be close to 1/4.
    """
    _same_driver(traj1, traj2)
    lam = traj1.tensors.lam
    v = traj1.states - traj2.states
    lhs = (v ** 2).sum(axis=1) + cumulative_simpson((lam * v ** 2).sum(axis=1), traj1.times)
    u0 = (traj1.states ** 2).sum(axis=1)
    u1 = ((1.0 + lam) * traj1.states ** 2).sum(axis=1)
    X = cumulative_simpson(u0 * u1, traj1.times)
    v0 = lhs[0]
    if v0 == 0.0:
        out = {"C": 1.0, "c": 0.0, "lhs": lhs, "exponent": X, "bound_holds": bool(np.all(lhs == 0.0))}
    else:
        ratio = lhs / v0
        pos = X > 0
        C = 1.0 if pos.any() else max(1.0, float(ratio.max()))
        c = max(0.0, float(np.max(np.log(np.maximum(ratio[pos], 1e-300)) / X[pos]))) if pos.any() else 0.0
        out = {"C": C, "c": c, "lhs": lhs, "exponent": X,
               "bound_holds": bool(np.all(lhs <= C * v0 * np.exp(c * X) * (1 + 1e-12)))}
    if traj_half is not None:
        _same_driver(traj1, traj_half)
        vh = traj1.states - traj_half.states
        lhs_h = (vh ** 2).sum(axis=1) + cumulative_simpson((lam * vh ** 2).sum(axis=1), traj1.times)
        out["half_ratio"] = float(lhs_h[-1] / lhs[-1])
    return out


# --------------------------------------------------------------------------- CSV

def write_scan_csv(scan: RemainderScan, file) -> None:
    write_rows(file, ["level", "dt", "sup_uPnat", "sup_uQnat", "sup_usharp", "sup_du"],
               ([int(l), float(dt), float(a), float(b), float(c), float(d)] for l, dt, a, b, c, d in
                zip(scan.levels, scan.dt, scan.sup_uPnat, scan.sup_uQnat, scan.sup_usharp, scan.sup_du)))


def write_slopes_csv(slopes: dict[str, SlopeFit], file) -> None:
    write_rows(file, ["quantity", "slope", "intercept", "r2"],
               ([q, float(f.slope), float(f.intercept), float(f.r2)] for q, f in slopes.items()))
