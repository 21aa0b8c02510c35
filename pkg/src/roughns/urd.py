"""Galerkin matrices of the transport noise operators driven by a rough lift.

First level: ``AP1_st = sum_k MP_k Z^k_st`` with ``MP_k[i, j] = ((sigma_k . grad) h_j, h_i)``.
Second level: ``AP2_st = sum_{i,k} MP_k MP_i ZZ^{ik}_st`` (``k`` acts last).
``AQ`` uses gradient test modes for the outer factor, and the unprojected
``A1, A2`` act on the full space (divergence-free block then gradient block)
with the Leray projector between the two factors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ChannelMismatch
from .roughpath import RoughLift, lift_control, write_rows
from .spectral import ModeBasis, SigmaFamily, build_gradient_basis, operator_matrix


@dataclass(frozen=True)
class DriverMatrices:
    lift: RoughLift
    sigma: SigmaFamily
    basis: ModeBasis
    full: ModeBasis
    MP: np.ndarray                # (K, M, M)
    MQ: np.ndarray                # (K, G, M)
    MF: np.ndarray                # (K, F, F)
    CP: np.ndarray | None = None  # (K, K, M, M), [i, k] = MP_k MP_i
    CQ: np.ndarray | None = None  # (K, K, G, M), [i, k] = MQ_k MP_i
    CF: np.ndarray | None = None  # (K, K, F, F), [i, k] = MF_k Pi MF_i

    @property
    def M(self) -> int:
        return self.MP.shape[1]

    @property
    def G(self) -> int:
        return self.MQ.shape[1]

    @property
    def K(self) -> int:
        return self.MP.shape[0]

    @property
    def grad_basis(self) -> ModeBasis:
        M = self.M
        f = self.full
        return ModeBasis(f.wavevectors[M:], f.parity[M:], f.polarization[M:], f.solenoidal[M:], f.cutoff)

    @property
    def projector(self) -> np.ndarray:
        return np.diag(self.full.solenoidal.astype(float))

    def _first(self, mats, s, t):
        Z = self.lift.path.values[t] - self.lift.path.values[s]
        return np.einsum("...k,kab->...ab", Z, mats)

    def _second(self, mats, s, t):
        if mats is None:
            raise ValueError("second-order drivers not assembled")
        return np.einsum("...ik,ikab->...ab", self.lift.ZZ[s, t], mats)

    def AP1(self, s, t):
        return self._first(self.MP, s, t)

    def AQ1(self, s, t):
        return self._first(self.MQ, s, t)

    def A1(self, s, t):
        return self._first(self.MF, s, t)

    def AP2(self, s, t):
        return self._second(self.CP, s, t)

    def AQ2(self, s, t):
        return self._second(self.CQ, s, t)

    def A2(self, s, t):
        return self._second(self.CF, s, t)

    def operator(self, name: str, s, t):
        return getattr(self, name)(s, t)


def assemble_first_order(sigma: SigmaFamily, lift: RoughLift, basis: ModeBasis,
                         grad_cutoff: int | None = None) -> DriverMatrices:
    """First-level matrices; the gradient block covers ``|n|^2 <= grad_cutoff`` (default ``4 * cutoff``)."""
    if sigma.K != lift.K:
        raise ChannelMismatch(f"noise has {sigma.K} channels but the driver has {lift.K}")
    if sigma.d != basis.d:
        raise ChannelMismatch("noise and basis dimensions differ")
    gc = 4 * basis.cutoff if grad_cutoff is None else grad_cutoff
    full = basis.concat(build_gradient_basis(gc, basis.d))
    M = len(basis)
    MF = np.stack([operator_matrix(sigma.as_field(k), full, full) for k in range(sigma.K)])
    return DriverMatrices(lift, sigma, basis, full, MF[:, :M, :M].copy(), MF[:, M:, :M].copy(), MF)


def assemble_second_order(first: DriverMatrices) -> DriverMatrices:
    MP, MQ, MF = first.MP, first.MQ, first.MF
    Pi = first.full.solenoidal.astype(float)
    CP = np.einsum("kab,ibc->ikac", MP, MP)
    CQ = np.einsum("kab,ibc->ikac", MQ, MP)
    CF = np.einsum("kab,b,ibc->ikac", MF, Pi, MF)
    return replace(first, CP=CP, CQ=CQ, CF=CF)


def assemble_drivers(sigma: SigmaFamily, lift: RoughLift, basis: ModeBasis,
                     grad_cutoff: int | None = None) -> DriverMatrices:
    return assemble_second_order(assemble_first_order(sigma, lift, basis, grad_cutoff))


def _reduce(mats: list[np.ndarray]) -> np.ndarray:
    """R factor with ``|sum_q w_q C_q|_F = |R w|`` for the stacked matrices ``C_q``."""
    C = np.stack([m.ravel() for m in mats])
    C = C[:, np.any(C != 0, axis=0)]
    if C.shape[1] == 0:
        return np.zeros((0, len(mats)))
    return np.linalg.qr(C.T, mode="r")


def _chen_sup(lift: RoughLift, R: np.ndarray) -> float:
    """``max_{s<u<t} |sum_ik C2_ik dZZ^ik_sut - sum_ik P_ik Z^i_su Z^k_ut|_F``.

    ``R`` reduces the stacked ``[C2_ik ..., P_ik ...]`` matrices.
    """
    if R.shape[0] == 0:
        return 0.0
    Z, ZZ, n, K = lift.Z, lift.ZZ, lift.n, lift.K
    worst = 0.0
    for u in range(1, n - 1):
        dZZ = ZZ[:u, u + 1:] - ZZ[:u, u][:, None] - ZZ[u, u + 1:][None, :]
        prod = Z[:u, u][:, None, :, None] * Z[u, u + 1:][None, :, None, :]
        w = np.concatenate([dZZ.reshape(-1, K * K), -prod.reshape(-1, K * K)], axis=1)
        worst = max(worst, float(np.sqrt(((w @ R.T) ** 2).sum(axis=1)).max()))
    return worst


def chen_check(drivers: DriverMatrices) -> dict[str, float]:
    """Max Frobenius defects over grid triples of

    ``AP``: dAP2_sut - AP1_ut AP1_su,
    ``AQ``: dAQ2_sut - AQ1_ut AP1_su,
    ``A``:  dA2_sut  - A1_ut Pi A1_su.
    """
    if drivers.CP is None:
        drivers = assemble_second_order(drivers)
    K = drivers.K
    Pi = drivers.full.solenoidal.astype(float)
    out = {}
    for name, C2, left, right, mid in (("AP", drivers.CP, drivers.MP, drivers.MP, None),
                                       ("AQ", drivers.CQ, drivers.MQ, drivers.MP, None),
                                       ("A", drivers.CF, drivers.MF, drivers.MF, Pi)):
        second = [C2[i, k] for i in range(K) for k in range(K)]
        prods = [(left[k] * mid) @ right[i] if mid is not None else left[k] @ right[i]
                 for i in range(K) for k in range(K)]
        out[name] = _chen_sup(drivers.lift, _reduce(second + prods))
    return out


def weighted_norms(mats: np.ndarray, lam: np.ndarray, alpha: float, shift: float) -> np.ndarray:
    """Operator norms ``H^-alpha -> H^-(alpha+shift)`` of a stack of Galerkin matrices."""
    w = np.sqrt(1.0 + lam)
    W = (w ** -(alpha + shift))[:, None] * (w ** alpha)[None, :]
    return np.linalg.norm(mats * W, ord=2, axis=(-2, -1))


def control_bound_check(drivers: DriverMatrices, omega_A=None, p: float | None = None) -> dict:
    """Sup ratios ``|AP1|^p / omega_A`` and ``|AP2|^(p/2) / omega_A`` over grid pairs.

    ``AP1`` is measured ``H^-a -> H^-(a+1)`` for ``a`` in 0, 1, 2 and ``AP2``
    ``H^-a -> H^-(a+2)`` for ``a`` in 0, 1.  The default ``omega_A`` is
    ``C * omega_Z`` with ``C = (1 + N0 * max|n|)^p``.
    """
    if drivers.CP is None:
        drivers = assemble_second_order(drivers)
    lift = drivers.lift
    p = lift.p if p is None else p
    nmax = float(np.sqrt(drivers.basis.eigenvalues.max()))
    C = (1.0 + drivers.sigma.N0 * nmax) ** p
    if omega_A is None:
        omega_A = lift_control(lift, p).scaled(C)
    om = omega_A.values if hasattr(omega_A, "values") else np.asarray(omega_A)
    s, t = np.triu_indices(lift.n, 1)
    lam = drivers.basis.eigenvalues
    A1, A2 = drivers.AP1(s, t), drivers.AP2(s, t)
    den = om[s, t]
    report = {"C": C, "p": p}

    def ratio(num):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 1e-300, np.inf, 0.0))
        return float(r.max()) if r.size else 0.0

    for a in (0, 1, 2):
        report[f"AP1_alpha{a}"] = ratio(weighted_norms(A1, lam, a, 1) ** p)
    for a in (0, 1):
        report[f"AP2_alpha{a}"] = ratio(weighted_norms(A2, lam, a, 2) ** (p / 2))
    report["sup_ratio"] = max(v for k, v in report.items() if k.startswith("AP"))
    return report


def write_driver_csv(drivers: DriverMatrices, name: str, file, pairs=None) -> None:
    """Rows ``s,t,i,j,value`` of one operator (``AP1``, ``AP2``, ``AQ1``, ``AQ2``, ``A1``, ``A2``)."""
    ts = drivers.lift.times
    if pairs is None:
        pairs = zip(*np.triu_indices(drivers.lift.n, 1))

    def rows():
        for s, t in pairs:
            A = drivers.operator(name, s, t)
            for i in range(A.shape[0]):
                for j in range(A.shape[1]):
                    yield [float(ts[s]), float(ts[t]), i, j, float(A[i, j])]

    write_rows(file, ["s", "t", "i", "j", "value"], rows())
