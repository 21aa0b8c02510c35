"""Discrete rough paths on a time grid: lifts, controls, variation and sewing.

Two-index quantities (increments, iterated integrals, controls) are stored as
dense ``(n, n, ...)`` tables indexed by grid positions ``[s, t]``.
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy import linalg

from .errors import InvalidGrid, MeshTooFine, NotSewable, UnsupportedHurst

CHEN_TOL = 1e-10
SEWING_TOL = 1e-8
MAX_LIFT_POINTS = 2049
_TIE_RTOL = 1e-12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed and optional stream ids."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class GridPath:
    """Values ``(n, K)`` of a K-channel path sampled at ``times`` (``times[0] = 0``)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or t.size == 0:
            raise InvalidGrid("grid must be a non-empty 1-d array")
        if t[0] != 0.0:
            raise InvalidGrid("grid must start at t=0")
        if np.any(np.diff(t) <= 0):
            raise InvalidGrid("grid times must be strictly increasing")
        if v.ndim != 2 or v.shape[0] != t.size:
            raise InvalidGrid(f"values shape {v.shape} does not match {t.size} grid points")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def increments(self) -> np.ndarray:
        """Table ``Z[s, t] = z_t - z_s`` of shape ``(n, n, K)``."""
        return self.values[None, :, :] - self.values[:, None, :]

    def at(self, t) -> np.ndarray:
        """Piecewise-linear interpolation at arbitrary times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.times, self.values[:, k]) for k in range(self.K)], axis=-1)


def _cumulative_area(values: np.ndarray) -> np.ndarray:
    """``X_b = int_0^{t_b} z (x) dz`` along the linear interpolant, shape ``(n, K, K)``."""
    dz = np.diff(values, axis=0)
    mid = values[:-1] + 0.5 * dz
    X = np.zeros((values.shape[0], values.shape[1], values.shape[1]))
    X[1:] = np.cumsum(mid[:, :, None] * dz[:, None, :], axis=0)
    return X


def _area_between(values: np.ndarray, X: np.ndarray, a, b) -> np.ndarray:
    za, zb = values[a], values[b]
    return X[b] - X[a] - za[..., :, None] * (zb - za)[..., None, :]


@dataclass(frozen=True)
class RoughLift:
    """Path plus second level ``ZZ[s, t, i, j] = int_s^t (z^i_r - z^i_s) dz^j_r``."""

    path: GridPath
    ZZ: np.ndarray
    p: float

    def __post_init__(self):
        n, K = self.path.n, self.path.K
        if self.ZZ.shape != (n, n, K, K):
            raise InvalidGrid(f"second level has shape {self.ZZ.shape}, expected {(n, n, K, K)}")
        if not 2.0 <= self.p < 3.0:
            raise ValueError(f"p must lie in [2, 3), got {self.p}")

    @property
    def times(self) -> np.ndarray:
        return self.path.times

    @property
    def n(self) -> int:
        return self.path.n

    @property
    def K(self) -> int:
        return self.path.K

    @property
    def Z(self) -> np.ndarray:
        return self.path.increments()

    def with_ZZ(self, ZZ: np.ndarray) -> "RoughLift":
        return RoughLift(self.path, np.asarray(ZZ, dtype=float), self.p)


def lift_piecewise_linear(path: GridPath, p: float = 2.5, max_points: int = MAX_LIFT_POINTS) -> RoughLift:
    """Canonical (geometric) lift of the piecewise-linear interpolant of ``path``."""
    if path.n < 2:
        raise InvalidGrid("a lift needs at least two grid points")
    if path.n > max_points:
        raise InvalidGrid(f"{path.n} grid points exceed the dense-table limit {max_points}")
    X = _cumulative_area(path.values)
    idx = np.arange(path.n)
    ZZ = _area_between(path.values, X, idx[:, None], idx[None, :])
    return RoughLift(path, ZZ, float(p))


def iterated_integral(path: GridPath) -> tuple[np.ndarray, np.ndarray]:
    """``(Z_{0T}, ZZ_{0T})`` of the linear interpolant without building pair tables."""
    X = _cumulative_area(path.values)
    return path.values[-1] - path.values[0], _area_between(path.values, X, 0, path.n - 1)


def chen_defect(lift: RoughLift) -> float:
    """Entrywise max of ``ZZ_st - ZZ_su - ZZ_ut - Z_su (x) Z_ut`` over grid triples."""
    Z, ZZ = lift.Z, lift.ZZ
    worst = 0.0
    for u in range(1, lift.n - 1):
        d = (ZZ[:u, u + 1:] - ZZ[:u, u][:, None] - ZZ[u, u + 1:][None, :]
             - Z[:u, u][:, None, :, None] * Z[u, u + 1:][None, :, None, :])
        worst = max(worst, float(np.abs(d).max()))
    return worst


# --------------------------------------------------------------------------- sampling

_FBM_RE = re.compile(r"^fbm\(\s*([0-9.eE+-]+)\s*\)$")


def _parse_kind(kind: str, hurst: float | None) -> float:
    kind = kind.strip().lower()
    if kind == "brownian":
        return 0.5
    m = _FBM_RE.match(kind)
    if m:
        hurst = float(m.group(1))
    elif kind != "fbm":
        raise ValueError(f"unknown driver kind {kind!r}")
    if hurst is None:
        raise UnsupportedHurst("fbm needs a Hurst index")
    if not (1.0 / 3.0 < hurst <= 0.5):
        raise UnsupportedHurst(f"Hurst index {hurst} outside (1/3, 1/2]")
    return float(hurst)


def fgn_covariance(n: int, hurst: float, dt: float) -> np.ndarray:
    k = np.arange(n, dtype=float)
    g = 0.5 * dt ** (2 * hurst) * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    return linalg.toeplitz(g)


@functools.lru_cache(maxsize=8)
def _fgn_cholesky(n: int, hurst: float, dt: float) -> np.ndarray:
    return linalg.cholesky(fgn_covariance(n, hurst, dt), lower=True)


def _fgn_circulant(n: int, hurst: float, dt: float, xi: np.ndarray) -> np.ndarray:
    # exact circulant embedding; the embedding is non-negative definite for fGn
    k = np.arange(n + 1, dtype=float)
    g = 0.5 * dt ** (2 * hurst) * (np.abs(k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([g, g[-2:0:-1]])
    lam = np.clip(np.fft.fft(row).real, 0.0, None)
    m = row.size
    w = (xi[: m] + 1j * xi[m:]) * np.sqrt(lam / m)[:, None]
    return np.fft.fft(w, axis=0).real[:n]


def sample_gaussian_driver(kind: str, grid, seed: int, K: int = 1, hurst: float | None = None) -> GridPath:
    """Brownian motion or fBm(H), H in (1/3, 1/2], sampled exactly on a uniform grid."""
    H = _parse_kind(kind, hurst)
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size < 2 or times[0] != 0.0:
        raise InvalidGrid("driver grid must start at 0 and have at least two points")
    dts = np.diff(times)
    if np.any(dts <= 0) or not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise InvalidGrid("driver grid must be uniform")
    n, dt = dts.size, float(dts[0])
    rng = make_rng(seed)
    if H == 0.5:
        inc = rng.standard_normal((n, K)) * math.sqrt(dt)
    elif n <= 4096:
        inc = _fgn_cholesky(n, H, dt) @ rng.standard_normal((n, K))
    else:
        inc = _fgn_circulant(n, H, dt, rng.standard_normal((4 * n, K)))
    values = np.zeros((n + 1, K))
    values[1:] = np.cumsum(inc, axis=0)
    return GridPath(times, values)


# --------------------------------------------------------------------------- controls and variation

@dataclass(frozen=True)
class GridControl:
    """Control ``omega[s, t]`` tabulated on grid pairs (upper triangle used)."""

    times: np.ndarray
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.times.size

    def superadditivity_defect(self) -> float:
        """max over s<u<t of ``omega(s,u) + omega(u,t) - omega(s,t)`` (<= 0 for a control)."""
        w = self.values
        worst = -np.inf
        for u in range(1, self.n - 1):
            d = w[:u, u][:, None] + w[u, u + 1:][None, :] - w[:u, u + 1:]
            worst = max(worst, float(d.max()))
        return worst if np.isfinite(worst) else 0.0

    def scaled(self, c: float) -> "GridControl":
        return GridControl(self.times, c * self.values)

    def __add__(self, other: "GridControl") -> "GridControl":
        return GridControl(self.times, self.values + other.values)


def _magnitudes(g) -> np.ndarray:
    if isinstance(g, GridPath):
        g = g.increments()
    a = np.asarray(g, dtype=float)
    if a.size == 0 or a.ndim < 2 or a.shape[0] == 0:
        raise InvalidGrid("variation needs a non-empty grid")
    if a.shape[0] != a.shape[1]:
        raise InvalidGrid("two-index map must be indexed by grid pairs")
    n = a.shape[0]
    if a.ndim > 2:
        a = np.sqrt((a.reshape(n, n, -1) ** 2).sum(axis=-1))
    return np.abs(a)


def _mesh_mask(mesh, n: int) -> np.ndarray | None:
    if mesh is None:
        return None
    varpi, L = mesh
    w = varpi.values if isinstance(varpi, GridControl) else np.asarray(varpi, dtype=float)
    if w.shape != (n, n):
        raise InvalidGrid("mesh control does not match the grid")
    return w <= L


def p_variation_partition(g, p: float, mesh=None) -> tuple[float, list[int]]:
    """p-variation over grid partitions and a maximising partition.

    ``mesh = (varpi, L)`` restricts partitions to steps with ``varpi <= L``.
    Among equal sums the partition with fewer points wins.
    """
    G = _magnitudes(g) ** p
    n = G.shape[0]
    if n == 1:
        return 0.0, [0]
    allowed = _mesh_mask(mesh, n)
    best = np.full(n, -np.inf)
    best[0] = 0.0
    count = np.zeros(n, dtype=int)
    prev = np.full(n, -1)
    for t in range(1, n):
        cand = best[:t] + G[:t, t]
        if allowed is not None:
            cand = np.where(allowed[:t, t], cand, -np.inf)
        top = cand.max()
        if not np.isfinite(top):
            continue
        ties = np.flatnonzero(cand >= top - _TIE_RTOL * max(abs(top), 1e-300))
        m = ties[np.argmin(count[ties])]
        best[t], count[t], prev[t] = cand[m], count[m] + 1, m
    if not np.isfinite(best[-1]):
        raise InvalidGrid("no partition satisfies the mesh restriction")
    pts = [n - 1]
    while pts[-1] != 0:
        pts.append(int(prev[pts[-1]]))
    return float(best[-1] ** (1.0 / p)), pts[::-1]


def p_variation(g, p: float, mesh=None) -> float:
    """``sup_partitions (sum |g_{t_i t_{i+1}}|^p)^(1/p)`` over grid partitions."""
    return p_variation_partition(g, p, mesh)[0]


def variation_control(g, p: float, mesh=None, times=None) -> GridControl:
    """``omega[s, t] = |g|_{p-var;[s,t]}^p`` for every grid pair, by dynamic programming."""
    G = _magnitudes(g) ** p
    n = G.shape[0]
    allowed = _mesh_mask(mesh, n)
    if allowed is not None:
        G = np.where(allowed, G, -np.inf)
    W = np.full((n, n), -np.inf)
    W[0, 0] = 0.0
    for t in range(1, n):
        W[:, t] = (W[:, :t] + G[:t, t][None, :]).max(axis=1)
        W[t, t] = 0.0
    W = np.where(np.isfinite(W), W, np.nan)
    W[np.tril_indices(n, -1)] = 0.0
    return GridControl(np.arange(n, dtype=float) if times is None else np.asarray(times, float), W)


def lift_control(lift: RoughLift, p: float | None = None) -> GridControl:
    """``omega_Z = |Z|_{p-var}^p + |ZZ|_{p/2-var}^{p/2}`` on every grid pair."""
    p = lift.p if p is None else p
    a = variation_control(lift.Z, p, times=lift.times)
    b = variation_control(lift.ZZ, p / 2.0, times=lift.times)
    return a + b


# --------------------------------------------------------------------------- sewing

@dataclass(frozen=True)
class SewingResult:
    times: np.ndarray
    values: np.ndarray          # I on the output grid, I[0] = 0
    depth: int
    residual_ratio: float       # observed C_zeta: sup |h - dI| / omega^(1/zeta)
    precondition_excess: float  # max(|dh| - omega^(1/zeta)) over checked triples


def _dyadic_depth(times: np.ndarray) -> int:
    n = times.size - 1
    D = int(round(math.log2(n))) if n > 0 else -1
    if n < 1 or 2 ** D != n or not np.allclose(np.diff(times), times[-1] / n, rtol=1e-9):
        raise InvalidGrid("sewing needs a uniform dyadic grid with 2^k intervals")
    return D


def _checked_triples(D: int, D_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index triples (on the depth-D grid) used to verify the sewing precondition."""
    N = 2 ** D
    out = []
    for k in range(D):  # midpoint triples of every dyadic interval
        step = N >> k
        s = np.arange(0, N, step)
        out.append(np.stack([s, s + step // 2, s + step], axis=1))
    sub = min(D_out, 5)  # every triple on a coarse (<= 33 point) output subgrid
    pts = np.arange(0, N + 1, N >> sub)
    i, j, k = np.meshgrid(pts, pts, pts, indexing="ij")
    keep = (i < j) & (j < k)
    out.append(np.stack([i[keep], j[keep], k[keep]], axis=1))
    tri = np.unique(np.concatenate(out), axis=0)
    return tri[:, 0], tri[:, 1], tri[:, 2]


def _norm(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.abs(x) if x.ndim == 1 else np.sqrt((x.reshape(x.shape[0], -1) ** 2).sum(axis=1))


def sewing_integrate(h, zeta: float, omega, grid=None, depth: int | None = None,
                     extrapolate: bool | None = None, tol: float = SEWING_TOL) -> SewingResult:
    """Sew a germ ``h`` with ``|dh_sut| <= omega(s,t)^(1/zeta)``, ``zeta < 1``, into a path ``I``.

    ``h`` is either a table ``(n, n, ...)`` on the output grid or a vectorised
    callable ``h(s, t)``.  ``omega`` is a :class:`GridControl` on the output grid
    or a vectorised callable.  ``I`` is the limit of Riemann sums of ``h`` over
    dyadic partitions; for callables the sums at ``depth`` and ``depth-1`` are
    combined by one Richardson step with rate ``2^-(1/zeta - 1)``.
    """
    if not 0.0 < zeta < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    if isinstance(omega, GridControl):
        times = omega.times
        om_tab = omega.values
        om_fn = None
    else:
        if grid is None:
            raise InvalidGrid("a grid is needed when omega is a callable")
        times, om_tab, om_fn = np.asarray(grid, dtype=float), None, omega
    D0 = _dyadic_depth(times)
    T = float(times[-1])
    table = not callable(h)
    if table:
        h = np.asarray(h, dtype=float)
        if h.shape[:2] != (times.size, times.size):
            raise InvalidGrid("germ table does not match the grid")
        if depth not in (None, D0):
            raise ValueError("a tabulated germ can only be sewn at the grid depth")
        D, extrapolate = D0, False
    else:
        D = D0 + 8 if depth is None else int(depth)
        if D < D0:
            raise ValueError("depth must be at least the grid depth")
        extrapolate = True if extrapolate is None else extrapolate
        if extrapolate and D == D0:
            D += 1
    N = 2 ** D
    fine = np.linspace(0.0, T, N + 1)
    stride = 2 ** (D - D0)

    def H(i, j):
        if table:
            return h[i // stride, j // stride]
        return np.asarray(h(fine[i], fine[j]), dtype=float)

    def OM(i, j):
        if om_fn is not None:
            return np.asarray(om_fn(fine[i], fine[j]), dtype=float) * np.ones(np.shape(i))
        return om_tab[i // stride, j // stride]

    # precondition on checked triples (only triples of grid points for tabulated omega)
    Dchk = D if om_fn is not None else D0
    a, b, c = _checked_triples(Dchk, D0)
    scale = 2 ** (D - Dchk)
    a, b, c = a * scale, b * scale, c * scale
    dh = H(a, c) - H(a, b) - H(b, c)
    bound = OM(a, c) ** (1.0 / zeta)
    excess = _norm(dh) - bound
    worst = int(np.argmax(excess))
    if excess[worst] > tol:
        raise NotSewable(
            f"|dh| exceeds omega^(1/zeta) by {excess[worst]:.3e} at "
            f"(s,u,t)=({fine[a[worst]]:.6g},{fine[b[worst]]:.6g},{fine[c[worst]]:.6g})")

    def partial_sums(level):
        st = 2 ** (D - level)
        i = np.arange(0, N, st)
        inc = H(i, i + st)
        S = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
        S[1:] = np.cumsum(inc, axis=0)
        return S[:: 2 ** (level - D0)]

    I = partial_sums(D)
    if extrapolate:
        q = 2.0 ** (1.0 / zeta - 1.0)
        I = (q * I - partial_sums(D - 1)) / (q - 1.0)

    n0 = times.size
    si, ti = np.triu_indices(n0, 1)
    gs = H(si * stride, ti * stride)
    resid = _norm(gs - (I[ti] - I[si]))
    om = OM(si * stride, ti * stride) ** (1.0 / zeta)
    pos = om > 0
    ratio = float(np.max(resid[pos] / om[pos])) if pos.any() else 0.0
    if np.any(resid[~pos] > tol):
        ratio = math.inf
    return SewingResult(times, I, D, ratio, float(excess.max()))


# --------------------------------------------------------------------------- mollification

class Mollified(NamedTuple):
    path: GridPath          # piecewise-linear interpolant on the source grid
    lift: RoughLift         # canonical lift on the coarse grid
    control_ratio: float    # max omega_{Z^delta} / omega_Z over coarse pairs


def mollify_driver(path: GridPath, delta: float, p: float = 2.5, control_ratio: bool = True) -> Mollified:
    """Subsample at mesh ``delta``, interpolate linearly and lift canonically."""
    if path.n < 2:
        raise InvalidGrid("need at least two grid points")
    spacing = float(np.min(np.diff(path.times)))
    if delta < spacing * (1 - 1e-9):
        raise MeshTooFine(f"mesh {delta} finer than grid spacing {spacing}")
    T = path.T
    targets = np.append(np.arange(0.0, T - 0.5 * spacing, delta), T)
    idx = np.unique(np.clip(np.searchsorted(path.times, targets - 0.5 * spacing), 0, path.n - 1))
    idx[-1] = path.n - 1
    idx = np.unique(idx)
    coarse = GridPath(path.times[idx], path.values[idx])
    fine_vals = np.stack([np.interp(path.times, coarse.times, coarse.values[:, k]) for k in range(path.K)], axis=1)
    lift = lift_piecewise_linear(coarse, p)
    ratio = math.nan
    if control_ratio and coarse.n <= 257:
        X = _cumulative_area(path.values)
        Zo = path.values[idx][None, :, :] - path.values[idx][:, None, :]
        ZZo = _area_between(path.values, X, idx[:, None], idx[None, :])
        w_orig = variation_control(Zo, p).values + variation_control(ZZo, p / 2).values
        w_moll = lift_control(lift, p).values
        iu = np.triu_indices(coarse.n, 1)
        num, den = w_moll[iu], w_orig[iu]
        ok = den > 1e-300
        ratio = float(np.max(num[ok] / den[ok])) if ok.any() else 1.0
    return Mollified(GridPath(path.times, fine_vals), lift, ratio)


# --------------------------------------------------------------------------- CSV

def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_rows(file, header: list[str], rows) -> None:
    with open(file, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(r if isinstance(r, str) else fmt(r) if isinstance(r, float) else str(r)
                              for r in row) + "\n")


def write_path_csv(path: GridPath, file) -> None:
    header = ["t"] + [f"z{k + 1}" for k in range(path.K)]
    write_rows(file, header, ([float(t), *map(float, v)] for t, v in zip(path.times, path.values)))


def read_path_csv(file) -> GridPath:
    data = np.loadtxt(Path(file), delimiter=",", skiprows=1, ndmin=2)
    return GridPath(data[:, 0], data[:, 1:])


def write_lift_csv(lift: RoughLift, file) -> None:
    K = lift.K
    header = ["s", "t"] + [f"Z_{k + 1}" for k in range(K)] + [f"ZZ_{i + 1}{j + 1}" for i in range(K) for j in range(K)]
    Z, ZZ, ts = lift.Z, lift.ZZ, lift.times

    def rows():
        for s in range(lift.n):
            for t in range(s + 1, lift.n):
                yield [float(ts[s]), float(ts[t]), *map(float, Z[s, t]), *map(float, ZZ[s, t].ravel())]

    write_rows(file, header, rows())


def read_lift_csv(file, p: float = 2.5) -> RoughLift:
    data = np.loadtxt(Path(file), delimiter=",", skiprows=1, ndmin=2)
    K = int(round((-1 + math.sqrt(1 + 4 * (data.shape[1] - 2))) / 2))
    times = np.unique(np.concatenate([data[:, 0], data[:, 1]]))
    n = times.size
    si = np.searchsorted(times, data[:, 0])
    ti = np.searchsorted(times, data[:, 1])
    values = np.zeros((n, K))
    first = si == 0
    values[ti[first]] = data[first, 2:2 + K]
    ZZ = np.zeros((n, n, K, K))
    ZZ[si, ti] = data[:, 2 + K:].reshape(-1, K, K)
    return RoughLift(GridPath(times, values), ZZ, p)
