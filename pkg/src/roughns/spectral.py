"""Real trigonometric vector fields on the flat torus ``[0, 2 pi)^d``.

A field is a finite sum ``sum_m coef_m * phi_m(x)`` where ``phi_m`` is a unit
``L^2`` scalar mode ``c_n sin(n.x)`` or ``c_n cos(n.x)``, ``n`` a representative
of ``{n, -n}`` (first non-zero component positive), ``c_n = sqrt(2)/(2 pi)^(d/2)``
and ``c_0 = 1/(2 pi)^(d/2)``.  Products are computed exactly with the
product-to-sum identities, so no quadrature or aliasing is involved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product as iproduct

import numpy as np

from .errors import EmptyBasis

COS, SIN = 0, 1
PARITY_NAMES = ("cos", "sin")
_BOUND = 1 << 10
_BASE = 2 * _BOUND + 1


def mode_norm(wv: np.ndarray) -> np.ndarray:
    """Normalising constant ``c_n`` per wavevector row."""
    d = wv.shape[1]
    c = np.full(wv.shape[0], math.sqrt(2.0) / (2 * math.pi) ** (d / 2))
    c[~wv.any(axis=1)] = 1.0 / (2 * math.pi) ** (d / 2)
    return c


def mode_keys(wv: np.ndarray, par: np.ndarray) -> np.ndarray:
    """Sortable int64 key for (wavevector, parity)."""
    k = np.zeros(wv.shape[0], dtype=np.int64)
    for j in range(wv.shape[1]):
        k = k * _BASE + (wv[:, j].astype(np.int64) + _BOUND)
    return 2 * k + par.astype(np.int64)


def canonicalize(wv: np.ndarray, par: np.ndarray, coef: np.ndarray):
    """Map ``-n`` to ``n`` (sin coefficients change sign) and drop ``sin(0)``."""
    wv = np.array(wv, dtype=np.int64)
    coef = np.array(coef, dtype=float)
    par = np.asarray(par, dtype=np.int8)
    nz = wv != 0
    first = wv[np.arange(wv.shape[0]), np.argmax(nz, axis=1)]
    flip = first < 0
    wv[flip] *= -1
    coef[flip & (par == SIN)] *= -1
    keep = ~(~nz.any(axis=1) & (par == SIN))
    return wv[keep], par[keep], coef[keep]


@dataclass(frozen=True)
class SpectralField:
    """Vector field ``sum_m coef[m] phi_m`` with ``coef`` of shape ``(M, d)``."""

    wavevectors: np.ndarray
    parity: np.ndarray
    coef: np.ndarray
    divfree: bool = False

    @property
    def d(self) -> int:
        return self.wavevectors.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return mode_keys(self.wavevectors, self.parity)

    @classmethod
    def from_terms(cls, wv, par, coef, divfree: bool = False, d: int | None = None) -> "SpectralField":
        """Canonicalise, merge duplicate modes and sort by key."""
        wv = np.asarray(wv, dtype=np.int64)
        coef = np.asarray(coef, dtype=float)
        if d is None:
            d = wv.shape[-1]
        wv = wv.reshape(-1, d)
        coef = coef.reshape(wv.shape[0], -1)
        par = np.asarray(par).reshape(-1)
        wv, par, coef = canonicalize(wv, par, coef)
        keys = mode_keys(wv, par)
        uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        acc = np.zeros((uniq.size, coef.shape[1]))
        np.add.at(acc, inv.reshape(-1), coef)
        return cls(wv[first], par[first], acc, divfree)

    @classmethod
    def zero(cls, d: int) -> "SpectralField":
        return cls(np.zeros((0, d), dtype=np.int64), np.zeros(0, dtype=np.int8), np.zeros((0, d)), True)

    @classmethod
    def constant(cls, vector) -> "SpectralField":
        v = np.asarray(vector, dtype=float)
        d = v.size
        return cls.from_terms(np.zeros((1, d)), [COS], v[None, :] * (2 * math.pi) ** (d / 2), divfree=True)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField.from_terms(np.vstack([self.wavevectors, other.wavevectors]),
                                        np.concatenate([self.parity, other.parity]),
                                        np.vstack([self.coef, other.coef]),
                                        self.divfree and other.divfree, self.d)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "SpectralField":
        return SpectralField(self.wavevectors, self.parity, a * self.coef, self.divfree)

    def divergence_residual(self) -> float:
        if self.coef.size == 0:
            return 0.0
        return float(np.abs((self.wavevectors * self.coef).sum(axis=1)).max())

    def evaluate(self, *x: np.ndarray) -> np.ndarray:
        """Point values; ``x`` are d coordinate arrays of equal shape. Returns ``(..., d)``."""
        phase = sum(n_j[:, None] * np.ravel(xj)[None, :] for n_j, xj in zip(self.wavevectors.T, x))
        trig = np.where((self.parity == SIN)[:, None], np.sin(phase), np.cos(phase))
        vals = (mode_norm(self.wavevectors)[:, None] * trig).T @ self.coef
        return vals.reshape(np.shape(x[0]) + (self.d,))


# --------------------------------------------------------------------------- exact products

def trig_products(wa, pa, wb, pb):
    """Products ``phi_a * phi_b`` for all pairs as two unit modes each.

    Returns ``(wv, par, w)`` with shapes ``(2, Ma, Mb, d)``, ``(2, Ma, Mb)``,
    ``(2, Ma, Mb)``; the result modes are ``a+b`` and ``a-b`` (not canonicalised).
    """
    sa = (pa == SIN)[:, None]
    sb = (pb == SIN)[None, :]
    plus = wa[:, None, :] + wb[None, :, :]
    minus = wa[:, None, :] - wb[None, :, :]
    par = np.broadcast_to(np.where(sa ^ sb, SIN, COS), plus.shape[:2]).astype(np.int8)
    w_plus = np.where(sa & sb, -0.5, 0.5)
    w_minus = np.where(~sa & sb, -0.5, 0.5)
    cab = mode_norm(wa)[:, None] * mode_norm(wb)[None, :]
    d = wa.shape[1]
    w_plus = cab * w_plus / mode_norm(plus.reshape(-1, d)).reshape(plus.shape[:2])
    w_minus = cab * w_minus / mode_norm(minus.reshape(-1, d)).reshape(minus.shape[:2])
    return np.stack([plus, minus]), np.stack([par, par]), np.stack([w_plus, w_minus])


def _derivative_parts(f: SpectralField):
    """``d_j phi`` = ``sign * n_j * phi'`` with the parity swapped."""
    sign = np.where(f.parity == SIN, 1.0, -1.0)
    return (1 - f.parity).astype(np.int8), sign


def convective(u: SpectralField, v: SpectralField) -> SpectralField:
    """``(u . grad) v`` computed exactly."""
    d = u.d
    if u.coef.shape[0] == 0 or v.coef.shape[0] == 0:
        return SpectralField.zero(d)
    vpar, sign = _derivative_parts(v)
    s = (u.coef @ v.wavevectors.T) * sign[None, :]          # (Ma, Mb): (u_a . n_b) sign_b
    wv, par, w = trig_products(u.wavevectors, u.parity, v.wavevectors, vpar)
    coef = (w * s[None])[..., None] * v.coef[None, None, :, :]
    return SpectralField.from_terms(wv, par, coef, d=d)


def advect(sigma, f: SpectralField) -> SpectralField:
    """``(sigma . grad) f``; ``sigma`` is a constant vector or a field."""
    if isinstance(sigma, SpectralField):
        return convective(sigma, f)
    sig = np.asarray(sigma, dtype=float)
    par, sign = _derivative_parts(f)
    factor = (f.wavevectors @ sig) * sign
    return SpectralField.from_terms(f.wavevectors, par, factor[:, None] * f.coef, f.divfree, f.d)


def inner(f: SpectralField, g: SpectralField) -> float:
    """``L^2`` inner product."""
    _, i, j = np.intersect1d(f.keys, g.keys, assume_unique=True, return_indices=True)
    return float(np.sum(f.coef[i] * g.coef[j]))


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    """``b(u, v, w) = int ((u . grad) v) . w``."""
    return inner(convective(u, v), w)


def _project_p(f: SpectralField) -> SpectralField:
    n = f.wavevectors.astype(float)
    n2 = (n ** 2).sum(axis=1)
    safe = np.where(n2 > 0, n2, 1.0)
    coef = f.coef - ((n * f.coef).sum(axis=1) / safe)[:, None] * n
    return SpectralField(f.wavevectors, f.parity, coef, True)


def leray_project(f: SpectralField) -> tuple[SpectralField, SpectralField]:
    """``(P f, Q f)``; the mean mode stays in ``P f``."""
    pf = _project_p(f)
    return pf, SpectralField(f.wavevectors, f.parity, f.coef - pf.coef, False)


def gradient_part(f: SpectralField) -> SpectralField:
    return leray_project(f)[1]


def nonlinear_term(u: SpectralField) -> tuple[SpectralField, SpectralField]:
    """``(B_P(u), B_Q(u))`` from ``B(u) = (u . grad) u``."""
    return leray_project(convective(u, u))


def sobolev_norm(f: SpectralField, alpha: float) -> float:
    n2 = (f.wavevectors.astype(float) ** 2).sum(axis=1)
    return float(np.sqrt(np.sum((1.0 + n2) ** alpha * (f.coef ** 2).sum(axis=1))))


def smoothing_apply(f: SpectralField, eta: float) -> SpectralField:
    """``J^eta = S_N`` with ``N = floor(1/eta)``: keep modes with ``|n| < N``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    N = math.floor(1.0 / eta)
    keep = (f.wavevectors.astype(float) ** 2).sum(axis=1) < N * N
    return SpectralField(f.wavevectors[keep], f.parity[keep], f.coef[keep], f.divfree)


# --------------------------------------------------------------------------- wavenumbers and bases

@dataclass(frozen=True)
class WavenumberSet:
    """Representatives ``n != 0`` with ``|n|^2 <= cutoff``, ordered by ``|n|^2`` then lexicographically."""

    d: int
    cutoff: int
    vectors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = int(math.isqrt(max(self.cutoff, 0)))
        pts = np.array(list(iproduct(range(-r, r + 1), repeat=self.d)), dtype=np.int64).reshape(-1, self.d)
        n2 = (pts ** 2).sum(axis=1)
        pts = pts[(n2 > 0) & (n2 <= self.cutoff)]
        first = pts[np.arange(len(pts)), np.argmax(pts != 0, axis=1)] if len(pts) else np.zeros(0)
        pts = pts[first > 0]
        order = np.lexsort(tuple(pts[:, j] for j in range(self.d - 1, -1, -1)) + ((pts ** 2).sum(axis=1),))
        object.__setattr__(self, "vectors", pts[order])

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _polarizations(n: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``(d-1, d)`` of the plane orthogonal to ``n``."""
    n = n.astype(float)
    if n.size == 2:
        return (np.array([n[1], -n[0]]) / np.linalg.norm(n))[None, :]
    e = np.zeros(n.size)
    e[np.argmin(np.abs(n))] = 1.0
    m1 = e - (e @ n) / (n @ n) * n
    m1 /= np.linalg.norm(m1)
    m2 = np.cross(n, m1) / np.linalg.norm(n)
    return np.stack([m1, m2])


@dataclass(frozen=True)
class ModeBasis:
    """Orthonormal family of single-mode fields ``polarization[i] * phi_{wavevector[i], parity[i]}``."""

    wavevectors: np.ndarray
    parity: np.ndarray
    polarization: np.ndarray
    solenoidal: np.ndarray  # True for divergence-free elements
    cutoff: int

    @property
    def d(self) -> int:
        return self.wavevectors.shape[1]

    def __len__(self) -> int:
        return self.wavevectors.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return (self.wavevectors.astype(float) ** 2).sum(axis=1)

    @property
    def keys(self) -> np.ndarray:
        return mode_keys(self.wavevectors, self.parity)

    def element(self, i: int) -> SpectralField:
        return SpectralField(self.wavevectors[i:i + 1], self.parity[i:i + 1],
                             self.polarization[i:i + 1].copy(), bool(self.solenoidal[i]))

    def synthesize(self, c: np.ndarray) -> SpectralField:
        c = np.asarray(c, dtype=float)
        return SpectralField.from_terms(self.wavevectors, self.parity, c[:, None] * self.polarization,
                                        bool(self.solenoidal.all()), self.d)

    def coordinates(self, f: SpectralField) -> np.ndarray:
        """``(f, e_i)`` for every basis element."""
        return self.scatter(f.keys, f.coef, np.zeros(f.keys.size, dtype=np.int64), 1)[0]

    def scatter(self, keys: np.ndarray, vecs: np.ndarray, owner: np.ndarray, n_owner: int) -> np.ndarray:
        """Accumulate ``out[owner, i] += vecs . polarization[i]`` for terms whose key matches element ``i``.

        ``keys`` must be canonical.  Terms with no matching element are dropped.
        """
        out = np.zeros((n_owner, len(self)))
        bkeys = self.keys
        order = np.argsort(bkeys, kind="stable")
        sk = bkeys[order]
        lo = np.searchsorted(sk, keys, side="left")
        hi = np.searchsorted(sk, keys, side="right")
        width = hi - lo
        for r in range(int(width.max()) if width.size else 0):
            sel = width > r
            idx = order[lo[sel] + r]
            val = np.einsum("td,td->t", vecs[sel], self.polarization[idx])
            np.add.at(out, (owner[sel], idx), val)
        return out

    def concat(self, other: "ModeBasis") -> "ModeBasis":
        return ModeBasis(np.vstack([self.wavevectors, other.wavevectors]),
                         np.concatenate([self.parity, other.parity]),
                         np.vstack([self.polarization, other.polarization]),
                         np.concatenate([self.solenoidal, other.solenoidal]),
                         max(self.cutoff, other.cutoff))


def _build_basis(cutoff: int, d: int, gradient: bool) -> ModeBasis:
    ws = WavenumberSet(d, cutoff)
    if len(ws) == 0:
        raise EmptyBasis(f"no non-zero wavenumber with |n|^2 <= {cutoff}")
    wv, par, pol = [], [], []
    for n in ws.vectors:
        pols = (n / np.linalg.norm(n))[None, :] if gradient else _polarizations(n)
        for m in pols:
            for p in (SIN, COS):
                wv.append(n)
                par.append(p)
                pol.append(m)
    M = len(wv)
    return ModeBasis(np.array(wv, dtype=np.int64), np.array(par, dtype=np.int8), np.array(pol),
                     np.full(M, not gradient), cutoff)


def build_divfree_basis(cutoff: int, d: int = 2) -> ModeBasis:
    """Divergence-free modes ``m_j(n) phi_{n,sin/cos}`` with ``0 < |n|^2 <= cutoff``."""
    return _build_basis(cutoff, d, gradient=False)


def build_gradient_basis(cutoff: int, d: int = 2) -> ModeBasis:
    """Gradient modes ``(n/|n|) phi_{n,sin/cos}`` spanning the range of ``Q``."""
    return _build_basis(cutoff, d, gradient=True)


def build_full_basis(cutoff: int, grad_cutoff: int | None = None, d: int = 2) -> ModeBasis:
    """Divergence-free block followed by the gradient block."""
    return build_divfree_basis(cutoff, d).concat(build_gradient_basis(cutoff if grad_cutoff is None else grad_cutoff, d))


# --------------------------------------------------------------------------- noise coefficients

@dataclass(frozen=True)
class SigmaFamily:
    """Noise coefficients ``sigma_k``: constant vectors or divergence-free band-limited fields."""

    d: int
    channels: tuple

    def __post_init__(self):
        chans = []
        for c in self.channels:
            if isinstance(c, SpectralField):
                if c.d != self.d:
                    raise ValueError("channel dimension mismatch")
                if c.divergence_residual() > 1e-12:
                    raise ValueError("noise coefficients must be divergence free")
                chans.append(c)
            else:
                v = np.asarray(c, dtype=float).reshape(-1)
                if v.size != self.d:
                    raise ValueError("channel dimension mismatch")
                chans.append(v)
        object.__setattr__(self, "channels", tuple(chans))

    @property
    def K(self) -> int:
        return len(self.channels)

    @property
    def is_constant(self) -> bool:
        return all(not isinstance(c, SpectralField) for c in self.channels)

    def as_field(self, k: int) -> SpectralField:
        c = self.channels[k]
        return c if isinstance(c, SpectralField) else SpectralField.constant(c)

    @property
    def N0(self) -> float:
        """Bound on ``sup |d^a sigma_k|`` for ``|a| <= 2`` over all channels."""
        best = 0.0
        for k in range(self.K):
            f = self.as_field(k)
            amp = np.linalg.norm(f.coef, axis=1) * mode_norm(f.wavevectors)
            nn = np.linalg.norm(f.wavevectors.astype(float), axis=1)
            best = max(best, *(float(np.sum(amp * nn ** a)) for a in range(3)))
        return best

    @property
    def max_wavenumber(self) -> float:
        out = 0.0
        for k in range(self.K):
            f = self.as_field(k)
            if f.wavevectors.size:
                out = max(out, float(np.linalg.norm(f.wavevectors.astype(float), axis=1).max()))
        return out


# --------------------------------------------------------------------------- assembled operators

def operator_matrix(sigma, source: ModeBasis, target: ModeBasis) -> np.ndarray:
    """``A[i, j] = ((sigma . grad) e_j, f_i)`` for source ``e`` and target ``f``."""
    d = source.d
    sig = sigma if isinstance(sigma, SpectralField) else SpectralField.constant(sigma)
    if sig.coef.shape[0] == 0:
        return np.zeros((len(target), len(source)))
    vpar, sign = _derivative_parts(SpectralField(source.wavevectors, source.parity, source.polarization))
    s = (sig.coef @ source.wavevectors.T) * sign[None, :]    # (Ms, Mj)
    wv, par, w = trig_products(sig.wavevectors, sig.parity, source.wavevectors, vpar)
    coef = (w * s[None])[..., None] * source.polarization[None, None, :, :]
    owner = np.broadcast_to(np.arange(len(source))[None, None, :], w.shape)
    keys, coef2, owner2 = _canonical_terms(wv, par, coef, owner, d)
    return target.scatter(keys, coef2, owner2, len(source)).T


def _canonical_terms(wv, par, coef, owner, d):
    """Flatten raw product terms into canonical keys, keeping track of owners."""
    wv = wv.reshape(-1, d)
    par = par.reshape(-1)
    coef = coef.reshape(wv.shape[0], -1)
    owner = owner.reshape(-1)
    keep = ~(~wv.any(axis=1) & (par == SIN))
    wv, par, coef = canonicalize(wv[keep], par[keep], coef[keep])
    return mode_keys(wv, par), coef, owner[keep]


def convective_tensor(source: ModeBasis, target: ModeBasis) -> np.ndarray:
    """``T[j, l, i] = b(e_j, e_l, f_i)`` for source ``e`` and target ``f``."""
    d = source.d
    M = len(source)
    vpar, sign = _derivative_parts(SpectralField(source.wavevectors, source.parity, source.polarization))
    s = (source.polarization @ source.wavevectors.T) * sign[None, :]   # (m_j . n_l) sign_l
    wv, par, w = trig_products(source.wavevectors, source.parity, source.wavevectors, vpar)
    coef = (w * s[None])[..., None] * source.polarization[None, None, :, :]
    owner = np.broadcast_to((np.arange(M)[:, None] * M + np.arange(M)[None, :])[None], w.shape)
    keys, coef2, owner2 = _canonical_terms(wv, par, coef, owner, d)
    return target.scatter(keys, coef2, owner2, M * M).reshape(M, M, len(target))


# --------------------------------------------------------------------------- CSV

def write_field_csv(f: SpectralField, file) -> None:
    from .roughpath import write_rows
    header = [f"n{j + 1}" for j in range(f.d)] + ["parity", "comp", "value"]
    rows = ([*map(int, n), PARITY_NAMES[p], c + 1, float(v[c])]
            for n, p, v in zip(f.wavevectors, f.parity, f.coef) for c in range(f.d))
    write_rows(file, header, rows)


def read_field_csv(file) -> SpectralField:
    with open(file) as fh:
        header = fh.readline().strip().split(",")
        d = header.index("parity")
        wv, par, coef = [], [], []
        for line in fh:
            parts = line.strip().split(",")
            if not parts[0]:
                continue
            n = [int(x) for x in parts[:d]]
            e = np.zeros(d)
            e[int(parts[d + 1]) - 1] = float(parts[d + 2])
            wv.append(n)
            par.append(PARITY_NAMES.index(parts[d]))
            coef.append(e)
    return SpectralField.from_terms(np.array(wv).reshape(-1, d), np.array(par), np.array(coef).reshape(-1, d), d=d)


def write_basis_manifest(basis: ModeBasis, file) -> None:
    from .roughpath import write_rows
    header = ["index"] + [f"n{j + 1}" for j in range(basis.d)] + ["parity", "lambda"]
    rows = ([i, *map(int, n), PARITY_NAMES[p], float(lam)]
            for i, (n, p, lam) in enumerate(zip(basis.wavevectors, basis.parity, basis.eigenvalues)))
    write_rows(file, header, rows)
