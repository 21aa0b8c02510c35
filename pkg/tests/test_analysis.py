from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.integrate import cumulative_simpson, simpson

from roughns.analysis import (compute_mu, compute_remainders, energy_defect, fit_slopes, full_space_forms,
                              gronwall_check, pair_table, pressure_germ_defect, recover_pressure,
                              remainder_values, single_equation_remainder, variation_scan, write_scan_csv,
                              write_slopes_csv)
from roughns.errors import DriverMismatch, GridMismatch
from roughns.galerkin import assemble_tensors, run, taylor_green
from roughns.roughpath import GridControl, GridPath, lift_piecewise_linear, mollify_driver, sample_gaussian_driver
from roughns.spectral import SIN, SigmaFamily, SpectralField, build_divfree_basis, leray_project, nonlinear_term
from roughns.urd import assemble_drivers

B4 = build_divfree_basis(4)
CONST_X = SigmaFamily(2, (np.array([1.0, 0.0]),))
ZERO = SigmaFamily(2, (np.zeros(2),))


def band_sigma() -> SigmaFamily:
    raw = SpectralField.from_terms([[1, 1], [0, 1]], [SIN, 0], [[0.3, -0.3], [0.25, 0.0]])
    return SigmaFamily(2, (leray_project(raw)[0],))


def solve(sigma, u0, z, basis=B4, nu=0.01, substeps=8):
    tens = assemble_tensors(basis, sigma, nu)
    traj = run(u0, z, z.T, tens, substeps=substeps)
    return traj, assemble_drivers(sigma, lift_piecewise_linear(z), basis)


def linear(n, slope=0.7):
    t = np.linspace(0, 1, n)
    return GridPath(t, slope * t[:, None])


def brownian(level, seed=0, mesh=None):
    z = sample_gaussian_driver("brownian", np.linspace(0, 1, 2 ** level + 1), seed)
    return z if mesh is None else mollify_driver(z, 2.0 ** -mesh, control_ratio=False).lift.path


def brute_local_pvar(G, q, allowed):
    n = G.shape[0]
    best = -np.inf
    for r in range(n - 1):
        for inner in itertools.combinations(range(1, n - 1), r):
            pts = (0, *inner, n - 1)
            if all(allowed[a, b] for a, b in zip(pts, pts[1:])):
                best = max(best, sum(G[a, b] ** q for a, b in zip(pts, pts[1:])))
    return best ** (1 / q)


class TestMu:
    def test_zero_solution(self):
        traj, _ = solve(CONST_X, SpectralField.zero(2), linear(9))
        mu = compute_mu(traj)
        assert not mu.mu.any()
        t = mu.times
        assert np.allclose(mu.omega.values[np.triu_indices(9)], (t[None, :] - t[:, None])[np.triu_indices(9)])

    def test_taylor_green_viscous_only(self):
        nu = 0.01
        traj, _ = solve(ZERO, taylor_green(), linear(17), nu=nu)
        mu = compute_mu(traj)
        c0 = traj.states[0]
        t = mu.times
        exact = -nu * B4.eigenvalues * c0 * ((1 - np.exp(-2 * nu * t)) / (2 * nu))[:, None]
        assert np.abs(mu.mu - exact).max() <= 1e-10
        assert mu.omega.superadditivity_defect() <= 1e-12


class TestRemainders:
    def test_sigma_zero_remainder_vanishes(self):
        u0 = np.random.default_rng(1).standard_normal(len(B4))
        traj, dr = solve(ZERO, u0, brownian(6))
        scan = compute_remainders(traj, dr)
        assert scan.sup_uPnat.max() <= 1e-8 and scan.sup_uQnat.max() <= 1e-8

    def test_smooth_driver_cubic_rate_without_drift(self):
        traj, dr = solve(CONST_X, taylor_green(), linear(257), nu=1e-6)
        fit = fit_slopes(compute_remainders(traj, dr))
        assert fit["uPnat"].slope >= 2.7
        assert fit["du"].slope == pytest.approx(1.0, abs=0.05)

    def test_smooth_driver_generic_data_is_quadratic(self):
        u0 = np.random.default_rng(0).standard_normal(len(B4)) * 0.5
        traj, dr = solve(CONST_X, u0, linear(257), nu=0.0)
        assert fit_slopes(compute_remainders(traj, dr))["uPnat"].slope == pytest.approx(2.0, abs=0.1)

    def test_triple_integral_oracle(self):
        # smooth driver, constant sigma: the P-remainder equals its nested-integral form
        a = 0.7
        traj, dr = solve(CONST_X, np.random.default_rng(4).standard_normal(len(B4)) * 0.5, linear(9, a),
                         substeps=64)
        M = dr.MP[0]
        tens = traj.tensors
        drift = np.array([tens.drift(c) for c in traj.states])
        for s, t in ((0, 8), (2, 5), (3, 4)):
            i0, i1 = traj.grid_index[s], traj.grid_index[t]
            r = traj.times[i0:i1 + 1]
            dmu = cumulative_simpson(drift[i0:i1 + 1], x=r, axis=0, initial=0)
            U = cumulative_simpson(traj.states[i0:i1 + 1], x=r, axis=0, initial=0)
            inner = dmu + a * U @ M.T
            X = cumulative_simpson(a * inner @ M.T, x=r, axis=0, initial=0)
            oracle = simpson(a * dmu @ M.T, x=r, axis=0) + simpson(a * X @ M.T, x=r, axis=0)
            got = remainder_values(traj, dr, np.array([s]), np.array([t])).uP[0]
            assert np.abs(got - oracle).max() <= 1e-6

    def test_delta_algebra(self):
        traj, dr = solve(CONST_X, taylor_green(), brownian(4))
        du = pair_table(traj, dr, "du")
        n = du.shape[0]
        worst = max(np.abs(du[s, t] - du[s, u] - du[u, t]).max() for s, u, t in itertools.combinations(range(n), 3))
        assert worst <= 1e-14

    def test_grid_mismatch(self):
        traj, _ = solve(CONST_X, taylor_green(), linear(9))
        _, other = solve(CONST_X, taylor_green(), linear(17))
        with pytest.raises(GridMismatch):
            compute_remainders(traj, other)
        _, bent = solve(CONST_X, taylor_green(), linear(9, slope=0.5))
        with pytest.raises(GridMismatch):
            compute_remainders(traj, bent)

    def test_scan_needs_dyadic_grid(self):
        traj, dr = solve(CONST_X, taylor_green(), linear(7))
        with pytest.raises(GridMismatch):
            compute_remainders(traj, dr)

    def test_csv(self, tmp_path):
        traj, dr = solve(CONST_X, taylor_green(), brownian(5))
        scan = compute_remainders(traj, dr)
        write_scan_csv(scan, tmp_path / "scan.csv")
        write_slopes_csv(fit_slopes(scan, levels=(2, 5)), tmp_path / "slopes.csv")
        assert (tmp_path / "scan.csv").read_text().splitlines()[0] == "level,dt,sup_uPnat,sup_uQnat,sup_usharp,sup_du"
        assert (tmp_path / "slopes.csv").read_text().splitlines()[0] == "quantity,slope,intercept,r2"


class TestPressure:
    def test_constant_sigma_is_pure_drift(self):
        traj, dr = solve(CONST_X, taylor_green(), brownian(5))
        pr = recover_pressure(traj, dr)
        assert not pr.sewn.any() and not pr.pi[0].any()

    def test_taylor_green_gradient_field(self):
        nu = 0.01
        traj, dr = solve(ZERO, taylor_green(), linear(17), nu=nu)
        pr = recover_pressure(traj, dr)
        g = dr.grad_basis
        x = np.linspace(0, 2 * np.pi, 7)
        X, Y = np.meshgrid(x, x, indexing="ij")
        T = traj.T
        amp = 0.5 * (1 - np.exp(-4 * nu * T)) / (4 * nu)
        field = g.synthesize(pr.pi[-1]).evaluate(X, Y)
        expect = amp * np.stack([np.sin(2 * X), np.sin(2 * Y)], axis=-1)
        assert np.abs(field - expect).max() <= 1e-9

    def test_zero_solution(self):
        traj, dr = solve(band_sigma(), SpectralField.zero(2), brownian(4))
        assert not recover_pressure(traj, dr).pi.any()

    def test_sigma_zero_matches_quadrature(self):
        u0 = np.random.default_rng(2).standard_normal(len(B4)) * 0.5
        traj, dr = solve(ZERO, u0, linear(9), substeps=16)
        pr = recover_pressure(traj, dr)
        g = dr.grad_basis
        bq = np.array([g.coordinates(nonlinear_term(B4.synthesize(c))[1]) for c in traj.states])
        oracle = -simpson(bq, x=traj.times, axis=0)
        assert np.abs(pr.pi[-1] - oracle).max() <= 1e-8

    def test_band_limited_sigma(self):
        sig = band_sigma()
        traj, dr = solve(sig, taylor_green(), brownian(5, mesh=5))
        pr = recover_pressure(traj, dr)
        assert np.isfinite(pr.sewing.residual_ratio)
        assert pr.sewing.precondition_excess <= 0
        n = traj.grid_times.size
        triples = list(itertools.combinations(range(n), 3))
        assert pressure_germ_defect(traj, dr, triples) <= 1e-12
        table = pair_table(traj, dr, "uQ")
        assert np.isfinite(variation_scan(table, 2.5, lift=dr.lift)["global"])


class TestEquivalence:
    def test_single_equation_matches_system(self):
        sig = band_sigma()
        traj, dr = solve(sig, taylor_green(), brownian(4, seed=2))
        pr = recover_pressure(traj, dr)
        n = traj.grid_times.size
        s, t = np.triu_indices(n, 1)
        rv = remainder_values(traj, dr, s, t, pr)
        single = single_equation_remainder(traj, dr, pr, s, t, full_space_forms(dr))
        M = dr.M
        assert np.abs(single[:, :M] - rv.uP).max() <= 1e-10
        assert np.abs(single[:, M:] - rv.uQ).max() <= 1e-10


class TestVariationScan:
    def test_examples(self):
        t = np.linspace(0, 2, 6)
        lift = lift_piecewise_linear(GridPath(t, t[:, None]))
        assert variation_scan(np.zeros((6, 6)), 2, lift=lift)["local"] == 0
        g = np.abs(t[None, :] - t[:, None])
        assert variation_scan(g, 1, lift=lift)["global"] == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_against_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 11))
        G = np.abs(rng.standard_normal((n, n)))
        t = np.linspace(0, 1, n)
        varpi = GridControl(t, np.abs(t[None, :] - t[:, None]))
        L = 0.5
        res = variation_scan(G, 2.0, varpi=varpi, L=L)
        assert res["local"] == pytest.approx(brute_local_pvar(G, 2.0, varpi.values <= L), rel=1e-12)
        assert res["local"] <= res["global"] + 1e-12


class TestEnergyAndStability:
    def test_energy_defect(self):
        traj, _ = solve(CONST_X, taylor_green(), brownian(12, mesh=8))
        assert energy_defect(traj) <= 1e-7 * 2
        traj0, _ = solve(CONST_X, SpectralField.zero(2), linear(5))
        assert energy_defect(traj0) == 0.0

    def test_reduced_isometry(self):
        tens = assemble_tensors(B4, CONST_X, 0.0, nonlinear=False)
        traj = run(np.random.default_rng(0).standard_normal(len(B4)), brownian(8, mesh=6), 1.0, tens, substeps=32)
        assert energy_defect(traj) <= 1e-10

    def test_gronwall(self):
        z = brownian(10, seed=1, mesh=6)
        tens = assemble_tensors(build_divfree_basis(5), CONST_X, 0.02)
        rng = np.random.default_rng(0)
        u1 = rng.standard_normal(len(tens.basis)) * 0.5
        dv = rng.standard_normal(len(tens.basis)) * 1e-4
        t1 = run(u1, z, 1.0, tens)
        t2 = run(u1 + dv, z, 1.0, tens)
        th = run(u1 + 0.5 * dv, z, 1.0, tens)
        rep = gronwall_check(t1, t2, th)
        assert rep["bound_holds"] and np.isfinite(rep["c"])
        assert rep["half_ratio"] == pytest.approx(0.25, rel=0.1)
        same = gronwall_check(t1, run(u1, z, 1.0, tens))
        assert same["bound_holds"] and not same["lhs"].any()
        zero = gronwall_check(t1, run(np.zeros_like(u1), z, 1.0, tens))
        assert np.allclose(zero["lhs"], t1.energy + t1.dissipation)

    def test_driver_mismatch(self):
        tens = assemble_tensors(B4, CONST_X, 0.01)
        a = run(taylor_green(), brownian(6, seed=0), 1.0, tens)
        b = run(taylor_green(), brownian(6, seed=1), 1.0, tens)
        with pytest.raises(DriverMismatch):
            gronwall_check(a, b)
