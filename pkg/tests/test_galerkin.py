from __future__ import annotations

import math

import numpy as np
import pytest

from roughns.errors import BasisMismatch, NumericalBlowup, OracleUnavailable
from roughns.galerkin import (assemble_tensors, cumulative_simpson, exact_oracle_shifted_tg, run, step,
                              taylor_green, write_trajectory_csv)
from roughns.roughpath import GridPath, mollify_driver, sample_gaussian_driver
from roughns.spectral import SigmaFamily, SpectralField, build_divfree_basis, leray_project, sobolev_norm, \
    trilinear_b

BASIS4 = build_divfree_basis(4)
CONST_X = SigmaFamily(2, (np.array([1.0, 0.0]),))


def linear_driver(n: int, T: float = 1.0, slope=(1.0,)) -> GridPath:
    t = np.linspace(0, T, n)
    return GridPath(t, np.outer(t, slope))


def tg_error(traj, sigma, nu):
    oracle = exact_oracle_shifted_tg(sigma, traj.driver.values[-1], nu, traj.T)
    return sobolev_norm(traj.field() - oracle, 0)


class TestTensors:
    def test_antisymmetries(self):
        sig = SigmaFamily(2, (np.array([1.0, 0.5]), leray_project(SpectralField.from_terms([[1, 1]], [1], [[1.0, 0.0]]))[0]))
        tens = assemble_tensors(build_divfree_basis(5), sig, 0.01)
        assert np.abs(tens.B + np.swapaxes(tens.B, 1, 2)).max() <= 1e-12
        assert np.abs(tens.A + np.swapaxes(tens.A, 1, 2)).max() <= 1e-12
        assert np.all(tens.lam > 0)

    def test_nonlinear_tensor_matches_field_form(self):
        b = build_divfree_basis(5)
        tens = assemble_tensors(b, CONST_X, 0.01)
        rng = np.random.default_rng(0)
        for _ in range(20):
            j, l, i = rng.integers(len(b), size=3)
            assert tens.B[j, l, i] == pytest.approx(trilinear_b(b.element(j), b.element(l), b.element(i)), abs=1e-14)

    def test_constant_sigma_couples_pairs(self):
        A = assemble_tensors(BASIS4, CONST_X, 0.01).A[0]
        for i in range(0, len(BASIS4), 2):
            n = BASIS4.wavevectors[i]
            assert abs(A[i, i + 1]) == pytest.approx(abs(n[0]))
            assert np.count_nonzero(A[i]) == (1 if n[0] else 0)

    def test_zero_sigma(self):
        assert not assemble_tensors(BASIS4, SigmaFamily(2, (np.zeros(2),)), 0.01).A.any()


class TestStep:
    def test_heat_decay_single_mode(self):
        tens = assemble_tensors(BASIS4, SigmaFamily(2, (np.zeros(2),)), 0.1, nonlinear=False)
        c = np.zeros(len(BASIS4))
        c[-1] = 1.0
        dt = 0.01
        out = step(c, dt, np.zeros(1), tens)
        assert out[-1] == pytest.approx(math.exp(-0.1 * 4 * dt), abs=1e-12)

    def test_rotation_and_zero_state(self):
        tens = assemble_tensors(BASIS4, CONST_X, 0.0, nonlinear=False)
        c = np.random.default_rng(1).standard_normal(len(BASIS4))
        assert not step(np.zeros_like(c), 0.01, np.array([3.0]), tens).any()
        x = c.copy()
        for _ in range(1000):
            x = step(x, 1e-3, np.array([1.0]), tens)
        assert np.linalg.norm(x) == pytest.approx(np.linalg.norm(c), rel=1e-10)
        # each (sin, cos) pair rotates by angle (sigma . n) * dz
        for i in range(0, len(BASIS4), 2):
            ang = BASIS4.wavevectors[i][0] * 1.0
            R = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            assert np.allclose(x[i:i + 2], R @ c[i:i + 2], atol=1e-10)

    def test_blowup(self):
        tens = assemble_tensors(BASIS4, CONST_X, 0.01)
        with pytest.raises(NumericalBlowup):
            run(np.full(len(BASIS4), 1e7), linear_driver(3), 1.0, tens)


class TestRun:
    def test_taylor_green_heat_decay(self):
        nu = 0.01
        tens = assemble_tensors(BASIS4, SigmaFamily(2, (np.zeros(2),)), nu)
        traj = run(taylor_green(), linear_driver(65), 1.0, tens)
        c0 = traj.states[0]
        err = np.abs(traj.states - np.exp(-2 * nu * traj.times)[:, None] * c0).max()
        assert err <= 1e-8

    def test_zero_initial_data(self):
        traj = run(SpectralField.zero(2), linear_driver(9), 1.0, assemble_tensors(BASIS4, CONST_X, 0.01))
        assert not traj.states.any() and not traj.energy.any() and not traj.dissipation.any()

    def test_shifted_tg_oracle_brownian(self):
        z = sample_gaussian_driver("brownian", np.linspace(0, 1, 2 ** 12 + 1), 0)
        m = mollify_driver(z, 2 ** -8, control_ratio=False)
        tens = assemble_tensors(BASIS4, CONST_X, 0.01)
        traj = run(taylor_green(), m.lift.path, 1.0, tens)
        assert tg_error(traj, CONST_X, 0.01) <= 1e-6

    def test_translation_at_pi(self):
        tens = assemble_tensors(BASIS4, CONST_X, 0.0)
        traj = run(taylor_green(), linear_driver(65, T=math.pi), math.pi, tens, substeps=16)
        assert np.allclose(traj.states[-1], -traj.states[0], atol=1e-8)
        assert sobolev_norm(exact_oracle_shifted_tg(CONST_X, [math.pi], 0.0, math.pi) + taylor_green(), 0) < 1e-14

    def test_rk4_order(self):
        tens = assemble_tensors(BASIS4, CONST_X, 0.05)
        drv = GridPath(np.linspace(0, 1, 9), np.sin(3 * np.linspace(0, 1, 9))[:, None])
        errs = []
        for sub in (4, 8, 16):
            traj = run(taylor_green(), drv, 1.0, tens, substeps=sub, energy_tol=1e-3)
            errs.append(tg_error(traj, CONST_X, 0.05))
        assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8

    def test_energy_identity_and_monotonicity(self):
        rng = np.random.default_rng(2)
        b = build_divfree_basis(8)
        sig = SigmaFamily(2, (np.array([1.0, 0.0]), np.array([0.0, 1.0])))
        tens = assemble_tensors(b, sig, 0.01)
        z = mollify_driver(sample_gaussian_driver("brownian", np.linspace(0, 1, 1025), 3, K=2), 2 ** -6,
                           control_ratio=False).lift.path
        traj = run(rng.standard_normal(len(b)) * 0.5, z, 1.0, tens, substeps=16)
        assert np.all(np.abs(traj.energy_defect()) <= 1e-7 * (1 + traj.times))
        assert np.all(np.diff(traj.energy) <= 1e-12)

    def test_inviscid_conservation_with_nonlinearity(self):
        b = build_divfree_basis(5)
        tens = assemble_tensors(b, CONST_X, 0.0)
        c = np.random.default_rng(3).standard_normal(len(b)) * 0.3
        traj = run(c, linear_driver(129), 1.0, tens)
        assert np.abs(traj.energy - traj.energy[0]).max() <= 1e-8

    def test_galerkin_consistency(self):
        small, big = build_divfree_basis(2), build_divfree_basis(5)
        nu = 0.02
        a = run(taylor_green(), linear_driver(33), 1.0, assemble_tensors(small, CONST_X, nu))
        bb = run(taylor_green(), linear_driver(33), 1.0, assemble_tensors(big, CONST_X, nu))
        assert sobolev_norm(a.field() - bb.field(), 0) <= 1e-12

    def test_basis_mismatch(self):
        tens = assemble_tensors(BASIS4, CONST_X, 0.01)
        with pytest.raises(BasisMismatch):
            run(taylor_green() + SpectralField.constant([1.0, 0.0]), linear_driver(3), 1.0, tens)
        outside = build_divfree_basis(9).element(27)
        with pytest.raises(BasisMismatch):
            run(outside, linear_driver(3), 1.0, tens)
        with pytest.raises(BasisMismatch):
            run(taylor_green(), GridPath(np.linspace(0, 1, 3), np.zeros((3, 2))), 1.0, tens)


class TestOracle:
    def test_requires_constant_sigma(self):
        sig = SigmaFamily(2, (leray_project(SpectralField.from_terms([[1, 0]], [1], [[0.0, 1.0]]))[0],))
        with pytest.raises(OracleUnavailable):
            exact_oracle_shifted_tg(sig, [0.0], 0.01, 1.0)

    def test_plain_decay_and_norm(self):
        assert sobolev_norm(exact_oracle_shifted_tg(CONST_X, [0.0], 0.0, 3.0) - taylor_green(), 0) == 0
        for z in (0.3, -2.0, 11.0):
            f = exact_oracle_shifted_tg(CONST_X, [z], 0.0, 1.0)
            assert sobolev_norm(f, 0) ** 2 == pytest.approx(2 * math.pi ** 2, rel=1e-14)


def test_cumulative_simpson():
    t = np.linspace(0, 2, 17)
    got = cumulative_simpson(t ** 3 - t, t)
    assert np.allclose(got[::2], (t ** 4 / 4 - t ** 2 / 2)[::2], atol=1e-13)
    got = cumulative_simpson(t ** 2, t)
    assert np.allclose(got, t ** 3 / 3, atol=1e-13)


def test_trajectory_csv(tmp_path):
    traj = run(taylor_green(), linear_driver(3), 1.0, assemble_tensors(BASIS4, CONST_X, 0.01), substeps=2)
    write_trajectory_csv(traj, tmp_path / "tr.csv")
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "t," + ",".join(f"c_{i}" for i in range(1, 13)) + ",energy,dissipation_integral"
    assert len(lines) == 1 + traj.times.size
