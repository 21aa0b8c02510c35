"""Spectral Galerkin toolkit for Navier-Stokes on the torus with rough transport noise."""
from .errors import *  # noqa: F401,F403
from .roughpath import (GridControl, GridPath, RoughLift, SewingResult, chen_defect, iterated_integral,
                        lift_control, lift_piecewise_linear, mollify_driver, p_variation, sample_gaussian_driver,
                        sewing_integrate, variation_control)
from .spectral import (SigmaFamily, SpectralField, WavenumberSet, advect, build_divfree_basis, build_gradient_basis,
                       leray_project, nonlinear_term, smoothing_apply, sobolev_norm, trilinear_b)
from .urd import DriverMatrices, assemble_drivers, assemble_first_order, assemble_second_order, chen_check, control_bound_check
from .galerkin import GalerkinTensors, Trajectory, assemble_tensors, exact_oracle_shifted_tg, run, step, taylor_green
from .analysis import (RemainderScan, compute_mu, compute_remainders, energy_defect, fit_slopes, gronwall_check,
                       recover_pressure, variation_scan)

__version__ = "0.1.0"
