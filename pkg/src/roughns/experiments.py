"""Experiment runners behind the command line.

Every runner writes CSV files into ``out`` and returns an
:class:`ExperimentResult` whose ``passed`` flag decides the exit status.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .config import ExperimentConfig
from .errors import ConfigError, NumericalBlowup
from .galerkin import (GalerkinTensors, Trajectory, assemble_tensors, exact_oracle_shifted_tg, run, taylor_green,
                       write_trajectory_csv)
from .roughpath import (GridPath, Mollified, chen_defect, make_rng, mollify_driver, sample_gaussian_driver,
                        write_lift_csv, write_path_csv, write_rows)
from .spectral import SigmaFamily, build_divfree_basis, write_basis_manifest
from .urd import assemble_drivers, chen_check


@dataclass
class ExperimentResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_summary(out: Path, res: ExperimentResult) -> None:
    rows = [["passed", str(int(res.passed))]]
    for k, v in res.metrics.items():
        rows.append([k, float(v) if isinstance(v, (float, np.floating)) else str(v)])
    write_rows(out / "summary.csv", ["metric", "value"], rows)
    res.files.append(str(out / "summary.csv"))


def source_driver(cfg: ExperimentConfig, seed: int) -> GridPath:
    grid = np.linspace(0.0, cfg.T, 2 ** cfg.source_level + 1)
    return sample_gaussian_driver(cfg.driver_kind, grid, seed, K=cfg.K, hurst=cfg.hurst)


def mollified(cfg: ExperimentConfig, z: GridPath, level: int) -> Mollified:
    return mollify_driver(z, cfg.T * 2.0 ** -level, cfg.p, control_ratio=False)


def initial_field(cfg: ExperimentConfig, tensors: GalerkinTensors, seed: int):
    basis = tensors.basis
    if cfg.initial == "taylor-green":
        return taylor_green(amplitude=cfg.initial_scale)
    if cfg.initial == "zero":
        return np.zeros(len(basis))
    rng = make_rng(seed, 1)
    return cfg.initial_scale * rng.standard_normal(len(basis)) / (1.0 + basis.eigenvalues)


def tensors_for(cfg: ExperimentConfig, sigma: SigmaFamily | None = None) -> GalerkinTensors:
    return assemble_tensors(build_divfree_basis(cfg.cutoff, cfg.d), cfg.noise if sigma is None else sigma, cfg.nu)


def _require_2d(cfg: ExperimentConfig, name: str) -> None:
    if cfg.d != 2:
        raise ConfigError("model.d", f"{name} runs the 2-d solver; d = {cfg.d} is not supported")


def _oracle_available(cfg: ExperimentConfig) -> bool:
    return cfg.noise.is_constant and cfg.d == 2 and cfg.initial == "taylor-green"


# --------------------------------------------------------------------------- energy

def run_energy_check(cfg: ExperimentConfig, out) -> ExperimentResult:
    _require_2d(cfg, "energy-check")
    if not cfg.noise.is_constant:
        raise ConfigError("model.noise", "energy-check needs constant noise coefficients")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tens = tensors_for(cfg)
    z = source_driver(cfg, cfg.seed)
    m = mollified(cfg, z, cfg.mesh_level)
    traj = run(initial_field(cfg, tens, cfg.seed), m.lift.path, cfg.T, tens, cfg.substeps)
    res = ExperimentResult("energy-check", True)
    defect = analysis.energy_defect(traj)
    res.metrics.update(energy_defect=defect, initial_energy=float(traj.energy[0]),
                       terminal_energy=float(traj.energy[-1]), dissipation=float(traj.dissipation[-1]))
    res.passed = defect <= cfg.energy_tol
    if _oracle_available(cfg):
        exact = exact_oracle_shifted_tg(cfg.noise, m.lift.path.values[-1], cfg.nu, cfg.T)
        err = float(np.linalg.norm(traj.states[-1] - tens.basis.coordinates(exact)))
        res.metrics["terminal_oracle_error"] = err
        res.passed = res.passed and err <= cfg.oracle_tol
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_basis_manifest(tens.basis, out / "basis.csv")
    write_path_csv(m.lift.path, out / "driver.csv")
    res.files += [str(out / f) for f in ("trajectory.csv", "basis.csv", "driver.csv")]
    _write_summary(out, res)
    return res


# --------------------------------------------------------------------------- Wong-Zakai

def _sup_difference(coarse: Trajectory, fine: Trajectory) -> float:
    """sup over the fine driver nodes of ``|u_coarse - u_fine|_0``."""
    idx = np.searchsorted(coarse.times, fine.grid_times - 1e-12 * max(1.0, fine.T))
    if not np.allclose(coarse.times[idx], fine.grid_times, rtol=0, atol=1e-12):
        raise ValueError("coarse run does not resolve the fine driver nodes")
    return float(np.linalg.norm(coarse.states[idx] - fine.grid_states, axis=1).max())


def run_wong_zakai(cfg: ExperimentConfig, out, k_min: int | None = None, k_max: int | None = None) -> ExperimentResult:
    """Solve with the driver mollified at ``2^-k T`` for each level on one sample."""
    _require_2d(cfg, "wong-zakai")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    k_min = cfg.k_min if k_min is None else k_min
    k_max = cfg.k_max if k_max is None else k_max
    if not 1 <= k_min < k_max <= cfg.source_level:
        raise ConfigError("wong_zakai.k_max", "need 1 <= k_min < k_max <= driver.source_level")
    tens = tensors_for(cfg)
    z = source_driver(cfg, cfg.seed)
    u0 = initial_field(cfg, tens, cfg.seed)
    levels = list(range(k_min, k_max + 1))

    def solve(k):
        try:
            return run(u0, mollified(cfg, z, k).lift.path, cfg.T, tens, cfg.substeps)
        except NumericalBlowup as exc:
            raise NumericalBlowup(f"level {k}: {exc}") from None

    trajs = dict(zip(levels, _pmap(solve, levels, cfg.threads)))
    e = np.array([_sup_difference(trajs[k], trajs[k + 1]) for k in levels[:-1]])
    ratios = e[1:] / e[:-1]
    oracle = np.full(e.size, np.nan)
    if _oracle_available(cfg):
        basis = tens.basis
        for i, k in enumerate(levels[:-1]):
            fine = trajs[k + 1]
            zc = mollified(cfg, z, k).path.at(fine.grid_times)
            zf = fine.driver.values
            oracle[i] = max(
                float(np.linalg.norm(basis.coordinates(exact_oracle_shifted_tg(cfg.noise, a, cfg.nu, t))
                                     - basis.coordinates(exact_oracle_shifted_tg(cfg.noise, b, cfg.nu, t))))
                for a, b, t in zip(zc, zf, fine.grid_times))
    rate = float(-np.polyfit(np.array(levels[:-1], float), np.log2(np.maximum(e, 1e-300)), 1)[0])
    monotone = bool(np.all(np.diff(e[1:]) < 0)) if e.size > 2 else True
    mean_ratio = float(ratios.mean()) if ratios.size else 0.0
    res = ExperimentResult("wong-zakai", True)
    res.metrics.update(decay_rate_log2=rate, mean_ratio=mean_ratio, monotone_after_first=int(monotone))
    res.passed = monotone and mean_ratio <= cfg.max_mean_ratio
    if np.isfinite(oracle).all() and oracle.size:
        factor = float(np.max(np.maximum(e / oracle, oracle / e)))
        res.metrics["oracle_factor"] = factor
        res.passed = res.passed and factor <= cfg.oracle_factor
    rows = []
    for i, k in enumerate(levels[:-1]):
        rows.append([k, float(cfg.T * 2.0 ** -k), float(e[i]), float(ratios[i - 1]) if i else "",
                     float(oracle[i]) if np.isfinite(oracle[i]) else ""])
    write_rows(out / "wong_zakai.csv", ["level", "mesh", "e_k", "ratio", "oracle_e_k"], rows)
    res.files.append(str(out / "wong_zakai.csv"))
    res.metrics["e_k"] = " ".join(format(x, ".6g") for x in e)
    _write_summary(out, res)
    return res


# --------------------------------------------------------------------------- remainder scan

def remainder_replica(cfg: ExperimentConfig, seed: int, tens: GalerkinTensors | None = None,
                      control: bool = True):
    """Scan and slopes for one driver sample; with ``control`` a sigma = 0 run flags quadrature floors."""
    tens = tensors_for(cfg) if tens is None else tens
    z = source_driver(cfg, seed)
    m = mollified(cfg, z, cfg.mesh_level)
    u0 = initial_field(cfg, tens, seed)
    traj = run(u0, m.lift.path, cfg.T, tens, cfg.substeps)
    drivers = assemble_drivers(cfg.noise, m.lift, tens.basis, cfg.grad_cutoff)
    scan = analysis.compute_remainders(traj, drivers)
    ctrl = None
    if control:
        zero = SigmaFamily(cfg.d, tuple(np.zeros(cfg.d) for _ in range(cfg.K)))
        t0 = tensors_for(cfg, zero)
        tr0 = run(u0, m.lift.path, cfg.T, t0, cfg.substeps)
        ctrl = analysis.compute_remainders(tr0, assemble_drivers(zero, m.lift, t0.basis, cfg.grad_cutoff))
    slopes = analysis.fit_slopes(scan, (cfg.level_min, cfg.level_max), ctrl)
    return scan, slopes


def slope_thresholds(cfg: ExperimentConfig) -> dict[str, float]:
    return {"uPnat": 3 / cfg.p - cfg.margin, "usharp": 2 / cfg.p - cfg.margin, "du": 1 / cfg.p - cfg.margin}


def run_remainder_scan(cfg: ExperimentConfig, out) -> ExperimentResult:
    _require_2d(cfg, "remainder-scan")
    if cfg.level_max > cfg.mesh_level:
        raise ConfigError("analysis.levels", "finest level exceeds the driver mesh level")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tens = tensors_for(cfg)
    seeds = [cfg.seed + r for r in range(cfg.replicas)]
    results = _pmap(lambda s: remainder_replica(cfg, s, tens), seeds, cfg.threads)
    res = ExperimentResult("remainder-scan", True)
    for r, (scan, slopes) in enumerate(results):
        analysis.write_scan_csv(scan, out / f"remainder_scan_r{r}.csv")
        analysis.write_slopes_csv(slopes, out / f"slopes_r{r}.csv")
        res.files += [str(out / f"remainder_scan_r{r}.csv"), str(out / f"slopes_r{r}.csv")]
    median = {q: float(np.median([sl[q].slope for _, sl in results])) for q in results[0][1]}
    rows = [[q, median[q], float(np.median([sl[q].intercept for _, sl in results])),
             float(np.median([sl[q].r2 for _, sl in results]))] for q in median]
    write_rows(out / "slopes.csv", ["quantity", "slope", "intercept", "r2"], rows)
    res.files.append(str(out / "slopes.csv"))
    for q, thr in slope_thresholds(cfg).items():
        res.metrics[f"median_slope_{q}"] = median[q]
        res.metrics[f"threshold_{q}"] = thr
        res.passed = res.passed and median[q] >= thr
    res.metrics["median_slope_uQnat"] = median["uQnat"]
    _write_summary(out, res)
    return res


# --------------------------------------------------------------------------- Chen audit

def run_chen_audit(cfg: ExperimentConfig, out, corrupt_zz: float | None = None) -> ExperimentResult:
    """Chen and quasi-Chen defects of the assembled drivers on the mollified grid."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    z = source_driver(cfg, cfg.seed)
    lift = mollified(cfg, z, cfg.mesh_level).lift
    if corrupt_zz:
        ZZ = lift.ZZ.copy()
        ZZ[0, lift.n - 1, 0, lift.K - 1] += corrupt_zz
        lift = lift.with_ZZ(ZZ)
    basis = build_divfree_basis(cfg.cutoff, cfg.d)
    drivers = assemble_drivers(cfg.noise, lift, basis, cfg.grad_cutoff)
    defects = {"lift": chen_defect(lift), **chen_check(drivers)}
    res = ExperimentResult("chen-audit", all(v <= cfg.chen_tol for v in defects.values()))
    res.metrics.update({f"defect_{k}": v for k, v in defects.items()})
    res.metrics["grid_points"] = lift.n
    res.metrics["basis_size"] = len(basis)
    write_rows(out / "chen_audit.csv", ["relation", "defect"], ([k, float(v)] for k, v in defects.items()))
    res.files.append(str(out / "chen_audit.csv"))
    if lift.n <= 129:
        write_lift_csv(lift, out / "lift.csv")
        res.files.append(str(out / "lift.csv"))
    _write_summary(out, res)
    return res


EXPERIMENTS = {
    "energy-check": run_energy_check,
    "wong-zakai": run_wong_zakai,
    "remainder-scan": run_remainder_scan,
    "chen-audit": run_chen_audit,
}
