"""Experiment configuration: ``key = value`` lines grouped under ``[section]`` headers.

Example::

    [model]
    cutoff = 4
    nu = 0.01
    T = 1.0
    initial = taylor-green
    noise = const(1, 0); modes(1 0 sin 0.3, 0 1 cos 0.2)

    [driver]
    kind = brownian
    source_level = 12
    mesh_level = 8
    seed = 0

Unknown sections or keys are rejected so that typos surface as errors.
"""
from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .roughpath import _parse_kind
from .spectral import PARITY_NAMES, SigmaFamily, SpectralField, _polarizations

MEMORY_BUDGET = 2 ** 30

_SCHEMA = {
    "model": {"d", "cutoff", "grad_cutoff", "nu", "T", "substeps", "initial", "initial_scale", "noise"},
    "driver": {"kind", "hurst", "source_level", "mesh_level", "p", "seed"},
    "analysis": {"levels", "replicas", "margin"},
    "wong_zakai": {"k_min", "k_max", "max_mean_ratio", "oracle_factor"},
    "tolerances": {"energy", "chen", "oracle"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 2
    cutoff: int = 4
    grad_cutoff: int | None = None
    nu: float = 0.01
    T: float = 1.0
    substeps: int = 8
    initial: str = "taylor-green"
    initial_scale: float = 1.0
    noise: SigmaFamily = field(default_factory=lambda: SigmaFamily(2, (np.array([1.0, 0.0]),)))
    driver_kind: str = "brownian"
    hurst: float | None = None
    source_level: int = 12
    mesh_level: int = 8
    p: float = 2.5
    seed: int = 0
    level_min: int = 3
    level_max: int = 8
    replicas: int = 8
    margin: float = 0.15
    k_min: int = 4
    k_max: int = 9
    max_mean_ratio: float = 0.75
    oracle_factor: float = 3.0
    energy_tol: float = 1e-6
    chen_tol: float = 1e-10
    oracle_tol: float = 1e-6

    @property
    def K(self) -> int:
        return self.noise.K

    @property
    def threads(self) -> int:
        try:
            return max(1, int(os.environ.get("ROUGHNS_THREADS", "1")))
        except ValueError:
            raise ConfigError("ROUGHNS_THREADS", "must be an integer") from None


_CHANNEL_RE = re.compile(r"^\s*(const|modes)\s*\((.*)\)\s*$")


def parse_noise(text: str, d: int) -> SigmaFamily:
    """``const(a, b); modes(n1 n2 parity amplitude, ...)``: one channel per ``;`` item."""
    chans = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        m = _CHANNEL_RE.match(item)
        if not m:
            raise ConfigError("model.noise", f"cannot parse channel {item!r}")
        kind, body = m.groups()
        try:
            if kind == "const":
                v = np.array([float(x) for x in body.split(",")])
                if v.size != d:
                    raise ConfigError("model.noise", f"constant channel needs {d} components")
                chans.append(v)
                continue
            wv, par, coef = [], [], []
            for term in filter(None, (s.strip() for s in body.split(","))):
                parts = term.split()
                if len(parts) != d + 2:
                    raise ConfigError("model.noise", f"mode term {term!r} needs {d} wavenumbers, parity, amplitude")
                n = np.array([int(x) for x in parts[:d]])
                if not n.any():
                    raise ConfigError("model.noise", "use const(...) for the mean mode")
                if parts[d] not in PARITY_NAMES:
                    raise ConfigError("model.noise", f"parity must be sin or cos, got {parts[d]!r}")
                wv.append(n)
                par.append(PARITY_NAMES.index(parts[d]))
                coef.append(float(parts[d + 1]) * _polarizations(n)[0])
            chans.append(SpectralField.from_terms(np.array(wv), np.array(par), np.array(coef), divfree=True, d=d))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("model.noise", str(exc)) from None
    if not chans:
        raise ConfigError("model.noise", "at least one channel is required")
    return SigmaFamily(d, tuple(chans))


def _get(sec, key, conv, default, name):
    if sec is None or key not in sec:
        return default
    raw = sec[key].split("#")[0].strip()
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(name, f"invalid value {raw!r}") from None


def _levels(text: str) -> tuple[int, int]:
    a, b = text.split("..")
    return int(a), int(b)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    return config_from_parser(parser)


def config_from_string(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    return config_from_parser(parser)


def config_from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    for sec in parser.sections():
        if sec not in _SCHEMA:
            raise ConfigError(sec, "unknown section")
        for key in parser[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}", "unknown key")
    g = {s: parser[s] if parser.has_section(s) else None for s in _SCHEMA}
    base = ExperimentConfig()
    d = _get(g["model"], "d", int, base.d, "model.d")
    noise_text = _get(g["model"], "noise", str, None, "model.noise")
    lv = _get(g["analysis"], "levels", _levels, (base.level_min, base.level_max), "analysis.levels")
    cfg = ExperimentConfig(
        d=d,
        cutoff=_get(g["model"], "cutoff", int, base.cutoff, "model.cutoff"),
        grad_cutoff=_get(g["model"], "grad_cutoff", int, None, "model.grad_cutoff"),
        nu=_get(g["model"], "nu", float, base.nu, "model.nu"),
        T=_get(g["model"], "T", float, base.T, "model.T"),
        substeps=_get(g["model"], "substeps", int, base.substeps, "model.substeps"),
        initial=_get(g["model"], "initial", str, base.initial, "model.initial"),
        initial_scale=_get(g["model"], "initial_scale", float, base.initial_scale, "model.initial_scale"),
        noise=parse_noise(noise_text, d) if noise_text else SigmaFamily(d, (np.eye(d)[0],)),
        driver_kind=_get(g["driver"], "kind", str, base.driver_kind, "driver.kind"),
        hurst=_get(g["driver"], "hurst", float, None, "driver.hurst"),
        source_level=_get(g["driver"], "source_level", int, base.source_level, "driver.source_level"),
        mesh_level=_get(g["driver"], "mesh_level", int, base.mesh_level, "driver.mesh_level"),
        p=_get(g["driver"], "p", float, base.p, "driver.p"),
        seed=_get(g["driver"], "seed", int, base.seed, "driver.seed"),
        level_min=lv[0],
        level_max=lv[1],
        replicas=_get(g["analysis"], "replicas", int, base.replicas, "analysis.replicas"),
        margin=_get(g["analysis"], "margin", float, base.margin, "analysis.margin"),
        k_min=_get(g["wong_zakai"], "k_min", int, base.k_min, "wong_zakai.k_min"),
        k_max=_get(g["wong_zakai"], "k_max", int, base.k_max, "wong_zakai.k_max"),
        max_mean_ratio=_get(g["wong_zakai"], "max_mean_ratio", float, base.max_mean_ratio, "wong_zakai.max_mean_ratio"),
        oracle_factor=_get(g["wong_zakai"], "oracle_factor", float, base.oracle_factor, "wong_zakai.oracle_factor"),
        energy_tol=_get(g["tolerances"], "energy", float, base.energy_tol, "tolerances.energy"),
        chen_tol=_get(g["tolerances"], "chen", float, base.chen_tol, "tolerances.chen"),
        oracle_tol=_get(g["tolerances"], "oracle", float, base.oracle_tol, "tolerances.oracle"),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.d not in (2, 3):
        raise ConfigError("model.d", "dimension must be 2 or 3")
    if cfg.cutoff < 1:
        raise ConfigError("model.cutoff", "must be >= 1")
    if cfg.grad_cutoff is not None and cfg.grad_cutoff < 1:
        raise ConfigError("model.grad_cutoff", "must be >= 1")
    if not cfg.nu > 0:
        raise ConfigError("model.nu", "viscosity must be positive")
    if not cfg.T > 0:
        raise ConfigError("model.T", "horizon must be positive")
    if cfg.substeps < 2 or cfg.substeps % 2:
        raise ConfigError("model.substeps", "must be an even number >= 2")
    if cfg.initial not in ("taylor-green", "random", "zero"):
        raise ConfigError("model.initial", "must be taylor-green, random or zero")
    if cfg.initial == "taylor-green" and (cfg.d != 2 or cfg.cutoff < 2):
        raise ConfigError("model.initial", "Taylor-Green data needs d = 2 and cutoff >= 2")
    try:
        _parse_kind(cfg.driver_kind, cfg.hurst)
    except Exception as exc:
        raise ConfigError("driver.kind", str(exc)) from None
    if not 2.0 <= cfg.p < 3.0:
        raise ConfigError("driver.p", "must lie in [2, 3)")
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("driver.seed", "must be an unsigned 64-bit integer")
    if not 1 <= cfg.mesh_level <= cfg.source_level <= 16:
        raise ConfigError("driver.mesh_level", "need 1 <= mesh_level <= source_level <= 16")
    if not 1 <= cfg.level_min < cfg.level_max:
        raise ConfigError("analysis.levels", "need 1 <= min < max")
    if cfg.replicas < 1:
        raise ConfigError("analysis.replicas", "must be >= 1")
    if not 1 <= cfg.k_min < cfg.k_max:
        raise ConfigError("wong_zakai.k_min", "need 1 <= k_min < k_max")
    n = 2 ** cfg.mesh_level + 1
    if n * n * cfg.K * cfg.K * 8 > MEMORY_BUDGET:
        raise ConfigError("driver.mesh_level", "second-level lift table exceeds the memory budget")
    if not math.isfinite(cfg.nu * cfg.T):
        raise ConfigError("model.nu", "must be finite")
