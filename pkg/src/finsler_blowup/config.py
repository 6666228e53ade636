"""Run configuration: parsing and validation of the YAML/JSON run file."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import DomainSpec
from .norms import NormSpec
from .pde import ProblemSpec, SourceSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = "1.0"

_DEFAULT_TOL = {
    "newton_tol": None,
    "stop_tol": 1e-3,
    "monitor_delta": None,
    "delta0": 0.2,
    "eps": 0.5,
    "fit_band": None,
    "fit_alpha_rel": 0.10,
    "fit_C0_rel": 0.15,
    "band_fraction": 0.25,
    "boundary_samples": 4096,
    "norm_samples": 1000,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    norm: NormSpec
    domain: DomainSpec
    resolution: int = 64
    q: float = 2.0
    lam: float = 1.0
    source: SourceSpec = field(default_factory=SourceSpec)
    M_schedule: list = field(default_factory=lambda: [10.0, 20.0, 40.0, 80.0, 160.0])
    lambda_schedule: list = field(default_factory=lambda: [2.0**-k for k in range(13)])
    tolerances: dict = field(default_factory=lambda: dict(_DEFAULT_TOL))
    close_at_infinity: bool = True
    gates: dict = field(default_factory=dict)
    offsets: list = field(default_factory=lambda: [0.0, 0.5, -0.5])
    rayleigh: bool = True
    plots: bool = True
    sweep: dict = field(default_factory=dict)
    out_dir: str | None = None
    seed: int = 0
    raw: dict = field(default_factory=dict)

    def problem(self, lam: float | None = None) -> ProblemSpec:
        return ProblemSpec(self.norm, self.domain, self.q, self.lam if lam is None else lam, self.source)

    def tol(self, key):
        return self.tolerances.get(key, _DEFAULT_TOL.get(key))


def _require(d, key, kind, where):
    if key not in d:
        raise ConfigError(f"missing '{key}' in {where}")
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"'{key}' in {where} has the wrong type")
    return v


def _float_list(v, name):
    if isinstance(v, dict):
        base = float(v.get("base", 2.0))
        kmin, kmax = int(v.get("kmin", 0)), int(v["kmax"])
        sign = -1 if name == "lambda" else 1
        return [base ** (sign * k) * float(v.get("scale", 1.0)) for k in range(kmin, kmax + 1)]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"schedule '{name}' must be a non-empty list")
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule '{name}' must hold numbers") from exc


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        norm = NormSpec.from_dict(data.get("norm", {"family": "Euclidean"}))
        domain = DomainSpec.from_dict(data.get("domain", {"shape": "Disk", "radius": 1.0}))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid norm/domain: {exc}") from exc
    res = data.get("resolution", 64)
    if not isinstance(res, int) or res < 16:
        raise ConfigError("resolution must be an integer >= 16")
    prob = data.get("problem", {}) or {}
    if not isinstance(prob, dict):
        raise ConfigError("'problem' must be a mapping")
    try:
        q = float(prob.get("q", 2.0))
        lam = float(prob.get("lambda", 1.0))
        source = SourceSpec.from_dict(prob.get("source", {}) or {})
        ProblemSpec(norm, domain, q, lam, source)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid problem: {exc}") from exc
    sched = data.get("schedules", {}) or {}
    M = _float_list(sched.get("M", [10, 20, 40, 80, 160]), "M")
    if len(M) < 2 or any(b <= a for a, b in zip(M, M[1:])) or any(not math.isfinite(m) for m in M):
        raise ConfigError("M schedule must be finite and strictly increasing")
    lams = _float_list(sched.get("lambda", {"base": 2, "kmax": 12}), "lambda")
    if any(b >= a for a, b in zip(lams, lams[1:])) or min(lams) <= 0:
        raise ConfigError("lambda schedule must be positive and strictly decreasing")
    tol = dict(_DEFAULT_TOL)
    user_tol = data.get("tolerances", {}) or {}
    unknown = set(user_tol) - set(_DEFAULT_TOL)
    if unknown:
        raise ConfigError(f"unknown tolerance keys: {sorted(unknown)}")
    tol.update(user_tol)
    if not 0 < float(tol["band_fraction"]) < 1:
        raise ConfigError("band_fraction must lie in (0, 1)")
    erg = data.get("ergodic", {}) or {}
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    sweep = data.get("sweep", {}) or {}
    if sweep:
        for key in ("q", "norm", "resolution"):
            if key in sweep and not isinstance(sweep[key], list):
                raise ConfigError(f"sweep.{key} must be a list")
        if sweep.get("command", "solve") not in ("norms", "distance", "solve", "ergodic"):
            raise ConfigError("sweep.command must be one of norms, distance, solve, ergodic")
    return RunConfig(
        norm=norm,
        domain=domain,
        resolution=res,
        q=q,
        lam=lam,
        source=source,
        M_schedule=M,
        lambda_schedule=lams,
        tolerances=tol,
        close_at_infinity=bool(data.get("close_at_infinity", True)),
        gates=dict(data.get("gates", {}) or {}),
        offsets=[float(c) for c in erg.get("offsets", [0.0, 0.5, -0.5])],
        rayleigh=bool(erg.get("rayleigh", True)),
        plots=bool(data.get("plots", True)),
        sweep=sweep,
        out_dir=data.get("output"),
        seed=seed,
        raw=data,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return parse_config(data)
