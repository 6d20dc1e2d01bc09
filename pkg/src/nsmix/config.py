"""Sectioned key-value configuration (INI syntax, values as Python literals)."""
from __future__ import annotations

import ast
import configparser
import copy
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError
from .noise import CylinderSpec, NoiseBasis, amplitude_rule, build_noise_basis
from .solver import MAX_DT, PeriodicForce
from .spectral import SpectralVelocity, WaveGrid, build_grid

__all__ = ["DEFAULTS", "LabConfig", "parse_config", "parse_config_text", "default_forcing"]

DEFAULTS: dict[str, dict] = {
    "physics": {"nu": 0.5, "K": 8, "dt": 1e-3, "mc_dt": 1e-2},
    "forcing": {"kind": "default", "amplitude": 1.0},
    "noise": {
        "J": 64,
        "b0": 0.3,
        "s": 1.0,
        "cylinder": [0.25, 0.75, 0.5 * np.pi, 1.5 * np.pi, 0.5 * np.pi, 1.5 * np.pi],
    },
    "control": {
        "N": 8,
        "delta": 2e-2,
        "m": 32,
        "q": 0.25,
        "d": "auto",
        "mode": "frozen",
        "policy": "reference",
        "certify": True,
    },
    "experiment": {
        "near_d": 0.02,
        "burn_in": 10,
        "simulate_periods": 3,
        "simulate_noise": False,
        "u0_amplitude": 0.5,
        "contraction_pairs": 200,
        "observability_m": [16, 32, 64],
        "coupling_distances": [1e-3, 3e-3, 1e-2, 3e-2],
        "coupling_samples": 10000,
        "event_chains": 16,
        "event_steps": 10,
        "stabilize_steps": 10,
        "recurrence_chains": 500,
        "recurrence_horizon": 40,
        "squeeze_chains": 500,
        "squeeze_horizon": 12,
        "squeeze_fractions": [0.125, 0.25, 0.5, 1.0],
        "mix_chains": 300,
        "k_max": 30,
        "h2_points": 50,
        "h2_radius": 2.0,
        "h2_eps": 1e-3,
        "h2_lmax": 80,
    },
    "output": {"dir": "nsmix_out"},
    "run": {"seed": 0, "threads": 1},
}

_CHOICES = {
    ("forcing", "kind"): ("default", "zero"),
    ("control", "mode"): ("frozen", "exact"),
    ("control", "policy"): ("state", "reference"),
}


def _literal(raw: str):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return raw


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if section == "control" and key == "d":
        if value == "auto":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0:
            return float(value)
        raise ConfigurationError(f"{where} must be a positive number or 'auto'")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        choices = _CHOICES.get((section, key))
        if choices and value not in choices:
            raise ConfigurationError(f"{where} must be one of {', '.join(choices)}")
        return value
    return value


@dataclass
class LabConfig:
    """Resolved configuration; ``values`` mirrors :data:`DEFAULTS`."""

    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def as_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, kv in self.values.items():
            cp[sec] = {k: repr(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, **sections) -> "LabConfig":
        vals = self.as_dict()
        for sec, kv in sections.items():
            for k, v in kv.items():
                if sec not in vals or k not in vals[sec]:
                    raise ConfigurationError(f"unknown key [{sec}] {k}")
                vals[sec][k] = _coerce(sec, k, v, DEFAULTS[sec][k])
        return _validate(vals)

    # -- derived objects ------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def grid(self) -> WaveGrid:
        return build_grid(self["physics"]["K"])

    def cylinder(self) -> CylinderSpec:
        return CylinderSpec.from_list(self["noise"]["cylinder"])

    def basis(self, grid: WaveGrid | None = None) -> NoiseBasis:
        n = self["noise"]
        return build_noise_basis(
            self.cylinder(), n["J"], grid=grid or self.grid(), b0=n["b0"], decay_s=n["s"], n_active=self["control"]["m"]
        )

    def forcing(self, grid: WaveGrid | None = None) -> PeriodicForce | None:
        f = self["forcing"]
        g = grid or self.grid()
        if f["kind"] == "zero" or f["amplitude"] == 0:
            return None
        return default_forcing(g, f["amplitude"])


def default_forcing(grid: WaveGrid, amplitude: float = 1.0) -> PeriodicForce:
    """Steady mode ``(1, 1)`` plus a ``cos(2 pi t)`` mode ``(0, 2)``, scaled by ``amplitude``."""
    steady = SpectralVelocity.mode(grid, (1, 1), 0.5).coeffs
    wave = SpectralVelocity.mode(grid, (0, 2), 0.5).coeffs
    return PeriodicForce(grid, np.stack([amplitude * steady, 0.5 * amplitude * wave]))


def _validate(vals: dict) -> LabConfig:
    p, n, c, e = vals["physics"], vals["noise"], vals["control"], vals["experiment"]
    if not p["nu"] > 0:
        raise ConfigurationError("[physics] nu must be positive")
    if p["K"] < 2:
        raise ConfigurationError("[physics] K must be at least 2")
    for key in ("dt", "mc_dt"):
        dt = p[key]
        if not 0 < dt <= MAX_DT or abs(round(1.0 / dt) * dt - 1.0) > 1e-9:
            raise ConfigurationError(f"[physics] {key} must divide 1 and lie in (0, {MAX_DT}]")
    CylinderSpec.from_list(n["cylinder"])
    if n["J"] < 1:
        raise ConfigurationError("[noise] J must be positive")
    if n["b0"] == 0:
        raise ConfigurationError(
            "noise non-degeneracy violated: b0 = 0 makes every amplitude b_j vanish, so the noise cannot act on the controlled directions"
        )
    amplitude_rule(n["J"], n["b0"], n["s"])
    if n["b0"] < 0:
        raise ConfigurationError("[noise] b0 must be positive")
    if not 1 <= c["m"] <= n["J"]:
        raise ConfigurationError("[control] m must lie in [1, J]")
    if not c["N"] >= 1:
        raise ConfigurationError("[control] N must be positive")
    if not c["delta"] > 0:
        raise ConfigurationError("[control] delta must be positive")
    if not 0 < c["q"] < 1:
        raise ConfigurationError("[control] q must lie in (0, 1)")
    if not e["near_d"] > 0:
        raise ConfigurationError("[experiment] near_d must be positive")
    for key in ("recurrence_chains", "squeeze_chains", "mix_chains", "coupling_samples", "contraction_pairs"):
        if e[key] < 1:
            raise ConfigurationError(f"[experiment] {key} must be positive")
    if vals["run"]["seed"] < 0 or vals["run"]["seed"] >= 2**64:
        raise ConfigurationError("[run] seed must be an unsigned 64-bit integer")
    return LabConfig(vals)


def parse_config_text(text: str) -> LabConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed configuration: {exc}") from exc
    vals = copy.deepcopy(DEFAULTS)
    for sec in cp.sections():
        if sec not in vals:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in vals[sec]:
                raise ConfigurationError(f"unknown key [{sec}] {key}")
            vals[sec][key] = _coerce(sec, key, _literal(raw), DEFAULTS[sec][key])
    return _validate(vals)


def parse_config(path: str | Path | None = None) -> LabConfig:
    """Read and validate a configuration file; ``None`` gives the defaults."""
    if path is None:
        return parse_config_text("")
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"configuration file not found: {p}")
    return parse_config_text(p.read_text())
