"""Flat ``key = value`` run configuration shared by the model and the simulator.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .demux import DemuxConfig
from .efficiency import NOMINAL_STAGES, EmitterPhysics, StageEfficiencies
from .errors import ConfigError, InvalidInputError
from .streamsim import DetectorModel

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def _float(key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(key, f"{key}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigError(key, f"{key}: value must be finite")
    return v


def _int(key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(key, f"{key}: expected an integer, got {raw!r}") from None
    if not v.is_integer():
        raise ConfigError(key, f"{key}: expected an integer, got {raw!r}")
    return int(v)


def _floats(key, raw):
    return tuple(_float(key, x) for x in raw.split(",") if x.strip())


def _str(key, raw):
    return raw.strip()


# key -> parser; the value lands in RunConfig.values under the same key
KEYS = {
    # demultiplexer model
    "m_modes": _int, "n_pulses": _int, "f_rep_hz": _float, "eta_sw": _float, "eta_m": _floats,
    "eta_fiber": _float, "eta_det": _float, "dead_time_ns": _float, "recovery_kind": _str,
    "tau_recover_ns": _float,
    # source
    "eta_s": _float, "p_e": _float, "eta_b": _float, "beta": _float, "eta_oc": _float,
    "t_optics": _float, "eta_f": _float,
    # simulation
    "seed": _int, "n_pulses_total": _int, "guard_window_ns": _float, "p_multi": _float,
    "p_blink_off": _float, "tau_blink_us": _float, "gamma_bright_per_ns": _float,
    "gamma_dark_per_ns": _float, "tick_ps": _int, "jitter_fwhm_ps": _float, "window_ps": _float,
}

DEFAULTS = {
    "m_modes": 4, "n_pulses": 20, "f_rep_hz": 76.152e6, "eta_sw": 0.97, "eta_fiber": 0.92,
    "eta_det": 0.88, "dead_time_ns": 0.0, "recovery_kind": "step", "tau_recover_ns": 0.0,
    "p_e": NOMINAL_STAGES.p_e, "eta_b": NOMINAL_STAGES.eta_b, "beta": NOMINAL_STAGES.beta,
    "eta_oc": NOMINAL_STAGES.eta_oc, "t_optics": NOMINAL_STAGES.t_optics, "eta_f": NOMINAL_STAGES.eta_f,
    "seed": 0, "n_pulses_total": 10**8, "guard_window_ns": 0.0, "p_multi": 0.0,
    "p_blink_off": 0.0, "tau_blink_us": 500.0, "gamma_bright_per_ns": 1.3,
    "gamma_dark_per_ns": 0.2, "tick_ps": 81, "jitter_fwhm_ps": 100.0,
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)
    path: str | None = None

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise ConfigError(key, f"missing config key {key!r}")

    def get(self, key, default=None):
        try:
            return self[key]
        except ConfigError:
            return default

    def _build(self, key, fn):
        try:
            return fn()
        except InvalidInputError as exc:
            raise ConfigError(key, f"{key}: {exc}") from exc

    @property
    def demux(self) -> DemuxConfig:
        eta_m = self.values.get("eta_m")
        return self._build("eta_m" if eta_m is not None else "m_modes", lambda: DemuxConfig(
            m_modes=self["m_modes"], n_pulses=self["n_pulses"], f_rep=self["f_rep_hz"],
            eta_sw=self["eta_sw"], eta_m=eta_m, eta_fiber=self["eta_fiber"], eta_det=self["eta_det"],
            dead_time=self["dead_time_ns"], recovery=self["recovery_kind"],
            tau_recover=self["tau_recover_ns"],
        ))

    @property
    def stages(self) -> StageEfficiencies:
        return self._build("p_e", lambda: StageEfficiencies(
            p_e=self["p_e"], eta_b=self["eta_b"], beta=self["beta"], eta_oc=self["eta_oc"],
            t_optics=self["t_optics"], eta_f=self["eta_f"], eta_fiber=self["eta_fiber"],
            eta_det=self["eta_det"],
        ))

    @property
    def physics(self) -> EmitterPhysics:
        return self._build("p_multi", lambda: EmitterPhysics(
            gamma_bright=self["gamma_bright_per_ns"], gamma_dark=self["gamma_dark_per_ns"],
            p_multi=self["p_multi"], p_blink_off=self["p_blink_off"], tau_blink=self["tau_blink_us"],
        ))

    @property
    def detector(self) -> DetectorModel:
        return self._build("tick_ps", lambda: DetectorModel(
            eta_det=self["eta_det"], dead_time=self["dead_time_ns"],
            jitter_sigma=self["jitter_fwhm_ps"] / FWHM_PER_SIGMA, tick=self["tick_ps"],
        ))

    @property
    def eta_s(self) -> float | None:
        return self.values.get("eta_s")


def parse_config(text: str, path: str | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, f"line {lineno}: unknown config key {key!r}")
        if not raw:
            raise ConfigError(key, f"line {lineno}: empty value for {key!r}")
        values[key] = KEYS[key](key, raw)
    return RunConfig(values, path)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
