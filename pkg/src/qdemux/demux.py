"""Analytic model of an active temporal-to-spatial demultiplexer.

One EOM cycle routes ``n_pulses`` consecutive laser pulses to each of the
``m_modes`` spatial channels in turn. The per-slot click probability
``rho[m, n]`` accounts for detector dead time through a recovery kernel, and
the M-fold coincidence rate follows from products over channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class RecoveryKernel:
    """Detector recovery after a click, as a function of elapsed time (ns).

    ``step``: blind for ``dead_time``, fully recovered afterwards.
    ``exponential``: blind for ``dead_time``, then recovers as
    ``1 - exp(-(dt - dead_time) / tau_recover)``.
    """

    kind: str = "step"
    dead_time: float = 0.0
    tau_recover: float = 0.0

    def __post_init__(self):
        if self.kind not in ("step", "exponential"):
            raise InvalidInputError(f"unknown recovery kind {self.kind!r}")
        if self.dead_time < 0:
            raise InvalidInputError("dead_time must be nonnegative")
        if self.kind == "exponential" and not self.tau_recover > 0:
            raise InvalidInputError("exponential recovery needs tau_recover > 0")

    def __call__(self, dt_ns):
        dt = np.asarray(dt_ns, dtype=float)
        if self.kind == "step":
            out = (dt >= self.dead_time).astype(float)
        else:
            out = np.where(dt >= self.dead_time, -np.expm1(-(dt - self.dead_time) / self.tau_recover), 0.0)
            out = np.clip(out, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    @property
    def is_unit(self) -> bool:
        return self.kind == "step" and self.dead_time == 0


@dataclass(frozen=True)
class DemuxConfig:
    m_modes: int = 4
    n_pulses: int = 20
    f_rep: float = 76.152e6
    eta_sw: float = 0.97
    eta_m: tuple = field(default=None)
    eta_fiber: float = 0.92
    eta_det: float = 0.88
    dead_time: float = 0.0
    recovery: str = "step"
    tau_recover: float = 0.0

    def __post_init__(self):
        if self.eta_m is None:
            object.__setattr__(self, "eta_m", (0.86,) * self.m_modes)
        else:
            object.__setattr__(self, "eta_m", tuple(float(x) for x in self.eta_m))
        if int(self.m_modes) != self.m_modes or self.m_modes < 1:
            raise InvalidInputError("m_modes must be a positive integer")
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise InvalidInputError("n_pulses must be a positive integer")
        if not self.f_rep > 0:
            raise InvalidInputError("f_rep must be positive")
        if len(self.eta_m) != self.m_modes:
            raise InvalidInputError(f"eta_m needs {self.m_modes} entries, got {len(self.eta_m)}")
        for name, v in (("eta_sw", self.eta_sw), ("eta_fiber", self.eta_fiber), ("eta_det", self.eta_det)):
            if not 0 <= v <= 1:
                raise InvalidInputError(f"{name} must be in [0, 1], got {v}")
        if any(not 0 <= v <= 1 for v in self.eta_m):
            raise InvalidInputError("eta_m entries must be in [0, 1]")
        if self.dead_time < 0:
            raise InvalidInputError("dead_time must be nonnegative")
        self.kernel  # validates recovery settings

    @property
    def kernel(self) -> RecoveryKernel:
        return RecoveryKernel(self.recovery, self.dead_time, self.tau_recover)

    @property
    def period_ns(self) -> float:
        return 1e9 / self.f_rep

    @property
    def period_ps(self) -> float:
        return 1e12 / self.f_rep

    @property
    def cycle_pulses(self) -> int:
        return self.m_modes * self.n_pulses

    def eta_tot(self, eta_s: float) -> np.ndarray:
        """End-to-end detection probability per channel."""
        return eta_s * self.eta_fiber * np.asarray(self.eta_m) * self.eta_sw * self.eta_det


@dataclass(frozen=True)
class SwitchingSchedule:
    f_eom: float
    m_modes: int
    n_pulses: int

    def slot(self, j):
        """Map pulse index ``j`` to 1-based ``(mode, slot)``; vectorized."""
        r = np.asarray(j) % (self.m_modes * self.n_pulses)
        mode, slot = r // self.n_pulses + 1, r % self.n_pulses + 1
        if mode.ndim == 0:
            return int(mode), int(slot)
        return mode, slot


def switching_schedule(config: DemuxConfig) -> SwitchingSchedule:
    return SwitchingSchedule(config.f_rep / config.cycle_pulses, config.m_modes, config.n_pulses)


@dataclass(frozen=True)
class RhoTable:
    """Click probabilities ``values[m - 1, n]`` for modes m = 1..M, slots n = 0..N.

    Column 0 holds the boundary convention ``rho[m, 0] = 1``.
    """

    values: np.ndarray

    @property
    def m_modes(self) -> int:
        return self.values.shape[0]

    @property
    def n_pulses(self) -> int:
        return self.values.shape[1] - 1

    def rho(self, m: int, n: int) -> float:
        return float(self.values[m - 1, n])


def click_probability_table(config: DemuxConfig, eta_s: float) -> RhoTable:
    """Per-slot click probabilities with dead-time correction.

    ``rho[n] = eta_tot * sum_{k=0}^{n-1} prod_{e=k+1}^{n-1} (1 - rho[e]) rho[k] T(n, k)``
    where ``k`` is the slot of the most recent click (k = 0: none this cycle,
    detector fully recovered) and ``T(n, k)`` is the recovery kernel at
    ``(n - k)`` pulse periods. Evaluated for all channels at once.
    """
    if not 0 <= eta_s <= 1:
        raise InvalidInputError(f"eta_s must be in [0, 1], got {eta_s}")
    m, n_max = config.m_modes, config.n_pulses
    eta = config.eta_tot(eta_s)
    rho = np.zeros((m, n_max + 1))
    rho[:, 0] = 1.0
    kernel = config.kernel
    # T[d] for slot separation d = n - k >= 1; the k = 0 term always uses 1
    sep = kernel(np.arange(n_max + 1) * config.period_ns)
    for n in range(1, n_max + 1):
        total = np.zeros(m)
        survive = np.ones(m)  # prod_{e=k+1}^{n-1} (1 - rho[e]), built from k = n-1 down
        for k in range(n - 1, -1, -1):
            t_nk = 1.0 if k == 0 else sep[n - k]
            total += survive * rho[:, k] * t_nk
            survive *= 1.0 - rho[:, k]
        rho[:, n] = eta * total
    return RhoTable(rho)


def mfold_rate(table: RhoTable, config: DemuxConfig) -> float:
    """M-fold coincidence rate (Hz): ``f_rep / (M N) * sum_n prod_m rho[m, n]``."""
    if table.m_modes != config.m_modes or table.n_pulses != config.n_pulses:
        raise InvalidInputError("table shape does not match config")
    per_slot = np.prod(table.values[:, 1:], axis=0)
    return config.f_rep / config.cycle_pulses * float(per_slot.sum())


def input_rate(f_rep: float, eta_s: float) -> float:
    if not f_rep > 0:
        raise InvalidInputError("f_rep must be positive")
    return f_rep * eta_s


def passive_variant(config: DemuxConfig) -> DemuxConfig:
    """Beam-splitter tree equivalent: switch efficiency ``1/M``."""
    return replace(config, eta_sw=1.0 / config.m_modes)


def brightness_sweep(config: DemuxConfig, eta_s_values: Sequence[float]) -> list[tuple[float, float]]:
    values = list(eta_s_values)
    if not values:
        raise InvalidInputError("eta_s list is empty")
    return [
        (input_rate(config.f_rep, e), mfold_rate(click_probability_table(config, e), config))
        for e in values
    ]


def mfold_rate_at(config: DemuxConfig, eta_s: float) -> float:
    return mfold_rate(click_probability_table(config, eta_s), config)


def active_passive_ratio(config: DemuxConfig, eta_s: float) -> float:
    passive = mfold_rate_at(passive_variant(config), eta_s)
    if passive == 0:
        return math.inf
    return mfold_rate_at(config, eta_s) / passive


def write_sweep_csv(config: DemuxConfig, eta_s_values: Sequence[float], sink) -> list[tuple[float, float, float]]:
    """Write ``eta_s,f_in_hz,f_mf_hz`` rows; returns them."""
    eta_s_values = [float(e) for e in eta_s_values]
    rows = [(e, fi, fm) for e, (fi, fm) in zip(eta_s_values, brightness_sweep(config, eta_s_values))]
    sink.write("eta_s,f_in_hz,f_mf_hz\n")
    for e, fi, fm in rows:
        sink.write(f"{e!r},{fi!r},{fm!r}\n")
    return rows
