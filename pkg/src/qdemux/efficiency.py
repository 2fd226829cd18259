"""Source-side efficiency chain, saturation curve and its fit.

All efficiencies are dimensionless probabilities. Powers are in nW and
count rates in counts/s.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CsvParseError, FitError, InvalidInputError


def _check_prob(name, value, *, open_low=False):
    lo_ok = value > 0 if open_low else value >= 0
    if not (lo_ok and value <= 1):
        raise InvalidInputError(f"{name} must be in {'(0' if open_low else '[0'}, 1], got {value}")


@dataclass(frozen=True)
class SaturationParams:
    i0: float
    p_sat: float
    eta_f: float = 1.0

    def __post_init__(self):
        if not self.i0 > 0:
            raise InvalidInputError(f"i0 must be positive, got {self.i0}")
        if not self.p_sat > 0:
            raise InvalidInputError(f"p_sat must be positive, got {self.p_sat}")
        _check_prob("eta_f", self.eta_f, open_low=True)


@dataclass(frozen=True)
class StageEfficiencies:
    """Multiplicative efficiency chain from exciton preparation to detection.

    The source efficiency uses ``p_e`` through ``eta_f``; ``eta_fiber`` and
    ``eta_det`` belong to the demultiplexer side and only enter the rate ladder
    (detector) or the demux model.
    """

    p_e: float
    eta_b: float
    beta: float
    eta_oc: float
    t_optics: float
    eta_f: float
    eta_fiber: float = 1.0
    eta_det: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            _check_prob(f.name, getattr(self, f.name))

    @property
    def eta_qd(self) -> float:
        return quantum_dot_efficiency(self.p_e, self.eta_b)


@dataclass(frozen=True)
class EmitterPhysics:
    """Emitter rates and simulator knobs.

    Decay rates in 1/ns, blinking correlation time in microseconds.
    """

    gamma_bright: float = 1.3
    gamma_dark: float = 0.2
    p_multi: float = 0.0
    p_blink_off: float = 0.01
    tau_blink: float = 500.0
    p_dark_emit: float = 0.0

    def __post_init__(self):
        if not (self.gamma_bright > self.gamma_dark > 0):
            raise InvalidInputError("need gamma_bright > gamma_dark > 0")
        if not 0 <= self.p_multi < 1:
            raise InvalidInputError(f"p_multi must be in [0, 1), got {self.p_multi}")
        if not 0 <= self.p_blink_off < 1:
            raise InvalidInputError(f"p_blink_off must be in [0, 1), got {self.p_blink_off}")
        if not self.tau_blink > 0:
            raise InvalidInputError("tau_blink must be positive")
        _check_prob("p_dark_emit", self.p_dark_emit)


@dataclass(frozen=True)
class PowerSeriesPoint:
    power: float
    counts: float
    filtered: bool = False

    def __post_init__(self):
        if self.power < 0 or self.counts < 0:
            raise InvalidInputError("power and counts must be nonnegative")


# Measured values for the waveguide device (central values).
NOMINAL_STAGES = StageEfficiencies(
    p_e=0.37, eta_b=0.40, beta=0.80, eta_oc=0.60, t_optics=0.69, eta_f=0.58,
    eta_fiber=0.92, eta_det=0.88,
)
# Absolute one-sigma uncertainties for the same fields.
NOMINAL_STAGE_UNCERTAINTY = {
    "p_e": 0.015, "eta_b": 0.04, "beta": 0.10, "eta_oc": 0.05,
    "t_optics": 0.02, "eta_f": 0.02, "eta_fiber": 0.02, "eta_det": 0.0,
}
NOMINAL_SATURATION = SaturationParams(i0=2.9e6, p_sat=236.0, eta_f=0.58)
NOMINAL_F_REP = 76.152e6
# Overall source efficiency measured from the detected count rate at saturation.
NOMINAL_ETA_S_MEASURED = 0.023


def saturation_intensity(power, params: SaturationParams):
    """Count rate ``i0 * eta_f * (1 - exp(-power / p_sat))``.

    Accepts scalars or arrays; ``power`` must be nonnegative.
    """
    p = np.asarray(power, dtype=float)
    if np.any(p < 0):
        raise InvalidInputError("power must be nonnegative")
    out = params.i0 * params.eta_f * -np.expm1(-p / params.p_sat)
    return float(out) if out.ndim == 0 else out


def quantum_dot_efficiency(p_e: float, eta_b: float) -> float:
    _check_prob("p_e", p_e)
    _check_prob("eta_b", eta_b)
    return p_e * eta_b


def source_efficiency(stages: StageEfficiencies) -> float:
    """Probability of delivering a photon into the single-mode fiber."""
    return stages.eta_qd * stages.beta * stages.eta_oc * stages.t_optics * stages.eta_f


def source_efficiency_interval(stages: StageEfficiencies, uncertainty=None) -> tuple[float, float]:
    """Worst-case (lo, hi) bounds of the source efficiency.

    Each stage is moved independently to the edge of its interval and clipped
    to [0, 1]; no correlation model.
    """
    unc = NOMINAL_STAGE_UNCERTAINTY if uncertainty is None else uncertainty
    names = ("p_e", "eta_b", "beta", "eta_oc", "t_optics", "eta_f")
    lo = hi = 1.0
    for name in names:
        v, d = getattr(stages, name), unc.get(name, 0.0)
        lo *= min(max(v - d, 0.0), 1.0)
        hi *= min(max(v + d, 0.0), 1.0)
    return lo, hi


LADDER_LABELS = ("emitted_on_line", "in_waveguide", "in_fiber", "after_filter", "detected")


def rate_ladder(f_rep: float, stages: StageEfficiencies) -> list[tuple[str, float]]:
    if not f_rep > 0:
        raise InvalidInputError("f_rep must be positive")
    factors = (
        stages.eta_qd,
        stages.beta,
        stages.eta_oc * stages.t_optics,
        stages.eta_f,
        stages.eta_det,
    )
    rungs = []
    rate = f_rep
    for label, factor in zip(LADDER_LABELS, factors):
        rate *= factor
        rungs.append((label, rate))
    return rungs


# --------------------------------------------------------------------------
# saturation fit


@dataclass(frozen=True)
class SaturationFit:
    params: SaturationParams
    residuals: np.ndarray
    residual_norm: float
    iterations: int


def _sat_model(theta, p, filt):
    i0, p_sat, eta_f = theta
    gain = np.where(filt, eta_f, 1.0)
    s = -np.expm1(-p / p_sat)
    y = i0 * gain * s
    jac = np.empty((p.size, 3))
    jac[:, 0] = gain * s
    jac[:, 1] = -i0 * gain * np.exp(-p / p_sat) * p / p_sat**2
    jac[:, 2] = np.where(filt, i0 * s, 0.0)
    return y, jac


def _initial_guess(p, y, filt):
    unf = ~filt
    i0 = 1.05 * y[unf].max()
    if filt.any():
        # ratio of filtered to unfiltered counts at the largest shared powers
        eta_f = y[filt].max() / max(y[unf].max(), 1e-300)
        eta_f = min(max(eta_f, 1e-3), 1.0)
    else:
        eta_f = 1.0
    # power where the unfiltered branch reaches 1 - 1/e of its maximum
    target = (1 - math.exp(-1)) * y[unf].max()
    order = np.argsort(p[unf])
    pu, yu = p[unf][order], y[unf][order]
    above = np.nonzero(yu >= target)[0]
    p_sat = pu[above[0]] if above.size else np.median(pu)
    return np.array([i0, max(p_sat, 1e-6 * max(pu.max(), 1.0)), eta_f])


def fit_saturation(
    series: Sequence[PowerSeriesPoint],
    *,
    max_iter: int = 200,
    rtol: float = 1e-9,
    initial: SaturationParams | None = None,
) -> SaturationFit:
    """Joint least-squares fit of filtered and unfiltered power series.

    ``i0`` and ``p_sat`` are shared by both branches; ``eta_f`` scales the
    filtered points only. Solved with Levenberg-Marquardt on the analytic
    Jacobian. Without filtered points ``eta_f`` is held at 1.
    """
    p = np.array([pt.power for pt in series], dtype=float)
    y = np.array([pt.counts for pt in series], dtype=float)
    filt = np.array([bool(pt.filtered) for pt in series])
    if p.size < 4:
        raise InvalidInputError("need at least 4 points")
    if np.unique(p).size < 3:
        raise InvalidInputError("powers must take at least 3 distinct values")
    if filt.all():
        raise InvalidInputError("filtered-only series cannot separate i0 from eta_f")
    if not np.any(y > 0):
        raise FitError("all counts are zero: i0*eta_f degenerate", best=None)

    # condition the problem: unit-scale powers and counts
    p_scale = float(np.median(p[p > 0])) if np.any(p > 0) else 1.0
    y_scale = float(y.max())
    ps, ys = p / p_scale, y / y_scale

    if initial is None:
        theta = _initial_guess(ps, ys, filt)
    else:
        theta = np.array([initial.i0 / y_scale, initial.p_sat / p_scale, initial.eta_f])
    free = np.array([True, True, bool(filt.any())])

    def cost(th):
        r = ys - _sat_model(th, ps, filt)[0]
        return float(r @ r)

    lam = 1e-3
    current = cost(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        yhat, jac = _sat_model(theta, ps, filt)
        jac = jac[:, free]
        r = ys - yhat
        jtj = jac.T @ jac
        g = jac.T @ r
        while True:
            a = jtj + lam * np.diag(np.diag(jtj) + 1e-12)
            try:
                step = np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                lam *= 10
                if lam > 1e12:
                    break
                continue
            trial = theta.copy()
            trial[free] += step
            if trial[0] > 0 and trial[1] > 0 and 0 < trial[2]:
                new = cost(trial)
                if new <= current:
                    break
            lam *= 10
            if lam > 1e12:
                break
        if lam > 1e12:
            # no downhill step left: we sit at a (numerical) minimum
            converged = True
            break
        rel = np.linalg.norm(trial - theta) / max(np.linalg.norm(theta), 1e-300)
        theta, current = trial, new
        lam = max(lam / 10, 1e-12)
        if rel < rtol:
            converged = True
            break

    # best iterate as a plain (i0, p_sat, eta_f) tuple; may violate invariants
    best = (float(theta[0] * y_scale), float(theta[1] * p_scale), float(theta[2]))
    if not converged:
        raise FitError(f"no convergence after {max_iter} iterations", best=best, iterations=it)
    if theta[2] > 1:
        raise FitError(f"fitted eta_f = {theta[2]:.4g} exceeds 1", best=best, iterations=it)
    params = SaturationParams(*best)
    residuals = y - _sat_model(np.array(best), p, filt)[0]
    return SaturationFit(params, residuals, float(np.linalg.norm(residuals)), it)


# --------------------------------------------------------------------------
# power-series CSV

POWER_SERIES_HEADER = ("power_nW", "counts_per_s", "filtered")


def read_power_series(source) -> list[PowerSeriesPoint]:
    """Parse ``power_nW,counts_per_s,filtered`` CSV from a path or text stream."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_power_series(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != POWER_SERIES_HEADER:
        raise CsvParseError(1, f"expected header {','.join(POWER_SERIES_HEADER)}")
    points = []
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 3:
            raise CsvParseError(lineno, f"expected 3 fields, got {len(row)}")
        try:
            power, counts = float(row[0]), float(row[1])
            flag = int(row[2])
        except ValueError as exc:
            raise CsvParseError(lineno, str(exc)) from None
        if flag not in (0, 1):
            raise CsvParseError(lineno, "filtered must be 0 or 1")
        try:
            points.append(PowerSeriesPoint(power, counts, bool(flag)))
        except InvalidInputError as exc:
            raise CsvParseError(lineno, str(exc)) from None
    return points


def write_power_series(points: Iterable[PowerSeriesPoint], sink) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", newline="") as fh:
            return write_power_series(points, fh)
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(POWER_SERIES_HEADER)
    for pt in points:
        w.writerow([repr(float(pt.power)), repr(float(pt.counts)), int(pt.filtered)])


def synthetic_power_series(
    params: SaturationParams,
    powers: Sequence[float],
    *,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    both_branches: bool = True,
) -> list[PowerSeriesPoint]:
    """Model power series with optional multiplicative Gaussian noise.

    With ``both_branches`` every power appears once unfiltered and once filtered.
    """
    rng = np.random.default_rng() if rng is None and noise else rng
    unf = replace(params, eta_f=1.0)
    out = []
    branches = (False, True) if both_branches else (True,)
    for filtered in branches:
        y = np.asarray(saturation_intensity(np.asarray(powers, float), params if filtered else unf))
        if noise:
            y = y * (1 + noise * rng.standard_normal(y.shape))
        out.extend(PowerSeriesPoint(float(pw), float(max(c, 0.0)), filtered) for pw, c in zip(powers, y))
    return out


def saturation_params_csv(fit: SaturationFit) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i0_counts_per_s", "p_sat_nW", "eta_f", "residual_norm", "iterations"])
    pr = fit.params
    w.writerow([repr(pr.i0), repr(pr.p_sat), repr(pr.eta_f), repr(fit.residual_norm), fit.iterations])
    return buf.getvalue()
