"""Time-tag analysis: g2(tau) histograms and M-fold coincidence counting.

Tag inputs are sorted integer tick arrays plus the tick length in ps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import reduce
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from ._kernels import window_correlate
from .errors import InsufficientSpanError, InvalidInputError, NormalizationError

BUNCHING_WINDOW_PS = 100e6  # 100 us
REFERENCE_BINS = 10
_EXACT_PAIR_LIMIT = 2e8


@dataclass(frozen=True)
class G2Histogram:
    """Cross-correlation counts in bins centered on ``k * bin_width``, k = -K..K.

    ``values`` are the counts divided by ``normalization`` (1 until
    normalized) and by the overlap factor ``1 - |tau| / acquisition``: over a
    finite record of length ``acquisition`` (ps) fewer pairs exist at long
    lags, which would otherwise read as a spurious slope at millisecond spans.
    """

    bin_width: float
    tau_max: float
    counts: np.ndarray
    normalization: float = 1.0
    normalized: bool = False
    empty: bool = False
    method: str = "exact"
    acquisition: float = math.inf

    @property
    def k_max(self) -> int:
        return (self.counts.size - 1) // 2

    @property
    def tau(self) -> np.ndarray:
        return np.arange(-self.k_max, self.k_max + 1) * self.bin_width

    @property
    def overlap(self) -> np.ndarray:
        return np.clip(1.0 - np.abs(self.tau) / self.acquisition, 1e-300, None)

    @property
    def values(self) -> np.ndarray:
        return self.counts / self.overlap / self.normalization

    @property
    def edge(self) -> float:
        """Outer edge of the binned span, ``(K + 1/2) * bin_width``."""
        return (self.k_max + 0.5) * self.bin_width

    def mirrored(self) -> "G2Histogram":
        return replace(self, counts=self.counts[::-1].copy())


def _as_ticks(tags) -> np.ndarray:
    t = np.asarray(tags, dtype=np.int64)
    if t.ndim != 1:
        raise InvalidInputError("tag arrays must be one-dimensional")
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise InvalidInputError("tag arrays must be sorted")
    return t


def _binned_correlation(qa: np.ndarray, qb: np.ndarray, k_max: int) -> np.ndarray:
    """Counts of ``qb - qa`` for |lag| <= k_max from sorted integer bin indices.

    Blockwise FFT cross-correlation of the occupancy series; the cost scales
    with the time extent, not the number of pairs.
    """
    width = 2 * k_max + 1
    out = np.zeros(width, np.int64)
    nfft = sfft.next_fast_len(max(4 * width, 1 << 18), real=True)
    block = nfft - 2 * k_max
    i0 = 0
    while i0 < qa.size:
        s = int(qa[i0])  # blocks start at occupied bins; empty stretches are skipped
        i1 = int(np.searchsorted(qa, s + block))
        j0, j1 = np.searchsorted(qb, [s - k_max, s + block + k_max])
        if j1 > j0:
            a = np.bincount(qa[i0:i1] - s, minlength=block).astype(float)
            b = np.bincount(qb[j0:j1] - (s - k_max), minlength=block + 2 * k_max).astype(float)
            corr = sfft.irfft(np.conj(sfft.rfft(a, nfft)) * sfft.rfft(b, nfft), nfft)[:width]
            out += np.rint(corr).astype(np.int64)
        i0 = i1
    return out


def g2_histogram(tags_a, tags_b, bin_width: float, tau_max: float, *, tick_ps: float = 1.0,
                 method: str = "auto", acquisition_ps: float | None = None) -> G2Histogram:
    """Histogram of delays ``t_b - t_a`` over [-tau_max, tau_max] (ps).

    ``method="exact"`` visits every pair inside the span with a sliding
    window. ``method="binned"`` quantizes each tag to its bin index first and
    correlates occupancies by FFT; it equals the exact result whenever tags
    sit away from bin edges (e.g. pulsed data with ``bin_width = 1/f_rep``)
    and is the only practical route for millisecond spans at MHz rates.
    ``"auto"`` picks binned when the expected pair count is very large.

    ``acquisition_ps`` is the record length used for the overlap correction;
    by default the extent of the tags themselves.
    """
    if not bin_width > 0:
        raise InvalidInputError("bin_width must be positive")
    if not tau_max >= bin_width:
        raise InvalidInputError("tau_max must be at least one bin width")
    a, b = _as_ticks(tags_a), _as_ticks(tags_b)
    k_max = int(math.floor(tau_max / bin_width + 1e-9))
    if a.size == 0 or b.size == 0:
        return G2Histogram(bin_width, tau_max, np.zeros(2 * k_max + 1, np.int64), empty=True, method="exact")

    extent = int(max(a[-1], b[-1]) - min(a[0], b[0]) + 1)
    acquisition = extent * tick_ps if acquisition_ps is None else float(acquisition_ps)
    if method == "auto":
        pairs = a.size * b.size * (2 * tau_max / tick_ps) / extent
        method = "binned" if pairs > _EXACT_PAIR_LIMIT else "exact"
    if method == "exact":
        counts = window_correlate(a, b, float(tick_ps), float(bin_width), k_max, np.zeros(2 * k_max + 1, np.int64))
    elif method == "binned":
        qa = np.floor(a * (tick_ps / bin_width) + 0.5).astype(np.int64)
        qb = np.floor(b * (tick_ps / bin_width) + 0.5).astype(np.int64)
        counts = _binned_correlation(qa, qb, k_max)
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return G2Histogram(bin_width, tau_max, counts, method=method, acquisition=acquisition)


def reference_window(hist: G2Histogram, reference_tau: float, n_bins: int = REFERENCE_BINS) -> np.ndarray:
    """Boolean mask of the ``n_bins`` bins whose centers end at ``reference_tau``."""
    tau = hist.tau
    mask = (tau > reference_tau - n_bins * hist.bin_width + 1e-9 * hist.bin_width) & (tau <= reference_tau + 1e-9 * hist.bin_width)
    return mask


def normalize_g2(hist: G2Histogram, reference_tau: float, n_bins: int = REFERENCE_BINS) -> G2Histogram:
    """Scale so the mean overlap-corrected count over the reference window is 1.

    The window is the ``n_bins`` bins ending at ``reference_tau``. Always
    recomputed from raw counts, so normalizing twice changes nothing.
    """
    if not (n_bins * hist.bin_width <= reference_tau + 1e-9 * hist.bin_width and reference_tau <= hist.edge):
        raise InsufficientSpanError(f"reference tau {reference_tau} ps not inside the histogram span")
    mask = reference_window(hist, reference_tau, n_bins)
    level = float((hist.counts / hist.overlap)[mask].mean()) if mask.any() else 0.0
    if level <= 0:
        raise NormalizationError(f"zero coincidence level in the reference window at {reference_tau} ps")
    return replace(hist, normalization=level, normalized=True)


@dataclass(frozen=True)
class G2Zero:
    value: float
    sigma: float
    central: int
    side_mean: float
    side_peaks: tuple


def _peak_sums(hist: G2Histogram, period: float, ks) -> np.ndarray:
    tau = hist.tau
    return np.array([hist.counts[(tau >= k * period - period / 2) & (tau < k * period + period / 2)].sum() for k in ks])


def g2_zero_stats(hist: G2Histogram, f_rep: float, n_side: int = 10) -> G2Zero:
    """Central-peak area over the mean side-peak area, with Poisson error.

    Each peak is integrated over one pulse period centered on it. Side peaks
    are the ``n_side`` nearest with |k| >= 2, skipping the neighbours of zero
    delay where dead time distorts the cross-arm statistics.
    """
    period = 1e12 / f_rep
    if hist.bin_width > period / 4:
        raise InvalidInputError("bin width must be well below the pulse period")
    k_avail = int(math.floor(hist.edge / period - 0.5))
    ks = sorted((k for k in range(-k_avail, k_avail + 1) if abs(k) >= 2), key=lambda k: (abs(k), k))[:n_side]
    if len(ks) < 4:
        raise InsufficientSpanError(f"only {len(ks)} side peaks inside the span; need at least 4")
    central = int(_peak_sums(hist, period, [0])[0])
    sides = _peak_sums(hist, period, ks)
    side_mean = float(sides.mean())
    if side_mean <= 0:
        raise NormalizationError("side peaks are empty")
    value = central / side_mean
    if central:
        sigma = value * math.sqrt(1.0 / central + 1.0 / sides.sum())
    else:
        sigma = 1.0 / side_mean  # one-count upper scale for an empty peak
    return G2Zero(value, sigma, central, side_mean, tuple(ks))


def g2_zero(hist: G2Histogram, f_rep: float, n_side: int = 10) -> float:
    return g2_zero_stats(hist, f_rep, n_side).value


def bunching_amplitude(hist: G2Histogram, f_rep: float, window_ps: float = BUNCHING_WINDOW_PS) -> float:
    """Short-lag excess of a normalized long-span histogram.

    Mean normalized value over bins with |tau| < ``window_ps``, minus 1. The
    zero-delay bin is excluded: it holds the antibunching dip, not blinking.
    """
    period = 1e12 / f_rep
    if not hist.normalized:
        raise InvalidInputError("histogram must be normalized first")
    if abs(hist.bin_width - period) > 1e-3 * period:
        raise InvalidInputError("bunching needs bin width equal to the pulse period")
    if hist.edge < window_ps:
        raise InsufficientSpanError(f"span {hist.edge:.4g} ps shorter than the {window_ps:.4g} ps bunching window")
    tau = np.abs(hist.tau)
    sel = (tau < window_ps) & (tau >= period / 2)
    return float(hist.values[sel].mean() - 1.0)


# --------------------------------------------------------------------------
# coincidences


@dataclass(frozen=True)
class CoincidenceResult:
    m_fold: int
    window: float
    count: int
    duration: float

    @property
    def rate(self) -> float:
        return self.count / self.duration

    @property
    def rate_err(self) -> float:
        return math.sqrt(self.count) / self.duration


def _check_window(window: float, period: float):
    if not 0 <= window <= period / 2 + 1e-9:
        raise InvalidInputError(f"window {window} ps must be within half the pulse period {period / 2:.1f} ps")


def slot_keys(ticks, tick_ps: float, config, window: float, slot_offset_ps: float = 0.0) -> np.ndarray:
    """Unique matched-slot indices hit by delay-compensated tags.

    Slot centers sit at ``k / f_rep + offset``; only slots where all channels
    are aligned after delay compensation (the last N of each M*N cycle) count.
    """
    period = config.period_ps
    t = np.asarray(ticks, np.int64) * float(tick_ps) - slot_offset_ps
    lo = np.floor(t / period).astype(np.int64)
    # a tag can sit within the window of the slot on either side (ties at half a period)
    k = np.concatenate([lo[t - lo * period <= window], (lo + 1)[(lo + 1) * period - t <= window]])
    aligned = (k % config.cycle_pulses) >= (config.m_modes - 1) * config.n_pulses
    return np.unique(k[aligned])


def mfold_coincidences(channel_tags: Sequence, config, window: float, *, tick_ps: float,
                       duration_s: float | None = None, slot_offset_ps: float = 0.0) -> CoincidenceResult:
    """Count matched slots in which every channel has at least one tag within +-window.

    Without ``duration_s`` the duration is the span of all tags.
    """
    counter = CoincidenceCounter(config, window, tick_ps, slot_offset_ps=slot_offset_ps)
    if len(channel_tags) != config.m_modes:
        raise InvalidInputError(f"config has {config.m_modes} channels, got {len(channel_tags)} tag lists")
    counter.push([_as_ticks(t) for t in channel_tags])
    if duration_s is None:
        nonempty = [np.asarray(t) for t in channel_tags if len(t)]
        if not nonempty:
            duration_s = 0.0
        else:
            lo = min(int(t[0]) for t in nonempty)
            hi = max(int(t[-1]) for t in nonempty)
            duration_s = (hi - lo + 1) * tick_ps * 1e-12
    return counter.result(duration_s)


class CoincidenceCounter:
    """Streaming M-fold counter.

    ``push`` takes per-channel tick batches; slots whose window lies entirely
    before ``horizon_tick`` are settled, later ones stay pending until more
    data arrive or ``result`` is called.
    """

    def __init__(self, config, window: float, tick_ps: float, *, slot_offset_ps: float = 0.0):
        _check_window(window, config.period_ps)
        self.config = config
        self.window = window
        self.tick_ps = tick_ps
        self.slot_offset_ps = slot_offset_ps
        self.count = 0
        self._pending = [np.empty(0, np.int64) for _ in range(config.m_modes)]

    def push(self, channel_ticks: Sequence[np.ndarray], horizon_tick: int | None = None):
        if len(channel_ticks) != self.config.m_modes:
            raise InvalidInputError(f"config has {self.config.m_modes} channels, got {len(channel_ticks)}")
        keys = [
            np.union1d(p, slot_keys(t, self.tick_ps, self.config, self.window, self.slot_offset_ps))
            for p, t in zip(self._pending, channel_ticks)
        ]
        if horizon_tick is None:
            settled, self._pending = keys, [np.empty(0, np.int64) for _ in keys]
        else:
            period = self.config.period_ps
            # last slot whose whole window precedes the horizon
            k_done = math.floor((horizon_tick * self.tick_ps - self.slot_offset_ps - self.window) / period) - 1
            settled = [k[k <= k_done] for k in keys]
            self._pending = [k[k > k_done] for k in keys]
        self.count += int(reduce(np.intersect1d, settled).size) if settled else 0

    def result(self, duration_s: float) -> CoincidenceResult:
        self.push([np.empty(0, np.int64)] * self.config.m_modes)
        return CoincidenceResult(self.config.m_modes, self.window, self.count, duration_s)


# --------------------------------------------------------------------------
# CSV export


def write_histogram_csv(hist: G2Histogram, sink) -> None:
    sink.write("tau_ps,counts,normalized_value\n")
    for tau, c, v in zip(hist.tau, hist.counts, hist.values):
        sink.write(f"{float(tau)!r},{int(c)},{float(v)!r}\n")


def write_coincidence_csv(results: Sequence[CoincidenceResult], sink) -> None:
    sink.write("m_fold,window_ps,count,duration_s,rate_hz\n")
    for r in results:
        rate = r.rate if r.duration else 0.0
        sink.write(f"{r.m_fold},{float(r.window)!r},{r.count},{float(r.duration)!r},{float(rate)!r}\n")
