import io
import math

import numpy as np
import pytest

from qdemux import analysis
from qdemux.analysis import (
    CoincidenceCounter, bunching_amplitude, g2_histogram, g2_zero, g2_zero_stats, mfold_coincidences,
    normalize_g2,
)
from qdemux.demux import DemuxConfig
from qdemux.errors import InsufficientSpanError, InvalidInputError, NormalizationError

from oracles import brute_coincidences, brute_coincidences_np, brute_histogram, brute_histogram_int

F_REP = 76.152e6
PERIOD = 1e12 / F_REP


def _sorted_tags(rng, n, span):
    return np.unique(rng.integers(0, span, n))


def test_single_pair_central_bin():
    h = g2_histogram([10], [10], 100.0, 1000.0)
    assert h.counts.sum() == 1
    assert h.counts[h.k_max] == 1
    assert np.allclose(h.tau, np.arange(-10, 11) * 100.0)


def test_empty_input_flagged():
    h = g2_histogram([], [1, 2], 10.0, 100.0)
    assert h.empty and h.counts.sum() == 0 and h.counts.size == 21


def test_argument_checks():
    with pytest.raises(InvalidInputError):
        g2_histogram([1], [2], 0.0, 10.0)
    with pytest.raises(InvalidInputError):
        g2_histogram([1], [2], 10.0, 5.0)
    with pytest.raises(InvalidInputError):
        g2_histogram([3, 1], [2], 1.0, 10.0)


def test_small_cases_against_fraction_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = _sorted_tags(rng, 40, 5000)
        b = _sorted_tags(rng, 40, 5000)
        w, tick = float(rng.choice([7, 50, 81, 162.5])), float(rng.choice([1, 81]))
        tau_max = float(rng.integers(1, 30)) * w
        h = g2_histogram(a, b, w, tau_max, tick_ps=tick, method="exact")
        assert np.array_equal(h.counts, brute_histogram(a, b, tick, w, h.k_max))


def test_random_cases_against_all_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(0, 5001))
        m = int(rng.integers(0, 10_001 - n))
        span = int(rng.integers(1, 10**7))
        a, b = np.sort(rng.integers(0, span, n)), np.sort(rng.integers(0, span, m))
        tick, w = int(rng.choice([1, 81])), int(rng.integers(1, 2000))
        k = int(rng.integers(1, 300))
        h = g2_histogram(a, b, float(w), float(k * w), tick_ps=tick, method="exact")
        assert np.array_equal(h.counts, brute_histogram_int(a, b, tick, w, h.k_max))


def test_mirror_symmetry():
    rng = np.random.default_rng(5)
    a, b = _sorted_tags(rng, 3000, 10**6), _sorted_tags(rng, 2000, 10**6)
    hab = g2_histogram(a, b, 37.0, 3700.0, method="exact")
    hba = g2_histogram(b, a, 37.0, 3700.0, method="exact")
    assert np.array_equal(hab.mirrored().counts, hba.counts)


def test_conservation():
    rng = np.random.default_rng(6)
    a, b = _sorted_tags(rng, 2000, 10**5), _sorted_tags(rng, 2000, 10**5)
    h = g2_histogram(a, b, 10.0, 500.0, method="exact")
    d = b[None, :] - a[:, None]
    assert h.counts.sum() == np.count_nonzero(np.abs(d) < 505)


def test_binned_matches_exact_for_pulsed_tags():
    rng = np.random.default_rng(7)
    pulses_a = np.sort(rng.choice(10**6, 50_000, replace=False))
    pulses_b = np.sort(rng.choice(10**6, 50_000, replace=False))
    tick = 81.0
    to_ticks = lambda p: np.floor((p * PERIOD + rng.uniform(0, 2000, p.size)) / tick).astype(np.int64)
    a, b = to_ticks(pulses_a), to_ticks(pulses_b)
    a.sort(), b.sort()
    ex = g2_histogram(a, b, PERIOD, 300 * PERIOD, tick_ps=tick, method="exact")
    bi = g2_histogram(a, b, PERIOD, 300 * PERIOD, tick_ps=tick, method="binned")
    assert np.array_equal(ex.counts, bi.counts)


def test_binned_equals_bin_index_correlation():
    rng = np.random.default_rng(8)
    a, b = _sorted_tags(rng, 4000, 10**6), _sorted_tags(rng, 4000, 10**6)
    w = 250.0
    h = g2_histogram(a, b, w, 40 * w, method="binned")
    qa, qb = np.floor(a / w + 0.5).astype(int), np.floor(b / w + 0.5).astype(int)
    d = (qb[None, :] - qa[:, None]).ravel()
    ref = np.bincount(d[np.abs(d) <= 40] + 40, minlength=81)
    assert np.array_equal(h.counts, ref)


def test_poisson_flat_level():
    rng = np.random.default_rng(9)
    rate, dur = 1e-5, 5e9  # per ps, ps: 50k tags per stream
    a = np.sort(rng.integers(0, int(dur), rng.poisson(rate * dur)))
    b = np.sort(rng.integers(0, int(dur), rng.poisson(rate * dur)))
    w = 1000.0
    h = g2_histogram(a, b, w, 200 * w)
    level = rate * rate * dur * w
    assert abs(h.counts.mean() - level) < 3 * math.sqrt(level / h.counts.size)
    chi = ((h.counts - level) ** 2 / level).sum()
    assert chi < h.counts.size + 5 * math.sqrt(2 * h.counts.size)
    n = normalize_g2(h, 200 * w)
    assert abs(n.values.mean() - 1) < 0.02


def test_normalization():
    counts = np.array([4, 4, 4, 0, 4, 4, 2, 6, 4, 4, 4, 4, 4], np.int64)
    h = analysis.G2Histogram(1.0, 6.0, counts)
    n = normalize_g2(h, 6.0, n_bins=4)
    ref = analysis.reference_window(n, 6.0, 4)
    assert ref.sum() == 4
    assert n.values[ref].mean() == pytest.approx(1.0, abs=1e-9)
    assert n.values[6] == 0.5 and n.values[3] == 0.0
    assert normalize_g2(n, 6.0, n_bins=4).normalization == n.normalization
    assert n.normalized
    with pytest.raises(InsufficientSpanError):
        normalize_g2(h, 60.0)
    with pytest.raises(NormalizationError):
        normalize_g2(analysis.G2Histogram(1.0, 20.0, np.zeros(41, np.int64)), 15.0)


def test_overlap_correction():
    counts = np.full(21, 100, np.int64)
    h = analysis.G2Histogram(10.0, 100.0, counts, acquisition=1000.0)
    assert h.values[10] == 100
    assert h.values[0] == pytest.approx(100 / 0.9)


def _pulsed_hist(central, side, n_side=12, w=100.0):
    """Histogram with a one-bin peak per pulse."""
    tau_max = (n_side + 0.5) * PERIOD
    h = g2_histogram([0], [0], w, tau_max)
    counts = np.zeros_like(h.counts)
    for j in range(-n_side, n_side + 1):
        idx = h.k_max + int(round(j * PERIOD / w))
        counts[idx] = central if j == 0 else side
    return analysis.G2Histogram(w, tau_max, counts)


def test_g2_zero_peak_ratio():
    h = _pulsed_hist(50, 1000)
    assert g2_zero(h, F_REP) == pytest.approx(0.05)
    z = g2_zero_stats(h, F_REP)
    assert z.side_peaks[:4] == (-2, 2, -3, 3)
    assert len(z.side_peaks) == 10
    assert z.sigma == pytest.approx(0.05 * math.sqrt(1 / 50 + 1 / 10000))


def test_g2_zero_ignores_first_side_peaks():
    h = _pulsed_hist(100, 1000)
    c = h.counts.copy()
    c[h.k_max + int(round(PERIOD / 100))] = 0  # a dead-time hole at +1 period
    assert g2_zero(analysis.G2Histogram(100.0, h.tau_max, c), F_REP) == pytest.approx(0.1)


def test_g2_zero_span_and_binning_checks():
    with pytest.raises(InsufficientSpanError):
        g2_zero(_pulsed_hist(1, 10, n_side=3), F_REP)
    with pytest.raises(InvalidInputError):
        g2_zero(g2_histogram([0], [0], PERIOD, 20 * PERIOD), F_REP)


def test_g2_zero_translation_and_tick_invariance():
    rng = np.random.default_rng(11)
    pulses = np.sort(rng.choice(10**6, 60_000, replace=False))
    a = np.floor(pulses * PERIOD / 81 + rng.normal(0, 3, pulses.size)).astype(np.int64)
    pulses = np.sort(rng.choice(10**6, 60_000, replace=False))
    b = np.floor(pulses * PERIOD / 81 + rng.normal(0, 3, pulses.size)).astype(np.int64)
    a.sort(), b.sort()
    base = g2_zero(g2_histogram(a, b, 162.0, 8 * PERIOD, tick_ps=81), F_REP)
    shifted = g2_zero(g2_histogram(a + 12345, b + 12345, 162.0, 8 * PERIOD, tick_ps=81), F_REP)
    finer = g2_zero(g2_histogram(a * 3, b * 3, 162.0, 8 * PERIOD, tick_ps=27), F_REP)
    assert shifted == base
    assert finer == base


def test_bunching_checks():
    h = g2_histogram([0], [0], PERIOD, 200e6)
    with pytest.raises(InvalidInputError):
        bunching_amplitude(h, F_REP)
    n = analysis.G2Histogram(PERIOD, 200e6, np.full(h.counts.size, 5), normalized=True, normalization=5.0)
    assert bunching_amplitude(n, F_REP) == pytest.approx(0.0)
    short = analysis.G2Histogram(PERIOD, 50e6, np.ones(2 * int(50e6 / PERIOD) + 1), normalized=True)
    with pytest.raises(InsufficientSpanError):
        bunching_amplitude(short, F_REP)
    fine = analysis.G2Histogram(100.0, 200e6, np.ones(4000001), normalized=True)
    with pytest.raises(InvalidInputError):
        bunching_amplitude(fine, F_REP)


def test_bunching_of_telegraph_shape():
    k = int(50e9 / PERIOD)
    tau = np.arange(-k, k + 1) * PERIOD
    g = 1 + 0.25 * np.exp(-np.abs(tau) / 300e6)
    h = analysis.G2Histogram(PERIOD, k * PERIOD, g * 1e6)
    h = normalize_g2(h, k * PERIOD)
    expected = 0.25 * (1 - math.exp(-1 / 3)) * 3  # mean of the exponential over 100 us
    assert bunching_amplitude(h, F_REP) == pytest.approx(expected, rel=1e-3)


# --------------------------------------------------------------------------
# coincidences


def test_identical_slots_m2():
    cfg = DemuxConfig(m_modes=2, n_pulses=5)
    slots = np.array([k for k in range(1000) if k % 10 >= 5][:100])
    ticks = np.rint(slots * PERIOD).astype(np.int64)
    r = mfold_coincidences([ticks, ticks], cfg, PERIOD / 2, tick_ps=1.0, duration_s=1.0)
    assert r.count == 100 and r.rate == 100.0 and r.rate_err == 10.0


def test_empty_channel_and_mismatch():
    cfg = DemuxConfig(m_modes=2, n_pulses=5)
    ticks = np.rint(np.arange(5, 10) * PERIOD).astype(np.int64)
    assert mfold_coincidences([ticks, []], cfg, 1000.0, tick_ps=1.0, duration_s=1.0).count == 0
    with pytest.raises(InvalidInputError):
        mfold_coincidences([ticks], cfg, 1000.0, tick_ps=1.0)
    with pytest.raises(InvalidInputError):
        mfold_coincidences([ticks, ticks], cfg, PERIOD, tick_ps=1.0)


def test_m1_counts_occupied_slots():
    cfg = DemuxConfig(m_modes=1, n_pulses=20)
    rng = np.random.default_rng(3)
    slots = np.sort(rng.choice(100_000, 5000, replace=False))
    ticks = np.rint((slots * PERIOD + rng.uniform(-1000, 1000, slots.size)) / 81).astype(np.int64)
    ticks = np.unique(np.concatenate([ticks, ticks[::7] + 3]))  # some slots with two tags
    r = mfold_coincidences([ticks], cfg, PERIOD / 2, tick_ps=81)
    assert r.count == np.unique(slots).size


def test_window_excludes_far_tags():
    cfg = DemuxConfig(m_modes=2, n_pulses=1)
    k = 1  # aligned slot for M=2, N=1
    a = np.array([int(k * PERIOD) + 500])
    b = np.array([int(k * PERIOD) - 500])
    assert mfold_coincidences([a, b], cfg, 600.0, tick_ps=1.0, duration_s=1).count == 1
    assert mfold_coincidences([a, b], cfg, 400.0, tick_ps=1.0, duration_s=1).count == 0


def test_small_cases_against_slot_scan():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        cfg = DemuxConfig(m_modes=m, n_pulses=n)
        window = float(rng.uniform(0, PERIOD / 2))
        chans = [np.unique(rng.integers(0, int(200 * PERIOD / 81), 80)) for _ in range(m)]
        got = mfold_coincidences(chans, cfg, window, tick_ps=81, duration_s=1).count
        assert got == brute_coincidences(chans, 81, PERIOD, m, n, window)


def test_random_cases_against_exhaustive_oracle():
    rng = np.random.default_rng(77)
    for case in range(100):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 21))
        cfg = DemuxConfig(m_modes=m, n_pulses=n)
        total = int(rng.integers(m, 10_001))
        n_slots = int(rng.integers(1, 4 * total // m + 2)) * m * n
        window = float(rng.choice([PERIOD / 2, rng.uniform(0, PERIOD / 2)]))
        chans = []
        for _ in range(m):
            slots = rng.integers(0, n_slots, total // m)
            t = slots * PERIOD + rng.normal(0, PERIOD / 4, slots.size)
            chans.append(np.unique(np.floor(np.clip(t, 0, None) / 81).astype(np.int64)))
        got = mfold_coincidences(chans, cfg, window, tick_ps=81, duration_s=1).count
        assert got == brute_coincidences_np(chans, 81, PERIOD, m, n, window), case


def test_streaming_counter_matches_batch():
    rng = np.random.default_rng(12)
    cfg = DemuxConfig(m_modes=3, n_pulses=4)
    chans = []
    for _ in range(3):
        slots = rng.integers(0, 20_000, 8000)
        chans.append(np.unique(np.floor((slots * PERIOD + rng.normal(0, 2000, slots.size)).clip(0) / 81)).astype(np.int64))
    batch = mfold_coincidences(chans, cfg, PERIOD / 2, tick_ps=81, duration_s=1.0).count
    counter = CoincidenceCounter(cfg, PERIOD / 2, 81)
    edges = np.sort(rng.integers(0, int(20_000 * PERIOD / 81), 25))
    lo = 0
    for hi in list(edges) + [None]:
        part = [c[(c >= lo) & (c < hi)] if hi is not None else c[c >= lo] for c in chans]
        counter.push(part, hi)
        lo = hi
    assert counter.result(1.0).count == batch


def test_csv_writers():
    h = g2_histogram([0, 100], [50, 120], 10.0, 30.0)
    buf = io.StringIO()
    analysis.write_histogram_csv(normalize_g2(h, 30.0, n_bins=2), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "tau_ps,counts,normalized_value"
    assert len(lines) == 8
    assert lines[1].startswith("-30.0,")
    buf = io.StringIO()
    analysis.write_coincidence_csv([analysis.CoincidenceResult(4, 6565.0, 30, 26.0)], buf)
    assert buf.getvalue().splitlines() == ["m_fold,window_ps,count,duration_s,rate_hz",
                                           f"4,6565.0,30,26.0,{30 / 26.0!r}"]
