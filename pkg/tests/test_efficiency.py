import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import curve_fit

from qdemux.efficiency import (
    NOMINAL_SATURATION, NOMINAL_STAGES, LADDER_LABELS, PowerSeriesPoint, SaturationParams, StageEfficiencies,
    fit_saturation, quantum_dot_efficiency, rate_ladder, read_power_series, saturation_intensity,
    saturation_params_csv, source_efficiency, source_efficiency_interval, synthetic_power_series,
    write_power_series,
)
from qdemux.errors import CsvParseError, FitError, InvalidInputError

POWERS = [20, 40, 80, 120, 160, 236, 300, 400, 550, 700, 900, 1200]
ONES = StageEfficiencies(1, 1, 1, 1, 1, 1, 1, 1)


def test_saturation_values():
    assert saturation_intensity(0.0, NOMINAL_SATURATION) == 0.0
    assert saturation_intensity(1e9, NOMINAL_SATURATION) == pytest.approx(1.682e6)
    assert saturation_intensity(5.0, SaturationParams(1.0, 5.0, 1.0)) == pytest.approx(1 - math.exp(-1))
    with pytest.raises(InvalidInputError):
        saturation_intensity(-1.0, NOMINAL_SATURATION)


def test_saturation_monotone_and_bounded():
    p = np.linspace(0, 5000, 2001)
    y = saturation_intensity(p, NOMINAL_SATURATION)
    assert np.all(np.diff(y) >= 0)
    assert np.all(y <= NOMINAL_SATURATION.i0 * NOMINAL_SATURATION.eta_f)


def test_efficiency_products():
    assert quantum_dot_efficiency(0.37, 0.40) == pytest.approx(0.148)
    assert quantum_dot_efficiency(1, 1) == 1
    assert quantum_dot_efficiency(0, 0.3) == 0
    assert source_efficiency(NOMINAL_STAGES) == pytest.approx(0.148 * 0.8 * 0.6 * 0.69 * 0.58)
    assert source_efficiency(NOMINAL_STAGES) == pytest.approx(0.0284, abs=5e-5)
    assert source_efficiency(ONES) == 1
    assert source_efficiency(replace(NOMINAL_STAGES, beta=0)) == 0
    lo, hi = source_efficiency_interval(NOMINAL_STAGES)
    assert lo < source_efficiency(NOMINAL_STAGES) < hi
    assert lo < 0.023 < hi  # the measured value sits inside the worst-case interval


@settings(max_examples=100, deadline=None)
@given(c=st.floats(0.0, 1.0), field=st.sampled_from(["p_e", "eta_b", "beta", "eta_oc", "t_optics", "eta_f"]))
def test_source_efficiency_multiplicative(c, field):
    scaled = replace(NOMINAL_STAGES, **{field: getattr(NOMINAL_STAGES, field) * c})
    assert source_efficiency(scaled) == pytest.approx(c * source_efficiency(NOMINAL_STAGES), rel=1e-12, abs=1e-300)


def test_rate_ladder():
    rungs = dict(rate_ladder(76.152e6, NOMINAL_STAGES))
    assert list(rungs) == list(LADDER_LABELS)
    assert rungs["emitted_on_line"] == pytest.approx(11.27e6, rel=1e-3)
    assert rungs["in_fiber"] == pytest.approx(3.73e6, rel=2e-3)
    assert rungs["after_filter"] == pytest.approx(2.165e6, rel=2e-3)
    vals = [r for _, r in rate_ladder(76.152e6, NOMINAL_STAGES)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(r == 76.152e6 for _, r in rate_ladder(76.152e6, ONES))
    dead = [r for _, r in rate_ladder(76.152e6, replace(NOMINAL_STAGES, p_e=0.0))]
    assert all(r == 0 for r in dead)
    with pytest.raises(InvalidInputError):
        rate_ladder(0, NOMINAL_STAGES)


def test_noiseless_roundtrip():
    fit = fit_saturation(synthetic_power_series(NOMINAL_SATURATION, POWERS))
    p = fit.params
    assert p.i0 == pytest.approx(2.9e6, rel=1e-6)
    assert p.p_sat == pytest.approx(236.0, rel=1e-6)
    assert p.eta_f == pytest.approx(0.58, rel=1e-6)
    assert fit.residual_norm < 1e-3 * 2.9e6
    assert fit.iterations <= 200


def _scipy_fit(series):
    p = np.array([s.power for s in series])
    y = np.array([s.counts for s in series])
    f = np.array([s.filtered for s in series], float)

    def model(x, i0, ps, ef):
        return i0 * (1 - f * (1 - ef)) * (1 - np.exp(-x / ps))

    popt, _ = curve_fit(model, p, y, p0=(y.max(), np.median(p), 0.5), maxfev=20000)
    return popt


@pytest.mark.parametrize("seed", range(5))
def test_noisy_fit_agrees_with_scipy(seed):
    series = synthetic_power_series(NOMINAL_SATURATION, POWERS, noise=0.01, rng=np.random.default_rng(seed))
    ours = fit_saturation(series).params
    ref = _scipy_fit(series)
    assert ours.i0 == pytest.approx(ref[0], rel=1e-5)
    assert ours.p_sat == pytest.approx(ref[1], rel=1e-5)
    assert ours.eta_f == pytest.approx(ref[2], rel=1e-5)


def test_unfiltered_only_holds_eta_f():
    series = synthetic_power_series(SaturationParams(1e5, 50.0, 1.0), [5, 10, 25, 50, 100, 200, 400],
                                    both_branches=False)
    series = [replace(s, filtered=False) for s in series]
    fit = fit_saturation(series)
    assert fit.params.eta_f == 1.0
    assert fit.params.p_sat == pytest.approx(50.0, rel=1e-6)


def test_fit_errors():
    with pytest.raises(InvalidInputError):
        fit_saturation([PowerSeriesPoint(100, 1e5)] * 6)
    with pytest.raises(InvalidInputError):
        fit_saturation([PowerSeriesPoint(10, 1), PowerSeriesPoint(20, 2)])
    with pytest.raises(InvalidInputError):
        fit_saturation([PowerSeriesPoint(p, 1e3, True) for p in (1, 2, 3, 4)])
    with pytest.raises(FitError):
        fit_saturation([PowerSeriesPoint(p, 0.0, f) for p in (10, 100, 1000) for f in (False, True)])


def test_iteration_cap_reports_best():
    series = synthetic_power_series(NOMINAL_SATURATION, POWERS, noise=0.01, rng=np.random.default_rng(1))
    with pytest.raises(FitError) as info:
        fit_saturation(series, max_iter=1, initial=SaturationParams(1e5, 5.0, 0.9))
    assert info.value.best is not None and len(info.value.best) == 3
    assert info.value.iterations == 1


def test_power_series_csv_roundtrip(tmp_path):
    series = synthetic_power_series(NOMINAL_SATURATION, POWERS, noise=0.01, rng=np.random.default_rng(3))
    path = tmp_path / "series.csv"
    write_power_series(series, path)
    assert path.read_text().splitlines()[0] == "power_nW,counts_per_s,filtered"
    assert read_power_series(path) == series


@pytest.mark.parametrize("text, line", [
    ("power,counts,filtered\n", 1),
    ("power_nW,counts_per_s,filtered\n10,abc,0\n", 2),
    ("power_nW,counts_per_s,filtered\n10,5,0\n10,5,2\n", 3),
    ("power_nW,counts_per_s,filtered\n10,5\n", 2),
    ("power_nW,counts_per_s,filtered\n-1,5,0\n", 2),
])
def test_power_series_csv_errors(text, line):
    with pytest.raises(CsvParseError) as info:
        read_power_series(io.StringIO(text))
    assert info.value.line == line


def test_params_csv():
    fit = fit_saturation(synthetic_power_series(NOMINAL_SATURATION, POWERS))
    lines = saturation_params_csv(fit).splitlines()
    assert lines[0] == "i0_counts_per_s,p_sat_nW,eta_f,residual_norm,iterations"
    assert float(lines[1].split(",")[1]) == pytest.approx(236.0, rel=1e-6)


def test_validation():
    with pytest.raises(InvalidInputError):
        SaturationParams(-1, 10, 0.5)
    with pytest.raises(InvalidInputError):
        StageEfficiencies(1.2, 1, 1, 1, 1, 1)
    with pytest.raises(InvalidInputError):
        PowerSeriesPoint(-1, 0)
