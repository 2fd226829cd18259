"""Command-line front end: ``qdemux {model,simulate,g2,coinc,fit-sat}``.

Data go to files under ``--out`` (and short summaries to stdout); progress
and diagnostics go to stderr. Every run writes ``manifest.json`` next to its
outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, tagio
from .config import RunConfig, load_config
from .demux import mfold_rate_at, passive_variant, write_sweep_csv
from .efficiency import fit_saturation, read_power_series, saturation_params_csv, source_efficiency
from .errors import (
    ConfigError, CsvParseError, FitError, InsufficientSpanError, InvalidInputError, NormalizationError,
    QDemuxError, TagFormatError,
)
from .streamsim import run_demux_simulation, run_hbt_simulation

log = logging.getLogger("qdemux")

DEFAULT_GRID = tuple(float(x) for x in np.round(np.geomspace(1e-3, 0.5, 28), 6))
EXIT_INPUT, EXIT_ANALYSIS, EXIT_IO = 2, 3, 4


class Run:
    """Output directory plus the manifest describing how it was produced."""

    def __init__(self, subcommand: str, args, config_path=None, seed=None):
        self.out = Path(args.out)
        self.manifest = {
            "subcommand": subcommand,
            "config": str(config_path) if config_path else None,
            "seed": seed,
            "outputs": [],
            "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        }
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.manifest["outputs"].append(str(p))
        return p

    def finish(self, **extra):
        self.manifest.update(extra)
        with open(self.out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, default=str)
            fh.write("\n")


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    return load_config(args.config)


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", "seed must be an unsigned 64-bit integer")
    return seed


def _grid(text: str | None):
    if text is None:
        return DEFAULT_GRID
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError("--eta-s-grid", f"bad eta_s grid {text!r}") from None
    if not vals:
        raise ConfigError("--eta-s-grid", "eta_s grid is empty")
    return vals


# --------------------------------------------------------------------------
# subcommands


def cmd_model(args) -> int:
    cfg = _config(args)
    demux = cfg.demux
    nominal = cfg.eta_s if cfg.eta_s is not None else source_efficiency(cfg.stages)
    grid = _grid(args.eta_s_grid)
    run = Run("model", args, args.config)
    curves = {
        "active": demux,
        "passive": passive_variant(demux),
        f"active_eta_det_{args.eta_det_override:g}": replace(demux, eta_det=args.eta_det_override),
    }
    summary = {"eta_s_nominal": nominal, "f_in_hz": demux.f_rep * nominal}
    for name, c in curves.items():
        with open(run.path(f"model_{name}.csv"), "w") as fh:
            write_sweep_csv(c, grid, fh)
        summary[f"f_mf_hz_{name}"] = mfold_rate_at(c, nominal)
    with open(run.path("summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    m = demux.m_modes
    print(f"eta_s = {nominal:.6g}  F_in = {summary['f_in_hz']:.6g} Hz")
    print(f"F_{m}F active  = {summary['f_mf_hz_active']:.6g} Hz")
    print(f"F_{m}F passive = {summary['f_mf_hz_passive']:.6g} Hz")
    run.finish(summary=summary)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    n_pulses = args.n_pulses if args.n_pulses is not None else cfg["n_pulses_total"]
    if n_pulses < 1:
        raise ConfigError("n_pulses_total", "n_pulses must be >= 1")
    demux, detector = cfg.demux, cfg.detector
    run = Run("simulate", args, args.config, seed)
    header_for = lambda channels: tagio.TagFileHeader(tick_ps=detector.tick, channel_count=channels)
    t0 = time.perf_counter()
    if args.hbt or args.coherent_mean is not None:
        a, b = run_hbt_simulation(cfg.physics, cfg.stages, detector, demux.f_rep, n_pulses, seed,
                                  eta_s=cfg.eta_s, coherent_mean=args.coherent_mean)
        tagio.write_tag_file(run.path("hbt.ttag"), header_for(2), tagio.records_from_channels([a, b]))
        singles = [int(a.size), int(b.size)]
        coinc = None
    else:
        res = run_demux_simulation(
            demux, cfg.physics, cfg.stages, detector, n_pulses, seed, eta_s=cfg.eta_s,
            guard_window=cfg["guard_window_ns"], window_ps=cfg.get("window_ps"), keep_tags=True,
        )
        for ch, ticks in enumerate(res.tags):
            tagio.write_tag_file(run.path(f"channel_{ch}.ttag"), header_for(1),
                                 tagio.records_from_channels([ticks]))
        singles = [int(s) for s in res.singles]
        coinc = res.coincidences.count
    duration = n_pulses / demux.f_rep
    log.info("simulated %d pulses in %.1f s", n_pulses, time.perf_counter() - t0)
    for ch, s in enumerate(singles):
        print(f"channel {ch}: {s} tags, {s / duration:.6g} Hz")
    if coinc is not None:
        print(f"{demux.m_modes}-fold coincidences: {coinc}")
    run.finish(n_pulses=n_pulses, f_rep_hz=demux.f_rep, duration_s=duration, singles=singles,
               coincidences=coinc)
    return 0


def _read_tags(paths):
    """(tick_ps, list of per-channel int64 tick arrays) over all files."""
    tick = None
    channels = []
    for p in paths:
        try:
            header, rec = tagio.read_tag_file(p)
        except OSError as exc:
            raise InvalidInputError(f"cannot read tag file {p}: {exc}") from exc
        if tick is not None and header.tick_ps != tick:
            raise InvalidInputError(f"{p}: tick {header.tick_ps} ps differs from {tick} ps")
        tick = header.tick_ps
        channels.extend(tagio.channel_ticks(rec, c) for c in range(header.channel_count))
    return tick, channels


def _sibling_manifest(path):
    m = Path(path).parent / "manifest.json"
    if m.exists():
        try:
            return json.loads(m.read_text())
        except (OSError, ValueError):
            return None
    return None


def cmd_g2(args) -> int:
    cfg = _config(args)
    tick, channels = _read_tags(args.tags)
    if len(channels) != 2:
        raise InvalidInputError(f"g2 needs exactly two channels, found {len(channels)}")
    f_rep = args.f_rep if args.f_rep is not None else cfg["f_rep_hz"]
    run = Run("g2", args, args.config)
    hist = analysis.g2_histogram(channels[0], channels[1], args.bin_width_ps, args.tau_max_ps,
                                 tick_ps=tick, method=args.method)
    period = 1e12 / f_rep
    reference = args.reference_tau_ps
    if reference is None:
        if hist.bin_width <= period / 4:
            # pulsed data at fine binning: centre the reference on the farthest whole side peak
            k_far = math.floor(hist.edge / period - 0.5)
            reference = min(k_far * period + (analysis.REFERENCE_BINS // 2) * hist.bin_width,
                            hist.k_max * hist.bin_width)
        else:
            reference = hist.k_max * hist.bin_width
    hist = analysis.normalize_g2(hist, reference)
    with open(run.path("g2_histogram.csv"), "w") as fh:
        analysis.write_histogram_csv(hist, fh)
    summary = {"bin_width_ps": hist.bin_width, "tau_max_ps": hist.tau_max, "reference_tau_ps": reference,
               "normalization": hist.normalization, "method": hist.method, "empty": hist.empty}
    if hist.bin_width <= period / 4:
        z = analysis.g2_zero_stats(hist, f_rep)
        summary.update(g2_zero=z.value, g2_zero_sigma=z.sigma)
        print(f"g2(0) = {z.value:.5g} +- {z.sigma:.2g}")
    if abs(hist.bin_width - period) <= 1e-3 * period and hist.edge >= analysis.BUNCHING_WINDOW_PS:
        b = analysis.bunching_amplitude(hist, f_rep)
        summary["bunching_amplitude"] = b
        print(f"bunching amplitude = {b:.5g}")
    with open(run.path("g2_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    run.finish(summary=summary)
    return 0


def cmd_coinc(args) -> int:
    cfg = _config(args)
    demux = cfg.demux
    tick, channels = _read_tags(args.tags)
    if len(channels) != demux.m_modes:
        raise InvalidInputError(f"config has {demux.m_modes} channels, tag files provide {len(channels)}")
    duration = args.duration_s
    if duration is None:
        man = _sibling_manifest(args.tags[0])
        if man and man.get("n_pulses") and man.get("f_rep_hz"):
            duration = man["n_pulses"] / man["f_rep_hz"]
    window = args.window_ps if args.window_ps is not None else cfg.get("window_ps", demux.period_ps / 2)
    run = Run("coinc", args, args.config)
    res = analysis.mfold_coincidences(channels, demux, window, tick_ps=tick, duration_s=duration)
    with open(run.path("coincidences.csv"), "w") as fh:
        analysis.write_coincidence_csv([res], fh)
    rate = res.rate if res.duration else 0.0
    err = res.rate_err if res.duration else 0.0
    print(f"{res.m_fold}-fold: {res.count} events in {res.duration:.6g} s -> {rate:.6g} +- {err:.2g} Hz")
    run.finish(count=res.count, duration_s=res.duration, rate_hz=rate, rate_err_hz=err)
    return 0


def cmd_fit_sat(args) -> int:
    try:
        with open(args.series) as fh:
            series = read_power_series(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {args.series}: {exc}") from exc
    run = Run("fit-sat", args, args.config)
    try:
        fit = fit_saturation(series)
    except (InvalidInputError, FitError) as exc:
        raise ConfigError(str(args.series), f"cannot fit power series: {exc}") from exc
    with open(run.path("saturation_fit.csv"), "w") as fh:
        fh.write(saturation_params_csv(fit))
    p = fit.params
    print(f"I0 = {p.i0:.6g} counts/s  P_sat = {p.p_sat:.6g} nW  eta_F = {p.eta_f:.5g}")
    run.finish(i0=p.i0, p_sat_nw=p.p_sat, eta_f=p.eta_f, iterations=fit.iterations)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(prog="qdemux", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("model", parents=[common], help="analytic M-fold rate curves")
    p.add_argument("--eta-s-grid", help="comma-separated source efficiencies")
    p.add_argument("--eta-det-override", type=float, default=0.30, help="detector efficiency of the third curve")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo time tags")
    p.add_argument("--n-pulses", type=int, help="laser pulses to simulate (overrides n_pulses_total)")
    p.add_argument("--hbt", action="store_true", help="HBT setup instead of the demultiplexer")
    p.add_argument("--coherent-mean", type=float, help="HBT with a coherent source of this mean photon number")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("g2", parents=[common], help="g2(tau) histogram of two channels")
    p.add_argument("tags", nargs="+", type=Path, help="one two-channel file or two one-channel files")
    p.add_argument("--bin-width-ps", type=float, default=100.0)
    p.add_argument("--tau-max-ps", type=float, default=150e3)
    p.add_argument("--reference-tau-ps", type=float, help="normalization lag (default: the farthest side peak for pulse-resolved binning, else the end of the span)")
    p.add_argument("--f-rep", type=float, help="laser repetition rate in Hz (default: from config)")
    p.add_argument("--method", choices=("auto", "exact", "binned"), default="auto")
    p.set_defaults(func=cmd_g2)

    p = sub.add_parser("coinc", parents=[common], help="M-fold coincidences of demultiplexed channels")
    p.add_argument("tags", nargs="+", type=Path, help="tag files, channels taken in order")
    p.add_argument("--window-ps", type=float, help="half-width of the coincidence window")
    p.add_argument("--duration-s", type=float, help="acquisition time (default: from the run manifest)")
    p.set_defaults(func=cmd_coinc)

    p = sub.add_parser("fit-sat", parents=[common], help="fit a saturation power series")
    p.add_argument("series", type=Path, help="CSV with power_nW,counts_per_s,filtered")
    p.set_defaults(func=cmd_fit_sat)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CsvParseError) as exc:
        log.error("config-error: %s", exc)
        return EXIT_INPUT
    except (InvalidInputError, TagFormatError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT
    except (InsufficientSpanError, NormalizationError) as exc:
        log.error("analysis: %s", exc)
        return EXIT_ANALYSIS
    except OSError as exc:
        log.error("io-error: %s", exc)
        return EXIT_IO
    except QDemuxError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
