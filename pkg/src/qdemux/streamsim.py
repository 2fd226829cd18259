"""Discrete-event Monte Carlo of a pulsed quantum-dot source.

Events flow as struct-of-array batches: emission, Bernoulli loss stages,
switch routing with delay compensation, and detection with dead time, jitter
and time-tagger quantization. Long runs are processed in chunks of pulses;
every random draw comes from a substream keyed by (seed, stage, chunk), so a
seed fully determines the output.

Time is in picoseconds from the start of the run; pulse ``j`` fires at
``j * 1e12 / f_rep``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import analysis
from ._kernels import dead_time_filter
from .demux import DemuxConfig
from .efficiency import EmitterPhysics, StageEfficiencies, source_efficiency
from .errors import InvalidInputError

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 1 << 23
_NO_TICK = np.iinfo(np.int64).min // 4

_STAGE_IDS = {
    "emit": 1, "blink": 2, "collect": 3, "fiber": 4, "route": 5,
    "detect": 6, "split": 7, "coherent": 8, "loss": 9,
}


def substream(seed, stage: str, chunk: int = 0) -> np.random.Generator:
    """Independent PCG64 generator for one (seed, stage, chunk) triple.

    A ``Generator`` passed as ``seed`` is returned unchanged.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence([int(seed) % 2**64, _STAGE_IDS[stage], int(chunk)])
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# event containers


class EmissionEvent(NamedTuple):
    time: float
    photons: int
    pulse_index: int


@dataclass
class EventStream:
    """A time-sorted batch of emission events (one row per event)."""

    time_ps: np.ndarray
    photons: np.ndarray
    pulse_index: np.ndarray

    @classmethod
    def empty(cls) -> "EventStream":
        return cls(np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64))

    @classmethod
    def concat(cls, streams: Sequence["EventStream"]) -> "EventStream":
        if not streams:
            return cls.empty()
        return cls(
            np.concatenate([s.time_ps for s in streams]),
            np.concatenate([s.photons for s in streams]),
            np.concatenate([s.pulse_index for s in streams]),
        )

    def __len__(self):
        return self.time_ps.size

    def __iter__(self) -> Iterator[EmissionEvent]:
        for t, n, j in zip(self.time_ps, self.photons, self.pulse_index):
            yield EmissionEvent(float(t), int(n), int(j))

    @property
    def n_photons(self) -> int:
        return int(self.photons.sum())

    def take(self, mask_or_index, photons=None) -> "EventStream":
        return EventStream(
            self.time_ps[mask_or_index],
            self.photons[mask_or_index] if photons is None else photons,
            self.pulse_index[mask_or_index],
        )

    def sorted(self) -> "EventStream":
        order = np.argsort(self.time_ps, kind="stable")
        return self.take(order)


@dataclass
class TagStream:
    """Detected time tags, globally sorted by (ticks, channel)."""

    ticks: np.ndarray
    channel: np.ndarray
    tick_ps: int

    def __len__(self):
        return self.ticks.size

    def channel_ticks(self, ch: int) -> np.ndarray:
        return self.ticks[self.channel == ch]

    @classmethod
    def from_channels(cls, per_channel: Sequence[np.ndarray], tick_ps: int) -> "TagStream":
        ticks = np.concatenate([np.asarray(t, np.int64) for t in per_channel]) if per_channel else np.empty(0, np.int64)
        chan = np.concatenate([np.full(len(t), i, np.int64) for i, t in enumerate(per_channel)]) if per_channel else np.empty(0, np.int64)
        order = np.lexsort((chan, ticks))
        return cls(ticks[order], chan[order], tick_ps)


# --------------------------------------------------------------------------
# emitter


class EmitterState(enum.Enum):
    GROUND = 0
    BRIGHT = 1
    DARK = 2
    BLINK_OFF = 3


class EmitterStateMachine:
    """Per-pulse exciton preparation plus a slow blinking telegraph.

    The telegraph alternates exponential on/off dwells with stationary
    off-probability ``p_blink_off`` and correlation time ``tau_blink``, so
    mean dwells are ``tau/p_off`` (on) and ``tau/(1 - p_off)`` (off). While on,
    a pulse prepares the selected exciton with probability
    ``p_e / (1 - p_off)``, keeping the time-averaged yield at ``p_e``. A
    prepared exciton is bright with probability ``eta_b``; otherwise it is
    shelved in the dark state and emits into the line only with probability
    ``p_dark_emit`` (delay rate ``gamma_dark``).

    State carries across calls, so successive chunks see one continuous
    telegraph as long as times are fed in increasing order.
    """

    def __init__(self, physics: EmitterPhysics, stages: StageEfficiencies, rng: np.random.Generator):
        self.physics = physics
        self._rng = rng
        p_off = physics.p_blink_off
        scale = 1.0 / (1.0 - p_off)
        self.q_bright = stages.p_e * stages.eta_b * scale
        self.q_dark = stages.p_e * (1.0 - stages.eta_b) * physics.p_dark_emit * scale
        if self.q_bright + self.q_dark > 1.0 + 1e-12:
            raise InvalidInputError(
                "per-pulse emission probability exceeds 1 once rescaled for blinking; "
                "lower p_blink_off or p_e"
            )
        if p_off > 0:
            tau = physics.tau_blink * 1e6  # us -> ps
            self.mean_on = tau / p_off
            self.mean_off = tau / (1.0 - p_off)
            self._on = bool(rng.random() >= p_off)
            self._t_next = rng.exponential(self.mean_on if self._on else self.mean_off)
        else:
            self._on = True
            self._t_next = math.inf

    @property
    def blinking(self) -> bool:
        return self.physics.p_blink_off > 0

    @property
    def state(self) -> EmitterState:
        """Between pulses: ground when emissive, otherwise blinked off."""
        return EmitterState.GROUND if self._on else EmitterState.BLINK_OFF

    def on_mask(self, times_ps: np.ndarray) -> np.ndarray:
        """Telegraph state at nondecreasing ``times_ps`` (True = emissive)."""
        if not self.blinking or times_ps.size == 0:
            return np.ones(times_ps.size, dtype=bool)
        t_end = times_ps[-1]
        switches = [np.array([self._t_next])]
        last, state_after = self._t_next, not self._on
        while last <= t_end:
            span = t_end - last
            n = int(2 * span / (self.mean_on + self.mean_off) + 4 * math.sqrt(span / self.mean_off + 1) + 16)
            means = np.where(np.arange(n) % 2 == 0,
                             self.mean_on if state_after else self.mean_off,
                             self.mean_off if state_after else self.mean_on)
            steps = last + np.cumsum(self._rng.exponential(1.0, n) * means)
            switches.append(steps)
            last = steps[-1]
            if n % 2:
                state_after = not state_after
        s = np.concatenate(switches)
        flips = np.searchsorted(s, times_ps, side="right")
        mask = np.where(flips % 2 == 0, self._on, not self._on)
        done = int(np.searchsorted(s, t_end, side="right"))
        if done % 2:
            self._on = not self._on
        self._t_next = s[done]
        return mask


def _bernoulli_indices(rng: np.random.Generator, n: int, q: float) -> np.ndarray:
    """Sorted indices in [0, n) each selected independently with probability q."""
    if q <= 0 or n == 0:
        return np.empty(0, np.int64)
    if q >= 1:
        return np.arange(n, dtype=np.int64)
    size = int(n * q + 6 * math.sqrt(n * q * (1 - q)) + 16)
    parts = []
    pos = -1
    while True:
        idx = pos + np.cumsum(rng.geometric(q, size))
        if idx[-1] >= n:
            parts.append(idx[idx < n])
            break
        parts.append(idx)
        pos = idx[-1]
    return np.concatenate(parts)


def simulate_emission(
    physics: EmitterPhysics,
    stages: StageEfficiencies,
    f_rep: float,
    n_pulses_total: int,
    seed,
    *,
    first_pulse: int = 0,
    emitter: EmitterStateMachine | None = None,
) -> EventStream:
    """Photon emission events for ``n_pulses_total`` laser pulses.

    Each pulse emits with the exciton preparation probability, gated by the
    blinking telegraph. Emission time is the pulse time plus an exponential
    radiative delay; with probability ``p_multi`` an event carries two photons.
    """
    if n_pulses_total < 1:
        raise InvalidInputError("n_pulses_total must be >= 1")
    rng = substream(seed, "emit")
    if emitter is None:
        emitter = EmitterStateMachine(physics, stages, substream(seed, "blink"))
    period = 1e12 / f_rep
    q = emitter.q_bright + emitter.q_dark
    idx = _bernoulli_indices(rng, n_pulses_total, q)
    pulse = idx + first_pulse
    t_pulse = pulse * period
    if emitter.blinking:
        on = emitter.on_mask(t_pulse)
        pulse, t_pulse = pulse[on], t_pulse[on]
    n = pulse.size
    rate = np.full(n, physics.gamma_bright)
    if emitter.q_dark > 0:
        dark = rng.random(n) < emitter.q_dark / q
        rate[dark] = physics.gamma_dark
    delay = rng.exponential(1.0, n) / rate * 1e3  # ns -> ps
    photons = np.ones(n, np.int64)
    if physics.p_multi > 0:
        photons += rng.random(n) < physics.p_multi
    return EventStream(t_pulse + delay, photons, pulse).sorted()


def simulate_coherent(mean_photons: float, f_rep: float, n_pulses: int, seed, *, first_pulse: int = 0) -> EventStream:
    """Attenuated-laser benchmark: Poisson photon number per pulse, no delay.

    Each photon is a separate one-photon event at the pulse time.
    """
    rng = substream(seed, "coherent")
    counts = rng.poisson(mean_photons, n_pulses)
    idx = np.repeat(np.arange(n_pulses, dtype=np.int64), counts) + first_pulse
    return EventStream(idx * (1e12 / f_rep), np.ones(idx.size, np.int64), idx)


def apply_loss(events: EventStream, eta: float, seed) -> EventStream:
    """Independent Bernoulli survival of every photon."""
    if not 0 <= eta <= 1:
        raise InvalidInputError(f"eta must be in [0, 1], got {eta}")
    if eta == 1 or len(events) == 0:
        return events
    if eta == 0:
        return EventStream.empty()
    rng = substream(seed, "loss")
    surv = rng.binomial(events.photons, eta)
    keep = surv > 0
    return events.take(keep, surv[keep])


def hbt_split(events: EventStream, seed) -> tuple[EventStream, EventStream]:
    """50:50 beam splitter: each photon goes to arm a or b independently."""
    rng = substream(seed, "split")
    to_a = rng.binomial(events.photons, 0.5)
    to_b = events.photons - to_a
    a, b = to_a > 0, to_b > 0
    return events.take(a, to_a[a]), events.take(b, to_b[b])


def guard_mask(pulse_index: np.ndarray, config: DemuxConfig, guard_window: float) -> np.ndarray:
    """True for pulses clear of every switch transition.

    Transitions sit midway between the last pulse of one group and the first
    of the next and last ``guard_window`` ns, centered there. A pulse is lost
    if its time falls strictly inside a transition.
    """
    if guard_window <= 0 or config.m_modes == 1:
        return np.ones(pulse_index.size, dtype=bool)
    n = config.n_pulses
    slot = pulse_index % n
    dist = np.minimum(slot + 0.5, n - slot - 0.5) * config.period_ps
    return dist >= guard_window * 1e3 / 2


def route_demux(events: EventStream, config: DemuxConfig, guard_window: float, seed) -> list[EventStream]:
    """Route events to spatial channels and align matched slots.

    Returns one stream per channel. Channel ``m`` (1-based) is delayed by
    ``(M - m) * N`` pulse periods, so slot n of every channel in a cycle lands
    on the same time. Photons pass switch and channel losses independently.
    """
    if guard_window < 0:
        raise InvalidInputError("guard_window must be nonnegative")
    rng = substream(seed, "route")
    m_modes, n = config.m_modes, config.n_pulses
    mode = (events.pulse_index % config.cycle_pulses) // n
    keep_prob = config.eta_sw * np.asarray(config.eta_m)[mode]
    keep_prob = np.where(guard_mask(events.pulse_index, config, guard_window), keep_prob, 0.0)
    surv = rng.binomial(events.photons, keep_prob)
    out = []
    for m in range(m_modes):
        sel = (mode == m) & (surv > 0)
        delay = (m_modes - 1 - m) * n * config.period_ps
        out.append(EventStream(events.time_ps[sel] + delay, surv[sel], events.pulse_index[sel]))
    return out


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectorModel:
    """SNSPD and time tagger: efficiency, dead time (ns), jitter sigma (ps), tick (ps)."""

    eta_det: float = 0.88
    dead_time: float = 25.0
    jitter_sigma: float = 100.0 / 2.3548
    tick: int = 81

    def __post_init__(self):
        if not 0 <= self.eta_det <= 1:
            raise InvalidInputError("eta_det must be in [0, 1]")
        if self.dead_time < 0 or self.jitter_sigma < 0:
            raise InvalidInputError("dead_time and jitter_sigma must be nonnegative")
        if int(self.tick) != self.tick or self.tick < 1:
            raise InvalidInputError("tick must be a positive integer number of ps")

    @property
    def dead_ticks(self) -> int:
        # at least one tick so per-channel ticks stay strictly increasing
        return max(1, math.ceil(self.dead_time * 1e3 / self.tick - 1e-9))


class StreamingDetector:
    """Detection across successive event batches.

    ``push`` accepts one event stream per channel and returns, per channel,
    the accepted ticks whose jittered time lies before ``horizon_ps``; later
    arrivals wait in a buffer for the next batch so dead time and ordering are
    exact across chunk boundaries.
    """

    def __init__(self, det: DetectorModel, n_channels: int, seed):
        self.det = det
        self._rng = substream(seed, "detect")
        self._pending = [np.empty(0) for _ in range(n_channels)]
        self._last = [_NO_TICK] * n_channels
        self.n_channels = n_channels

    def push(self, channel_events: Sequence[EventStream], horizon_ps: float | None = None) -> list[np.ndarray]:
        if len(channel_events) != self.n_channels:
            raise InvalidInputError(f"expected {self.n_channels} channels, got {len(channel_events)}")
        det, rng = self.det, self._rng
        out = []
        for ch, ev in enumerate(channel_events):
            t = ev.time_ps
            if det.eta_det < 1 and t.size:
                t = t[rng.binomial(ev.photons, det.eta_det) > 0]
            if det.jitter_sigma > 0 and t.size:
                t = t + rng.normal(0.0, det.jitter_sigma, t.size)
            if self._pending[ch].size:
                t = np.concatenate([self._pending[ch], t])
            t = np.sort(t)
            if horizon_ps is not None:
                cut = int(np.searchsorted(t, horizon_ps))
                t, self._pending[ch] = t[:cut], t[cut:]
            else:
                self._pending[ch] = np.empty(0)
            t = t[t >= 0]  # the tagger starts at time zero
            ticks = np.floor(t / det.tick).astype(np.int64)
            keep, self._last[ch] = dead_time_filter(ticks, det.dead_ticks, self._last[ch])
            out.append(ticks[keep])
        return out

    def flush(self) -> list[np.ndarray]:
        return self.push([EventStream.empty()] * self.n_channels, None)


def detect(events, det: DetectorModel, seed) -> TagStream:
    """Detect one event stream or a list of per-channel streams."""
    channels = [events] if isinstance(events, EventStream) else list(events)
    ticks = StreamingDetector(det, len(channels), seed).push(channels, None)
    return TagStream.from_channels(ticks, det.tick)


# --------------------------------------------------------------------------
# end-to-end runs


def collection_efficiency(stages: StageEfficiencies, eta_s: float | None) -> float:
    """Thinning applied after emission so the source delivers ``eta_s``.

    Defaults to the optical chain beta * eta_oc * T * eta_F.
    """
    if eta_s is None:
        return source_efficiency(stages) / stages.eta_qd if stages.eta_qd else 0.0
    if stages.eta_qd == 0:
        if eta_s:
            raise InvalidInputError("eta_s > 0 needs a nonzero quantum-dot efficiency")
        return 0.0
    c = eta_s / stages.eta_qd
    if c > 1 + 1e-12:
        raise InvalidInputError(f"eta_s = {eta_s} exceeds the quantum-dot efficiency {stages.eta_qd}")
    return min(c, 1.0)


def _chunks(n_pulses: int, chunk: int):
    for c, p0 in enumerate(range(0, n_pulses, chunk)):
        yield c, p0, min(chunk, n_pulses - p0)


def _horizon(p_end: int, period: float, det: DetectorModel) -> float:
    return p_end * period - 10 * det.jitter_sigma - det.tick


@dataclass
class DemuxRun:
    config: DemuxConfig
    n_pulses: int
    duration_s: float
    coincidences: analysis.CoincidenceResult
    singles: np.ndarray
    tags: list[np.ndarray] | None = field(default=None, repr=False)


def run_demux_simulation(
    config: DemuxConfig,
    physics: EmitterPhysics,
    stages: StageEfficiencies,
    detector: DetectorModel,
    n_pulses: int,
    seed: int,
    *,
    eta_s: float | None = None,
    guard_window: float = 0.0,
    window_ps: float | None = None,
    slot_offset_ps: float = 0.0,
    keep_tags: bool = False,
    chunk_pulses: int = DEFAULT_CHUNK,
) -> DemuxRun:
    """Simulate source -> fiber -> demultiplexer -> detectors and count M-fold coincidences.

    ``config.eta_fiber`` is applied before the switch; the detector model sets
    efficiency, dead time and timing. Memory stays bounded unless
    ``keep_tags`` is set.
    """
    if n_pulses < 1:
        raise InvalidInputError("n_pulses must be >= 1")
    period = config.period_ps
    collect = collection_efficiency(stages, eta_s)
    emitter = EmitterStateMachine(physics, stages, substream(seed, "blink"))
    dets = StreamingDetector(detector, config.m_modes, seed)
    window = period / 2 if window_ps is None else window_ps
    duration = n_pulses / config.f_rep
    counter = analysis.CoincidenceCounter(config, window, detector.tick, slot_offset_ps=slot_offset_ps)
    singles = np.zeros(config.m_modes, np.int64)
    kept: list[list[np.ndarray]] = [[] for _ in range(config.m_modes)]

    def consume(ticks, horizon_tick):
        for ch, t in enumerate(ticks):
            singles[ch] += t.size
            if keep_tags:
                kept[ch].append(t)
        counter.push(ticks, horizon_tick)

    for c, p0, n in _chunks(n_pulses, chunk_pulses):
        ev = simulate_emission(physics, stages, config.f_rep, n, substream(seed, "emit", c),
                               first_pulse=p0, emitter=emitter)
        ev = apply_loss(ev, collect, substream(seed, "collect", c))
        ev = apply_loss(ev, config.eta_fiber, substream(seed, "fiber", c))
        routed = route_demux(ev, config, guard_window, substream(seed, "route", c))
        horizon = _horizon(p0 + n, period, detector)
        consume(dets.push(routed, horizon), math.floor(horizon / detector.tick))
        if c % 32 == 31:
            log.info("demux run: %d / %d pulses", p0 + n, n_pulses)
    consume(dets.flush(), None)

    tags = [np.concatenate(k) if k else np.empty(0, np.int64) for k in kept] if keep_tags else None
    return DemuxRun(config, n_pulses, duration, counter.result(duration), singles, tags)


def run_hbt_simulation(
    physics: EmitterPhysics,
    stages: StageEfficiencies,
    detector: DetectorModel,
    f_rep: float,
    n_pulses: int,
    seed: int,
    *,
    eta_s: float | None = None,
    coherent_mean: float | None = None,
    chunk_pulses: int = DEFAULT_CHUNK,
) -> tuple[np.ndarray, np.ndarray]:
    """Hanbury Brown-Twiss measurement of the source; returns ticks of both arms.

    With ``coherent_mean`` set the quantum dot is replaced by a coherent pulse
    train with that mean photon number per pulse at the splitter.
    """
    period = 1e12 / f_rep
    collect = collection_efficiency(stages, eta_s) if coherent_mean is None else 1.0
    emitter = None if coherent_mean is not None else EmitterStateMachine(physics, stages, substream(seed, "blink"))
    dets = StreamingDetector(detector, 2, seed)
    arms: list[list[np.ndarray]] = [[], []]
    for c, p0, n in _chunks(n_pulses, chunk_pulses):
        if coherent_mean is None:
            ev = simulate_emission(physics, stages, f_rep, n, substream(seed, "emit", c),
                                   first_pulse=p0, emitter=emitter)
            ev = apply_loss(ev, collect, substream(seed, "collect", c))
        else:
            ev = simulate_coherent(coherent_mean, f_rep, n, substream(seed, "coherent", c), first_pulse=p0)
        a, b = hbt_split(ev, substream(seed, "split", c))
        for arm, t in zip(arms, dets.push([a, b], _horizon(p0 + n, period, detector))):
            arm.append(t)
    for arm, t in zip(arms, dets.flush()):
        arm.append(t)
    return np.concatenate(arms[0]), np.concatenate(arms[1])


@dataclass
class PMultiTuning:
    p_multi: float
    sweep: list[tuple[float, float]]


def tune_p_multi(
    target_g2: float,
    physics: EmitterPhysics,
    stages: StageEfficiencies,
    detector: DetectorModel,
    f_rep: float,
    n_pulses: int,
    seed: int,
    *,
    grid: Sequence[float] = (0.0, 0.002, 0.004, 0.008),
    eta_s: float | None = None,
    bin_width_ps: float = 100.0,
) -> PMultiTuning:
    """Find the two-photon probability that yields a target g2(0).

    Runs the HBT simulation at each grid value, measures g2(0) from the
    histogram, and interpolates linearly between the bracketing points.
    """
    sweep = []
    tau_max = 7 * 1e12 / f_rep
    for i, pm in enumerate(sorted(grid)):
        run_seed = int(np.random.SeedSequence([int(seed) % 2**64, i]).generate_state(1, np.uint64)[0])
        a, b = run_hbt_simulation(replace(physics, p_multi=pm), stages, detector, f_rep, n_pulses,
                                  run_seed, eta_s=eta_s)
        hist = analysis.g2_histogram(a, b, bin_width_ps, tau_max, tick_ps=detector.tick)
        sweep.append((pm, analysis.g2_zero(hist, f_rep)))
        log.info("p_multi=%.5f -> g2(0)=%.5f", pm, sweep[-1][1])
    pms, g2s = np.array(sweep).T
    if not g2s.min() <= target_g2 <= g2s.max():
        raise InvalidInputError(f"target g2(0) = {target_g2} outside swept range [{g2s.min():.4g}, {g2s.max():.4g}]")
    order = np.argsort(g2s)
    return PMultiTuning(float(np.interp(target_g2, g2s[order], pms[order])), sweep)
