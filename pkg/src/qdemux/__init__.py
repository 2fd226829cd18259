"""Simulation and analysis kit for temporally demultiplexed single-photon sources."""
from .demux import (
    DemuxConfig, RecoveryKernel, RhoTable, SwitchingSchedule, active_passive_ratio, brightness_sweep,
    click_probability_table, input_rate, mfold_rate, mfold_rate_at, passive_variant, switching_schedule,
)
from .efficiency import (
    EmitterPhysics, PowerSeriesPoint, SaturationFit, SaturationParams, StageEfficiencies, fit_saturation,
    quantum_dot_efficiency, rate_ladder, saturation_intensity, source_efficiency,
)
from .errors import (
    ConfigError, CorruptionError, CsvParseError, FitError, InsufficientSpanError, InvalidInputError,
    NormalizationError, OrderingError, QDemuxError, TagFormatError, TruncationError,
)

__version__ = "0.1.0"
