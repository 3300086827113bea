"""
Experiment configuration module.

This module handles the experiment configuration file: one JSON document
with an experiment kind, a master seed and nested sections whose fields all
default to the values in common.constants.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Any, Dict, Optional

from common.constants import (
    DEFAULT_V_PI, DEFAULT_COMBINER_NORM, DEFAULT_IMBALANCE, DEFAULT_F_CON,
    DEFAULT_DURATION, DEFAULT_SAMPLE_RATE, DEFAULT_RADIUS, DEFAULT_HARMONICS,
    DEFAULT_DRIFT_RANGE, DEFAULT_MU, DEFAULT_EPOCHS, DEFAULT_GATE,
    DEFAULT_RESET_THRESHOLD, FD_STEP_VOLTAGE_FRACTION, DEFAULT_TRACE_LENGTH,
    DEFAULT_MC_RUNS, DEFAULT_SYMBOL_RATE, DEFAULT_SAMPLES_PER_SYMBOL,
    DEFAULT_N_SYMBOLS, DEFAULT_DETECTOR_GAIN, DEFAULT_VCO_GAIN, DEFAULT_DAMPING,
    DEFAULT_RAMP_RATE, DEFAULT_SETTLE_FRACTION, EXPERIMENT_KINDS,
    DEFAULT_OUTPUT_DIR, DEFAULT_SEED, MIN_EYE_SYMBOLS
)
from common.errors import ConfigValidationError, InvalidInputError
from control.calibration import DescentConfig, calibration_waveform
from control.control_synthesis import linear_ramp_trajectory
from plant.modulator_plant import ModulatorParams, DriftSpec
from sync.sync_loop import LoopConfig, OffsetProcess


@dataclass
class PlantSection:
    """Nominal plant settings."""
    v_pi: float = DEFAULT_V_PI
    combiner_norm: float = DEFAULT_COMBINER_NORM
    imbalance: float = DEFAULT_IMBALANCE

    def build(self) -> ModulatorParams:
        return replace(ModulatorParams.nominal(self.v_pi),
                       combiner_norm=self.combiner_norm, imbalance=self.imbalance)


@dataclass
class RampSection:
    """Linear ramp demonstration settings."""
    f_con: float = DEFAULT_F_CON
    duration: float = DEFAULT_DURATION
    sample_rate: float = DEFAULT_SAMPLE_RATE
    r: float = DEFAULT_RADIUS
    harmonics: int = DEFAULT_HARMONICS
    window: str = 'hann'


@dataclass
class DriftSection:
    """Drift injected before calibration; draws are seeded by the master seed."""
    relative_range: float = DEFAULT_DRIFT_RANGE
    distribution: str = 'uniform'

    def build(self, seed: int) -> DriftSpec:
        return DriftSpec(relative_range=self.relative_range, distribution=self.distribution, seed=seed)


@dataclass
class DescentSection:
    """Gradient-descent settings."""
    mu: float = DEFAULT_MU
    epochs: int = DEFAULT_EPOCHS
    gate: float = DEFAULT_GATE
    reset_threshold: float = DEFAULT_RESET_THRESHOLD
    fd_step: float = FD_STEP_VOLTAGE_FRACTION
    early_stop: bool = True
    trace_length: int = DEFAULT_TRACE_LENGTH

    def build(self, seed: int) -> DescentConfig:
        return DescentConfig(mu=self.mu, epochs=self.epochs, gate=self.gate,
                             reset_threshold=self.reset_threshold, fd_step=self.fd_step,
                             seed=seed, early_stop=self.early_stop)


@dataclass
class MonteCarloSection:
    """Monte-Carlo sweep settings."""
    n_runs: int = DEFAULT_MC_RUNS
    parallel: int = 1


@dataclass
class SyncSection:
    """Synchronization loop settings."""
    symbol_rate: float = DEFAULT_SYMBOL_RATE
    samples_per_symbol: int = DEFAULT_SAMPLES_PER_SYMBOL
    n_symbols: int = DEFAULT_N_SYMBOLS
    offset_kind: str = 'ramp'
    ramp_rate: float = DEFAULT_RAMP_RATE
    diffusion: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0
    detector_gain: float = DEFAULT_DETECTOR_GAIN
    vco_gain: float = DEFAULT_VCO_GAIN
    kp: Optional[float] = None
    ki: Optional[float] = None
    natural_frequency: Optional[float] = None
    damping: float = DEFAULT_DAMPING
    mode: str = 'closed'
    r: float = DEFAULT_RADIUS
    noise_std: float = 0.0
    settle_fraction: float = DEFAULT_SETTLE_FRACTION

    def build(self, plant: ModulatorParams, seed: int) -> LoopConfig:
        offset = OffsetProcess(kind=self.offset_kind, rate=self.ramp_rate, diffusion=self.diffusion,
                               amplitude=self.amplitude, frequency=self.frequency)
        return LoopConfig(
            symbol_rate=self.symbol_rate, samples_per_symbol=self.samples_per_symbol,
            n_symbols=self.n_symbols, offset=offset, detector_gain=self.detector_gain,
            kp=self.kp, ki=self.ki, natural_frequency=self.natural_frequency,
            damping=self.damping, vco_gain=self.vco_gain, mode=self.mode, seed=seed,
            plant=plant, r=self.r, v_pi=plant.v_pi_i, noise_std=self.noise_std,
            settle_fraction=self.settle_fraction,
        )


SECTIONS = {
    'plant': PlantSection,
    'ramp': RampSection,
    'drift': DriftSection,
    'descent': DescentSection,
    'montecarlo': MonteCarloSection,
    'sync': SyncSection,
}


def _check_value(section: str, name: str, default: Any, value: Any):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = (value is None and default is None) or (
            isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigValidationError(f"Invalid type for {where}: {value!r}")


def _build_section(name: str, data: Any):
    cls = SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigValidationError(f"Section '{name}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigValidationError(f"Unknown keys in section '{name}': {unknown}")
    defaults = cls()
    for key, value in data.items():
        _check_value(name, key, getattr(defaults, key), value)
    return cls(**data)


@dataclass
class ExperimentConfig:
    """Experiment configuration class."""
    experiment: str
    seed: int = DEFAULT_SEED
    output_dir: str = DEFAULT_OUTPUT_DIR
    plant: PlantSection = field(default_factory=PlantSection)
    ramp: RampSection = field(default_factory=RampSection)
    drift: DriftSection = field(default_factory=DriftSection)
    descent: DescentSection = field(default_factory=DescentSection)
    montecarlo: MonteCarloSection = field(default_factory=MonteCarloSection)
    sync: SyncSection = field(default_factory=SyncSection)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """Build a configuration from parsed JSON, rejecting unknown keys."""
        if not isinstance(data, dict):
            raise ConfigValidationError("Configuration must be a JSON object")
        allowed = {'experiment', 'seed', 'output_dir', *SECTIONS}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigValidationError(f"Unknown configuration keys: {unknown}")
        if 'experiment' not in data:
            raise ConfigValidationError("Configuration must name an experiment")

        kwargs = {name: _build_section(name, data[name]) for name in SECTIONS if name in data}
        for key in ('experiment', 'seed', 'output_dir'):
            if key in data:
                kwargs[key] = data[key]
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> 'ExperimentConfig':
        """Load and validate a JSON configuration file."""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigValidationError(f"Cannot read configuration {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"Configuration {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def validate(self):
        """Check the experiment kind and that every section builds its domain object."""
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigValidationError(
                f"Unknown experiment '{self.experiment}', expected one of {EXPERIMENT_KINDS}"
            )
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigValidationError("output_dir must be a non-empty string")
        if self.montecarlo.n_runs < 1:
            raise ConfigValidationError(f"montecarlo.n_runs must be >= 1, got {self.montecarlo.n_runs}")
        if self.montecarlo.parallel == 0:
            raise ConfigValidationError("montecarlo.parallel must be non-zero")

        try:
            plant = self.plant.build()
            if self.experiment == 'ramp':
                linear_ramp_trajectory(self.ramp.f_con, self.ramp.duration, self.ramp.sample_rate)
                if not 0 < self.ramp.r <= 1:
                    raise InvalidInputError(f"ramp.r must lie in (0, 1], got {self.ramp.r}")
                if self.ramp.window not in ('hann', 'rect'):
                    raise InvalidInputError(f"ramp.window must be 'hann' or 'rect', got {self.ramp.window!r}")
                if self.ramp.harmonics < 2:
                    raise InvalidInputError("ramp.harmonics must be >= 2")
            elif self.experiment in ('calibrate', 'montecarlo'):
                self.drift.build(self.seed)
                self.descent.build(self.seed)
                calibration_waveform(plant.v_pi_i, self.descent.trace_length)
            else:
                loop_config = self.sync.build(plant, self.seed)
                if loop_config.post_lock_symbols < MIN_EYE_SYMBOLS:
                    raise InvalidInputError(
                        f"sync leaves {loop_config.post_lock_symbols} symbols after settling, "
                        f"metrics need at least {MIN_EYE_SYMBOLS}"
                    )
        except ConfigValidationError:
            raise
        except InvalidInputError as e:
            raise ConfigValidationError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output directory."""
        data = self.to_dict()
        data.pop('output_dir')
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       parallel: Optional[int] = None) -> 'ExperimentConfig':
        """Copy with command-line overrides applied and re-validated."""
        config = replace(self)
        if seed is not None:
            config.seed = seed
        if output_dir is not None:
            config.output_dir = output_dir
        if parallel is not None:
            config.montecarlo = replace(self.montecarlo, parallel=parallel)
        config.validate()
        return config

    def get_plant(self) -> ModulatorParams:
        return self.plant.build()

    def get_drift_spec(self) -> DriftSpec:
        return self.drift.build(self.seed)

    def get_descent_config(self) -> DescentConfig:
        return self.descent.build(self.seed)

    def get_loop_config(self) -> LoopConfig:
        return self.sync.build(self.plant.build(), self.seed)
