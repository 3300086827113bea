"""
Modulator plant module.

This module models the IQ modulator used as an endless phase delay: two
null-biased child MZMs, the quadrature phase shifter in the Q arm, the two
monitor photodetectors and injectable parameter drift.

Fields are baseband ratios E_out/E_in; the optical carrier is factored out.
"""

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from common.constants import (
    DEFAULT_V_PI, DEFAULT_COMBINER_NORM, DEFAULT_IMBALANCE, FIELD_NORMALIZATION,
    MIN_SAMPLES_PER_PERIOD, DRIFT_DISTRIBUTIONS
)
from common.errors import InvalidInputError
from common.logger import logger
from control.control_synthesis import ControlWaveform

# E_out / E_in for a single sample
ComplexField = complex

DRIFTED_FIELDS = ('alpha_dc', 'beta_dc', 'gamma', 'alpha_gain', 'beta_gain')


@dataclass(frozen=True)
class ModulatorParams:
    """Physical plant state: half-wave voltages, biases, drive gains, imperfections."""
    v_pi_i: float = DEFAULT_V_PI
    v_pi_q: float = DEFAULT_V_PI
    v_pi_pm: float = DEFAULT_V_PI
    alpha_dc: float = -DEFAULT_V_PI
    beta_dc: float = -DEFAULT_V_PI
    gamma: float = DEFAULT_V_PI / 2
    alpha_gain: float = 1.0
    beta_gain: float = 1.0
    combiner_norm: float = DEFAULT_COMBINER_NORM
    imbalance: float = DEFAULT_IMBALANCE

    def __post_init__(self):
        values = [getattr(self, name) for name in self.__dataclass_fields__]
        if not all(np.isfinite(values)):
            raise InvalidInputError(f"Modulator parameters must be finite: {self}")
        if min(self.v_pi_i, self.v_pi_q, self.v_pi_pm) <= 0:
            raise InvalidInputError("Half-wave voltages must be strictly positive")
        if self.combiner_norm <= 0:
            raise InvalidInputError(f"combiner_norm must be positive, got {self.combiner_norm}")
        if abs(self.imbalance) >= 1:
            raise InvalidInputError(f"imbalance must lie in (-1, 1), got {self.imbalance}")

    @classmethod
    def nominal(cls, v_pi: float = DEFAULT_V_PI) -> 'ModulatorParams':
        """Ideal plant with all three half-wave voltages equal to ``v_pi``."""
        return cls(v_pi_i=v_pi, v_pi_q=v_pi, v_pi_pm=v_pi,
                   alpha_dc=-v_pi, beta_dc=-v_pi, gamma=v_pi / 2)

    def at_nominal(self) -> 'ModulatorParams':
        """Same half-wave voltages, biases and gains restored, imperfections removed."""
        return ModulatorParams(
            v_pi_i=self.v_pi_i, v_pi_q=self.v_pi_q, v_pi_pm=self.v_pi_pm,
            alpha_dc=-self.v_pi_i, beta_dc=-self.v_pi_q, gamma=self.v_pi_pm / 2
        )


@dataclass(frozen=True)
class DriftSpec:
    """Random deviation applied to the five calibrated plant parameters."""
    relative_range: float = 0.30
    distribution: str = 'uniform'
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.relative_range) or self.relative_range < 0:
            raise InvalidInputError(f"relative_range must be >= 0, got {self.relative_range}")
        if self.distribution not in DRIFT_DISTRIBUTIONS:
            raise InvalidInputError(f"Unknown drift distribution '{self.distribution}'")


@dataclass(frozen=True, eq=False)
class MonitorTrace:
    """Time-aligned monitor photocurrents and the true delivered phase."""
    t: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    theta_true: np.ndarray

    def __len__(self):
        return len(self.t)


def drive_field(params: ModulatorParams, v_alpha: np.ndarray, v_beta: np.ndarray,
                biases: Sequence[float], gains: Sequence[float]) -> np.ndarray:
    """Field transfer with (alpha_dc, beta_dc, gamma) and (alpha_gain, beta_gain) given directly.

    Half-wave voltages and combiner terms come from ``params``. Inputs are not
    validated; this is the inner kernel of field_transfer_array and of the
    calibration risk.
    """
    alpha_dc, beta_dc, gamma = biases
    alpha_gain, beta_gain = gains
    arm_i = np.cos(np.pi * (alpha_gain * v_alpha + alpha_dc) / (2 * params.v_pi_i))
    arm_q = np.cos(np.pi * (beta_gain * v_beta + beta_dc) / (2 * params.v_pi_q))
    quadrature = np.exp(1j * np.pi * gamma / params.v_pi_pm)

    combined = 0.5 * ((1 + params.imbalance) * arm_i + quadrature * (1 - params.imbalance) * arm_q)
    return FIELD_NORMALIZATION * params.combiner_norm * combined


def field_transfer_array(params: ModulatorParams, v_alpha, v_beta) -> np.ndarray:
    """Vectorized field transfer E_out/E_in for arrays of drive voltages.

    |field| <= combiner_norm holds only inside the magnitude constraint, i.e.
    for drives synthesized with r <= 1. Both arms at V_pi give
    sqrt(2) * combiner_norm.
    """
    v_alpha = np.asarray(v_alpha, dtype=float)
    v_beta = np.asarray(v_beta, dtype=float)
    if not (np.all(np.isfinite(v_alpha)) and np.all(np.isfinite(v_beta))):
        raise InvalidInputError("Drive voltages must be finite")
    return drive_field(params, v_alpha, v_beta, (params.alpha_dc, params.beta_dc, params.gamma),
                       (params.alpha_gain, params.beta_gain))


def field_transfer(params: ModulatorParams, v_alpha: float, v_beta: float) -> ComplexField:
    """Field ratio for one pair of drive voltages.

    At nominal biases this is sin(pi*v_alpha/2V_pi) + j*sin(pi*v_beta/2V_pi),
    bounded by combiner_norm only while the two squared sines add up to at
    most 1; (V_pi, V_pi) gives sqrt(2) * combiner_norm.
    """
    return complex(field_transfer_array(params, v_alpha, v_beta))


def monitor_m1(f):
    """Magnitude monitor |f|^2."""
    return np.abs(f) ** 2


def monitor_m2(f):
    """Interferometer monitor |1 + f|^2 with a unit reference arm."""
    return np.abs(1 + f) ** 2


def apply_drift(params: ModulatorParams, spec: DriftSpec) -> ModulatorParams:
    """Return a copy with the five calibrated parameters independently perturbed.

    Uniform draws lie in [-range, +range]; gaussian draws use sigma = range/3
    and are clipped to the same interval. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.distribution == 'uniform':
        deviations = rng.uniform(-spec.relative_range, spec.relative_range, len(DRIFTED_FIELDS))
    else:
        deviations = rng.normal(0.0, spec.relative_range / 3, len(DRIFTED_FIELDS))
        deviations = np.clip(deviations, -spec.relative_range, spec.relative_range)

    changes = {
        name: getattr(params, name) * (1.0 + float(deviation))
        for name, deviation in zip(DRIFTED_FIELDS, deviations)
    }
    return replace(params, **changes)


def apply_settings(true_plant: ModulatorParams, settings) -> ModulatorParams:
    """Effective plant seen when candidate settings drive a drifted plant.

    ``settings`` carries alpha_dc, beta_dc, gamma, alpha_sg and beta_sg. The
    drifted fields of ``true_plant`` are the settings that restore the ideal
    operating point, so matching them yields the nominal plant exactly.
    """
    ideal = true_plant.at_nominal()
    if settings.alpha_sg <= 0 or settings.beta_sg <= 0:
        raise InvalidInputError("Drive gains must stay positive")
    return replace(
        true_plant,
        alpha_dc=ideal.alpha_dc + (settings.alpha_dc - true_plant.alpha_dc),
        beta_dc=ideal.beta_dc + (settings.beta_dc - true_plant.beta_dc),
        gamma=ideal.gamma + (settings.gamma - true_plant.gamma),
        alpha_gain=settings.alpha_sg / true_plant.alpha_gain,
        beta_gain=settings.beta_sg / true_plant.beta_gain,
    )


def simulate_trace(params: ModulatorParams, w: ControlWaveform) -> MonitorTrace:
    """Drive the plant with a control waveform and record both monitors."""
    if len(w) == 0:
        raise InvalidInputError("Cannot simulate an empty control waveform")

    field = field_transfer_array(params, w.alpha_sig, w.beta_sig)
    theta_true = np.unwrap(np.angle(field))

    if len(theta_true) > 1:
        max_step = float(np.max(np.abs(np.diff(theta_true))))
        if max_step > 2 * np.pi / MIN_SAMPLES_PER_PERIOD * (1 + 1e-9):
            logger.warning(
                f"Trace sampled at ~{2 * np.pi / max_step:.1f} samples per control period "
                f"(< {MIN_SAMPLES_PER_PERIOD}); phase continuity is not guaranteed"
            )

    return MonitorTrace(
        t=np.array(w.t, dtype=float),
        m1=monitor_m1(field),
        m2=monitor_m2(field),
        theta_true=theta_true,
    )
