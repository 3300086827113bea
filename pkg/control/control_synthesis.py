"""
Control synthesis module.

This module turns a continuous desired-phase trajectory into the two bounded
drive waveforms of the phase delay and recovers the delivered phase from them.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from common.constants import (
    MIN_SAMPLES_PER_PERIOD, MAX_CONTROL_STEP_FRACTION
)
from common.errors import InvalidInputError, DegenerateInputError
from common.logger import logger
from analysis.measurements import phase_slope


@dataclass(frozen=True, eq=False)
class PhaseTrajectory:
    """Desired phase theta_d(t), unbounded and continuous."""
    t: np.ndarray
    theta_d: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        theta = np.asarray(self.theta_d, dtype=float)
        if t.shape != theta.shape or t.ndim != 1:
            raise InvalidInputError("Trajectory time base and phase must be 1-D and equal length")
        if len(theta) > 1 and np.max(np.abs(np.diff(theta))) > np.pi:
            raise InvalidInputError("Trajectory steps must not exceed pi between samples")
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'theta_d', theta)

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_samples(cls, theta_d, sample_rate: float, t0: float = 0.0) -> 'PhaseTrajectory':
        """Trajectory on a uniform grid starting at ``t0``."""
        if not np.isfinite(sample_rate) or sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {sample_rate}")
        theta_d = np.asarray(theta_d, dtype=float)
        return cls(t=t0 + np.arange(len(theta_d)) / sample_rate, theta_d=theta_d)


@dataclass(frozen=True, eq=False)
class ControlWaveform:
    """Uniformly sampled pair of drive voltages and the synthesis assumptions."""
    t: np.ndarray
    alpha_sig: np.ndarray
    beta_sig: np.ndarray
    v_pi_ref: float
    r: float = 1.0

    def __post_init__(self):
        for name in ('t', 'alpha_sig', 'beta_sig'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.t.shape == self.alpha_sig.shape == self.beta_sig.shape):
            raise InvalidInputError("Waveform arrays must have equal lengths")
        if self.v_pi_ref <= 0:
            raise InvalidInputError(f"v_pi_ref must be positive, got {self.v_pi_ref}")

    def __len__(self):
        return len(self.t)


def _check_radius(r: float):
    if not np.isfinite(r) or r > 1:
        raise InvalidInputError(f"Target radius must lie in (0, 1], got {r}")
    if r <= 0:
        raise DegenerateInputError(f"Target radius must lie in (0, 1], got {r}")


def control_voltages(theta, r: float, v_pi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Principal-branch drive voltages for desired phases ``theta``."""
    theta = np.asarray(theta, dtype=float)
    scale = 2 * v_pi / np.pi
    alpha = scale * np.arcsin(np.clip(r * np.cos(theta), -1.0, 1.0))
    beta = scale * np.arcsin(np.clip(r * np.sin(theta), -1.0, 1.0))
    return alpha, beta


def synthesize_controls(traj: PhaseTrajectory, r: float, v_pi: float) -> ControlWaveform:
    """Drive waveforms satisfying the magnitude and phase conditions.

    sin(pi*alpha/2V_pi) = r*cos(theta_d) and sin(pi*beta/2V_pi) = r*sin(theta_d),
    so the squared sines add up to r**2. For r = 1 and a linear ramp both
    waveforms are triangular with peak-to-peak 2*V_pi.
    """
    _check_radius(r)
    if not np.isfinite(v_pi) or v_pi <= 0:
        raise InvalidInputError(f"v_pi must be positive, got {v_pi}")

    alpha, beta = control_voltages(traj.theta_d, r, v_pi)

    if len(alpha) > 1:
        max_step = max(np.max(np.abs(np.diff(alpha))), np.max(np.abs(np.diff(beta))))
        if max_step > MAX_CONTROL_STEP_FRACTION * v_pi:
            logger.warning(f"Control waveform step {max_step:.3f} V exceeds V_pi/4; trajectory is undersampled")

    return ControlWaveform(t=traj.t, alpha_sig=alpha, beta_sig=beta, v_pi_ref=v_pi, r=r)


def linear_ramp_trajectory(f_con: float, duration: float, sample_rate: float) -> PhaseTrajectory:
    """theta_d(t) = 2*pi*f_con*t on a uniform grid that ends exactly at ``duration``."""
    if not np.isfinite(sample_rate) or sample_rate <= 0:
        raise InvalidInputError(f"sample_rate must be positive, got {sample_rate}")
    if not np.isfinite(duration) or duration < 0:
        raise InvalidInputError(f"duration must be non-negative, got {duration}")
    if not np.isfinite(f_con):
        raise InvalidInputError("f_con must be finite")
    if sample_rate < MIN_SAMPLES_PER_PERIOD * abs(f_con):
        raise InvalidInputError(
            f"sample_rate {sample_rate:.4g} Hz is below {MIN_SAMPLES_PER_PERIOD} samples "
            f"per control period at f_con={f_con:.4g} Hz"
        )

    n_samples = int(round(duration * sample_rate)) + 1
    t = np.arange(n_samples) / sample_rate
    return PhaseTrajectory(t=t, theta_d=2 * np.pi * f_con * t)


def unwrap_phase(wrapped) -> np.ndarray:
    """Add multiples of 2*pi so that no adjacent step exceeds pi."""
    wrapped = np.asarray(wrapped, dtype=float)
    if wrapped.size == 0:
        raise InvalidInputError("Cannot unwrap an empty phase sequence")
    return np.unwrap(wrapped)


def eopd_phase(w: ControlWaveform) -> np.ndarray:
    """Phase delivered by the ideal plant for a control waveform, unwrapped."""
    in_phase = np.sin(np.pi * w.alpha_sig / (2 * w.v_pi_ref))
    quadrature = np.sin(np.pi * w.beta_sig / (2 * w.v_pi_ref))
    if np.any((in_phase == 0) & (quadrature == 0)):
        raise DegenerateInputError("Both arms are at null: the output phase is undefined")
    return unwrap_phase(np.arctan2(quadrature, in_phase))


def control_frequency(w: ControlWaveform) -> float:
    """Control-signal frequency estimated from the delivered phase slope."""
    theta = eopd_phase(w)
    if len(theta) < 2:
        return 0.0
    return phase_slope(theta, w.t) / (2 * np.pi)
