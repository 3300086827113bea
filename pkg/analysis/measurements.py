"""
Measurements module.

This module handles the measurements used to validate the phase delay:
monitor spectra, harmonic suppression, phase-slope estimation, EVM and
eye-diagram statistics.
"""

from dataclasses import dataclass
from typing import Union, Sequence

import numpy as np
from scipy import signal

from common.constants import (
    MIN_SPECTRUM_LENGTH, MIN_EYE_SYMBOLS, WINDOWS, DB_FLOOR
)
from common.errors import InvalidInputError

# Main-lobe half width in bins searched around each harmonic
_PEAK_SEARCH_BINS = {'hann': 2, 'rect': 1}


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided magnitude spectrum normalized to its peak."""
    freq: np.ndarray
    mag_db: np.ndarray
    resolution: float
    window: str = 'hann'

    def bin_of(self, frequency: float) -> int:
        """Index of the bin nearest to ``frequency``."""
        return int(round(frequency / self.resolution))

    def peak_frequency(self) -> float:
        """Frequency of the 0 dB bin."""
        return float(self.freq[int(np.argmax(self.mag_db))])


@dataclass(frozen=True)
class EyeMetrics:
    """Center-instant eye statistics."""
    eye_opening: float
    evm_percent: float
    n_traces: int


def spectrum(samples, sample_rate: float, window: str = 'hann', remove_dc: bool = False) -> Spectrum:
    """Windowed DFT magnitude in dB relative to the largest bin."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 1 or len(samples) < MIN_SPECTRUM_LENGTH:
        raise InvalidInputError(f"Spectrum needs at least {MIN_SPECTRUM_LENGTH} samples")
    if window not in WINDOWS:
        raise InvalidInputError(f"Unknown window '{window}', expected one of {WINDOWS}")
    if sample_rate <= 0:
        raise InvalidInputError(f"sample_rate must be positive, got {sample_rate}")

    if remove_dc:
        samples = samples - np.mean(samples)

    taper = signal.get_window('hann' if window == 'hann' else 'boxcar', len(samples), fftbins=True)
    magnitude = np.abs(np.fft.rfft(samples * taper))
    peak = np.max(magnitude)
    if peak == 0:
        mag_db = np.zeros_like(magnitude)
    else:
        with np.errstate(divide='ignore'):
            mag_db = 20 * np.log10(magnitude / peak)
        mag_db = np.maximum(mag_db, DB_FLOOR)

    return Spectrum(
        freq=np.fft.rfftfreq(len(samples), d=1.0 / sample_rate),
        mag_db=mag_db,
        resolution=sample_rate / len(samples),
        window=window,
    )


def _level_near(s: Spectrum, frequency: float) -> float:
    center = s.bin_of(frequency)
    half_width = _PEAK_SEARCH_BINS[s.window]
    lo = max(center - half_width, 0)
    hi = min(center + half_width, len(s.mag_db) - 1)
    return float(np.max(s.mag_db[lo:hi + 1]))


def harmonic_suppression(s: Spectrum, f0: float, n: int = 5) -> float:
    """Fundamental level minus the strongest of harmonics 2*f0..n*f0, in dB.

    Harmonics above the Nyquist edge are ignored; if none remain the result
    is infinite.
    """
    f_max = float(s.freq[-1])
    if not (0 < f0 <= f_max):
        raise InvalidInputError(f"f0={f0:.4g} Hz is outside the spectrum range (0, {f_max:.4g}]")
    if n < 2:
        raise InvalidInputError(f"Need at least the second harmonic, got n={n}")

    fundamental = _level_near(s, f0)
    harmonics = [_level_near(s, k * f0) for k in range(2, n + 1) if k * f0 <= f_max]
    if not harmonics:
        return float('inf')
    return fundamental - max(harmonics)


def phase_slope(theta, t) -> float:
    """Least-squares slope of the unwrapped phase, in rad/s."""
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    if len(theta) < 2 or theta.shape != t.shape:
        raise InvalidInputError("Phase slope needs at least two equal-length samples")
    if np.ptp(t) == 0:
        raise InvalidInputError("Degenerate time base: all time stamps are equal")
    unwrapped = np.unwrap(theta)
    return float(np.polyfit(t - t[0], unwrapped, 1)[0])


def _nearest_qpsk(points: np.ndarray) -> np.ndarray:
    # QPSK points sit at pi/4 + k*pi/2
    sector = np.round((np.angle(points) - np.pi / 4) / (np.pi / 2))
    return np.exp(1j * (np.pi / 4 + sector * np.pi / 2))


def evm(i, q, reference: Union[str, Sequence[float]] = 'qpsk') -> float:
    """RMS error vector magnitude in percent of the unit constellation radius.

    ``reference='qpsk'`` compares each point with its nearest ideal point.
    An array of transmitted symbol phases gives the data-aided figure, with
    the QPSK quarter-turn ambiguity resolved by the best global rotation.
    """
    points = np.asarray(i, dtype=float) + 1j * np.asarray(q, dtype=float)
    if points.size == 0:
        raise InvalidInputError("EVM needs at least one point")

    if isinstance(reference, str):
        if reference != 'qpsk':
            raise InvalidInputError(f"Unknown constellation reference '{reference}'")
        error_power = np.mean(np.abs(points - _nearest_qpsk(points)) ** 2)
    else:
        ideal = np.exp(1j * np.asarray(reference, dtype=float))
        if ideal.shape != points.shape:
            raise InvalidInputError("Reference symbols must match the received points")
        error_power = min(
            np.mean(np.abs(points * np.exp(-1j * k * np.pi / 2) - ideal) ** 2)
            for k in range(4)
        )
    return float(100.0 * np.sqrt(error_power))


def eye_metrics(waveform, symbol_period: float, sample_rate: float, quadrature=None) -> EyeMetrics:
    """Fold a symbol-synchronous waveform and measure the eye at the center instant.

    The opening is (lowest upper-rail sample - highest lower-rail sample)
    divided by the separation of the rail means, clamped to [0, 1]. When the
    quadrature waveform is given, the EVM of the center samples is reported.
    """
    waveform = np.asarray(waveform, dtype=float)
    sps = int(round(symbol_period * sample_rate))
    if sps < 1:
        raise InvalidInputError("Symbol period is shorter than one sample")
    n_traces = len(waveform) // sps
    if n_traces < MIN_EYE_SYMBOLS:
        raise InvalidInputError(f"Eye metrics need at least {MIN_EYE_SYMBOLS} symbol periods, got {n_traces}")

    folded = fold_traces(waveform, sps)
    center = folded[:, sps // 2]
    threshold = 0.5 * (np.max(center) + np.min(center))
    upper = center[center > threshold]
    lower = center[center <= threshold]

    if len(upper) == 0 or len(lower) == 0:
        opening = 0.0
    else:
        separation = np.mean(upper) - np.mean(lower)
        opening = 0.0 if separation <= 0 else (np.min(upper) - np.max(lower)) / separation
    opening = float(np.clip(opening, 0.0, 1.0))

    evm_percent = 0.0
    if quadrature is not None:
        quadrature = fold_traces(quadrature, sps)
        evm_percent = evm(center, quadrature[:, sps // 2])

    return EyeMetrics(eye_opening=opening, evm_percent=evm_percent, n_traces=n_traces)


def fold_traces(waveform, samples_per_symbol: int) -> np.ndarray:
    """Reshape a waveform into one row per symbol period."""
    waveform = np.asarray(waveform, dtype=float)
    n_traces = len(waveform) // samples_per_symbol
    return waveform[:n_traces * samples_per_symbol].reshape(n_traces, samples_per_symbol)


def residual_rms(residual) -> float:
    """Root-mean-square of a residual phase sequence."""
    residual = np.asarray(residual, dtype=float)
    if residual.size == 0:
        raise InvalidInputError("Residual is empty")
    return float(np.sqrt(np.mean(residual ** 2)))
