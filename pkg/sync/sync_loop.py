"""
Synchronization loop module.

This module handles the carrier-phase synchronization loop of a self-homodyne
QPSK receiver in which the endless phase delay is the actuator: offset
processes, the message source, the receiver mixer, a QPSK Costas phase
detector, a PI loop filter and the time-stepped loop itself.

The loop is updated once per symbol. Inside a symbol the control signals
rotate at the frequency held from the previous update.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from common.constants import (
    DEFAULT_SYMBOL_RATE, DEFAULT_SAMPLES_PER_SYMBOL, DEFAULT_N_SYMBOLS,
    DEFAULT_DETECTOR_GAIN, DEFAULT_VCO_GAIN, DEFAULT_DAMPING, DEFAULT_RAMP_RATE,
    DEFAULT_SETTLE_FRACTION, DEFAULT_V_PI, NATURAL_FREQUENCY_DIVISOR,
    BANDWIDTH_LIMIT_DIVISOR, INSTABILITY_LIMIT, OFFSET_KINDS, LOOP_MODES, QPSK_PHASES
)
from common.errors import InvalidInputError, LoopInstabilityError
from common.logger import logger
from control.control_synthesis import control_voltages
from plant.modulator_plant import ModulatorParams, field_transfer_array
from analysis.measurements import evm, eye_metrics, residual_rms

MIN_SAMPLES_PER_SYMBOL = 4

# Stream indices under the loop's master seed
_SOURCE_STREAM, _OFFSET_STREAM, _NOISE_STREAM = range(3)


@dataclass(frozen=True)
class OffsetProcess:
    """Time-varying phase offset between signal and local oscillator.

    ramp: rate [rad/s]; random_walk: diffusion [rad^2/s];
    sinusoidal: amplitude [rad] and frequency [Hz].
    """
    kind: str = 'ramp'
    rate: float = DEFAULT_RAMP_RATE
    diffusion: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0

    def __post_init__(self):
        if self.kind not in OFFSET_KINDS:
            raise InvalidInputError(f"Unknown offset process '{self.kind}', expected one of {OFFSET_KINDS}")
        if not np.all(np.isfinite([self.rate, self.diffusion, self.amplitude, self.frequency])):
            raise InvalidInputError("Offset process parameters must be finite")
        if self.diffusion < 0:
            raise InvalidInputError(f"diffusion must be >= 0, got {self.diffusion}")
        if self.frequency < 0:
            raise InvalidInputError(f"frequency must be >= 0, got {self.frequency}")


@dataclass(frozen=True)
class LoopConfig:
    """Synchronization loop settings.

    When ``kp``/``ki`` are omitted they are designed from ``natural_frequency``
    (Hz, default symbol_rate/2000) and ``damping``.
    """
    symbol_rate: float = DEFAULT_SYMBOL_RATE
    samples_per_symbol: int = DEFAULT_SAMPLES_PER_SYMBOL
    n_symbols: int = DEFAULT_N_SYMBOLS
    offset: OffsetProcess = field(default_factory=OffsetProcess)
    detector_gain: float = DEFAULT_DETECTOR_GAIN
    kp: Optional[float] = None
    ki: Optional[float] = None
    natural_frequency: Optional[float] = None
    damping: float = DEFAULT_DAMPING
    vco_gain: float = DEFAULT_VCO_GAIN
    mode: str = 'closed'
    seed: int = 0
    plant: ModulatorParams = field(default_factory=ModulatorParams)
    r: float = 1.0
    v_pi: float = DEFAULT_V_PI
    noise_std: float = 0.0
    settle_fraction: float = DEFAULT_SETTLE_FRACTION

    def __post_init__(self):
        if self.samples_per_symbol < MIN_SAMPLES_PER_SYMBOL:
            raise InvalidInputError(
                f"samples_per_symbol must be >= {MIN_SAMPLES_PER_SYMBOL}, got {self.samples_per_symbol}"
            )
        if self.n_symbols < 1:
            raise InvalidInputError(f"n_symbols must be >= 1, got {self.n_symbols}")
        if not np.isfinite(self.symbol_rate) or self.symbol_rate <= 0:
            raise InvalidInputError(f"symbol_rate must be positive, got {self.symbol_rate}")
        gains = [self.detector_gain, self.vco_gain, self.damping]
        gains += [g for g in (self.kp, self.ki, self.natural_frequency) if g is not None]
        if not np.all(np.isfinite(gains)):
            raise InvalidInputError("Loop gains must be finite")
        if self.detector_gain <= 0 or self.vco_gain <= 0:
            raise InvalidInputError("detector_gain and vco_gain must be positive")
        if (self.kp is None) != (self.ki is None):
            raise InvalidInputError("kp and ki must be given together")
        if self.kp is not None and (self.kp < 0 or self.ki < 0):
            raise InvalidInputError("Loop filter gains must be >= 0")
        if self.natural_frequency is not None and self.natural_frequency <= 0:
            raise InvalidInputError("natural_frequency must be positive")
        if self.mode not in LOOP_MODES:
            raise InvalidInputError(f"Unknown loop mode '{self.mode}', expected one of {LOOP_MODES}")
        if not 0 < self.r <= 1:
            raise InvalidInputError(f"r must lie in (0, 1], got {self.r}")
        if not self.v_pi > 0:
            raise InvalidInputError(f"v_pi must be positive, got {self.v_pi}")
        if not self.noise_std >= 0:
            raise InvalidInputError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.settle_fraction < 1:
            raise InvalidInputError(f"settle_fraction must lie in [0, 1), got {self.settle_fraction}")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * self.samples_per_symbol

    @property
    def n_samples(self) -> int:
        return self.n_symbols * self.samples_per_symbol

    @property
    def post_lock_symbols(self) -> int:
        """Symbols left for metrics once the settling fraction is discarded."""
        return self.n_symbols - int(self.settle_fraction * self.n_symbols)

    def loop_gain(self) -> float:
        """Open-loop gain K = 2*pi*vco_gain*detector_gain*sqrt(2), in 1/s per unit filter gain."""
        return 2 * np.pi * self.vco_gain * self.detector_gain * np.sqrt(2.0)

    def filter_gains(self) -> Tuple[float, float]:
        """(kp, ki), designed when not given explicitly."""
        if self.kp is not None:
            return self.kp, self.ki
        fn = self.natural_frequency or self.symbol_rate / NATURAL_FREQUENCY_DIVISOR
        return design_loop_filter(fn, self.damping, self.detector_gain, self.vco_gain)

    def bandwidth_hz(self) -> float:
        """Closed-loop -3 dB bandwidth of the linearized loop."""
        kp, ki = self.filter_gains()
        k = self.loop_gain()
        omega_n = np.sqrt(k * ki)
        if omega_n == 0:
            return float(k * kp / (2 * np.pi))
        zeta = k * kp / (2 * omega_n)
        a = 1 + 2 * zeta ** 2
        return float(omega_n * np.sqrt(a + np.sqrt(a ** 2 + 1)) / (2 * np.pi))


@dataclass(frozen=True, eq=False)
class LoopTrace:
    """Per-sample loop time series.

    ``v_pd`` and ``v_pd_lf`` hold the per-symbol detector and filter outputs
    over the samples of that symbol. ``residual`` is phi_off + theta_eopd
    wrapped to (-pi/4, pi/4].
    """
    t: np.ndarray
    phi_off: np.ndarray
    theta_eopd: np.ndarray
    v_pd: np.ndarray
    v_pd_lf: np.ndarray
    i_out: np.ndarray
    q_out: np.ndarray
    residual: np.ndarray
    theta_d: np.ndarray
    alpha_sig: np.ndarray
    beta_sig: np.ndarray
    phi_m: np.ndarray
    symbol_rate: float
    samples_per_symbol: int
    mode: str
    settle_fraction: float = DEFAULT_SETTLE_FRACTION
    complete: bool = True

    def __len__(self):
        return len(self.t)

    @property
    def n_symbols(self) -> int:
        return len(self.t) // self.samples_per_symbol

    def post_lock_slice(self) -> slice:
        """Samples after the settling fraction, aligned to a symbol boundary."""
        return slice(int(self.settle_fraction * self.n_symbols) * self.samples_per_symbol, len(self.t))

    def symbol_samples(self, post_lock: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(i, q, phi_m) at the center sample of each symbol."""
        start = self.post_lock_slice().start if post_lock else 0
        centers = np.arange(start + self.samples_per_symbol // 2, len(self.t), self.samples_per_symbol)
        return self.i_out[centers], self.q_out[centers], self.phi_m[centers]


@dataclass(frozen=True)
class LoopMetrics:
    """Post-lock figures of merit of one loop run."""
    residual_rms: float
    evm_percent: float
    eye_opening: float
    v_pd_lf_mean: float
    theta_d_final: float
    max_abs_alpha: float
    max_abs_beta: float


def wrap_residual(residual) -> np.ndarray:
    """Map phases to the principal QPSK sector (-pi/4, pi/4]."""
    return np.pi / 4 - np.mod(np.pi / 4 - np.asarray(residual, dtype=float), np.pi / 2)


def _stream(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed).spawn(3)[index]


def qpsk_source(n_symbols: int, seed, samples_per_symbol: int = 1) -> np.ndarray:
    """Uniform i.i.d. QPSK message phases, each held for ``samples_per_symbol`` samples."""
    if n_symbols < 1:
        raise InvalidInputError(f"n_symbols must be >= 1, got {n_symbols}")
    if samples_per_symbol < 1:
        raise InvalidInputError(f"samples_per_symbol must be >= 1, got {samples_per_symbol}")
    rng = np.random.default_rng(seed)
    symbols = np.asarray(QPSK_PHASES)[rng.integers(0, len(QPSK_PHASES), n_symbols)]
    return np.repeat(symbols, samples_per_symbol)


def offset_process(config: LoopConfig) -> np.ndarray:
    """Phase offset phi_off at every sample of the run."""
    offset = config.offset
    t = np.arange(config.n_samples) / config.sample_rate

    if offset.kind == 'ramp':
        return offset.rate * t
    if offset.kind == 'sinusoidal':
        return offset.amplitude * np.sin(2 * np.pi * offset.frequency * t)

    # Wiener process starting at zero
    rng = np.random.default_rng(_stream(config.seed, _OFFSET_STREAM))
    steps = rng.normal(0.0, np.sqrt(offset.diffusion / config.sample_rate), config.n_samples - 1)
    return np.concatenate(([0.0], np.cumsum(steps)))


def receiver_mix(phi_m, phi_off, theta_eopd) -> Tuple[np.ndarray, np.ndarray]:
    """Baseband I/Q after the phase delay: cos and sin of phi_m + phi_off + theta."""
    phi_m = np.asarray(phi_m, dtype=float)
    phi_off = np.asarray(phi_off, dtype=float)
    theta_eopd = np.asarray(theta_eopd, dtype=float)
    if not (phi_m.shape == phi_off.shape == theta_eopd.shape):
        raise InvalidInputError("Receiver inputs must have equal lengths")
    total = phi_m + phi_off + theta_eopd
    return np.cos(total), np.sin(total)


def costas_error(i, q, detector_gain: float = DEFAULT_DETECTOR_GAIN) -> np.ndarray:
    """Per-sample QPSK Costas error: gain * (sign(i)*q - sign(q)*i)."""
    i = np.asarray(i, dtype=float)
    q = np.asarray(q, dtype=float)
    return detector_gain * (np.sign(i) * q - np.sign(q) * i)


def phase_detector(i, q, detector_gain: float = DEFAULT_DETECTOR_GAIN,
                   samples_per_symbol: int = 1) -> np.ndarray:
    """Costas error integrated and dumped once per symbol.

    Near each constellation point the output is detector_gain*sqrt(2)*sin(residual).
    """
    error = costas_error(i, q, detector_gain)
    n_symbols = len(error) // samples_per_symbol
    if n_symbols == 0:
        raise InvalidInputError("Phase detector needs at least one full symbol")
    return error[:n_symbols * samples_per_symbol].reshape(n_symbols, samples_per_symbol).mean(axis=1)


def design_loop_filter(natural_frequency: float, damping: float,
                       detector_gain: float, vco_gain: float) -> Tuple[float, float]:
    """PI gains (kp, ki) placing the type-II loop at the given natural frequency [Hz] and damping."""
    if natural_frequency <= 0 or damping <= 0:
        raise InvalidInputError("natural_frequency and damping must be positive")
    k = 2 * np.pi * vco_gain * detector_gain * np.sqrt(2.0)
    omega_n = 2 * np.pi * natural_frequency
    return 2 * damping * omega_n / k, omega_n ** 2 / k


def check_bandwidth(config: LoopConfig) -> bool:
    """Warn when the closed-loop bandwidth exceeds symbol_rate/10; True when within it."""
    bandwidth = config.bandwidth_hz()
    limit = config.symbol_rate / BANDWIDTH_LIMIT_DIVISOR
    if bandwidth > limit:
        logger.warning(f"Closed-loop bandwidth {bandwidth:.4g} Hz exceeds symbol_rate/10 = {limit:.4g} Hz")
        return False
    return True


def run_loop(config: LoopConfig) -> LoopTrace:
    """Simulate the loop symbol by symbol.

    Closed mode: the per-symbol detector output drives the PI filter, whose
    output sets the control-signal frequency vco_gain*V_pd,lf; the desired
    phase theta_d moves in the delay direction at that frequency and reaches
    the receiver only through the synthesized controls and the plant. Open
    mode freezes theta_d at zero while the detector and filter keep running.
    """
    if config.mode == 'paired':
        raise InvalidInputError("Paired mode runs through run_paired()")
    closed = config.mode == 'closed'
    if closed:
        check_bandwidth(config)

    sps = config.samples_per_symbol
    n = config.n_samples
    dt = 1.0 / config.sample_rate
    kp, ki = config.filter_gains()
    symbol_period = 1.0 / config.symbol_rate

    t = np.arange(n) * dt
    phi_m = qpsk_source(config.n_symbols, _stream(config.seed, _SOURCE_STREAM), sps)
    phi_off = offset_process(config)
    noise_rng = np.random.default_rng(_stream(config.seed, _NOISE_STREAM))

    theta_d = np.zeros(n)
    alpha_sig = np.zeros(n)
    beta_sig = np.zeros(n)
    theta_eopd = np.zeros(n)
    i_out = np.zeros(n)
    q_out = np.zeros(n)
    v_pd = np.zeros(n)
    v_pd_lf = np.zeros(n)

    integrator = 0.0
    filter_out = 0.0
    last_theta = 0.0
    last_eopd: Optional[float] = None
    ramp = np.arange(1, sps + 1)

    def trace_until(end: int, complete: bool) -> LoopTrace:
        return LoopTrace(
            t=t[:end], phi_off=phi_off[:end], theta_eopd=theta_eopd[:end],
            v_pd=v_pd[:end], v_pd_lf=v_pd_lf[:end], i_out=i_out[:end], q_out=q_out[:end],
            residual=wrap_residual(phi_off[:end] + theta_eopd[:end]),
            theta_d=theta_d[:end], alpha_sig=alpha_sig[:end], beta_sig=beta_sig[:end],
            phi_m=phi_m[:end], symbol_rate=config.symbol_rate, samples_per_symbol=sps,
            mode=config.mode, settle_fraction=config.settle_fraction, complete=complete,
        )

    for k in range(config.n_symbols):
        seg = slice(k * sps, (k + 1) * sps)

        if closed:
            frequency = config.vco_gain * filter_out
            theta_seg = last_theta - 2 * np.pi * frequency * dt * ramp
            last_theta = float(theta_seg[-1])
        else:
            theta_seg = np.zeros(sps)

        alpha, beta = control_voltages(theta_seg, config.r, config.v_pi)
        wrapped = np.angle(field_transfer_array(config.plant, alpha, beta))
        if last_eopd is None:
            eopd_seg = np.unwrap(wrapped)
        else:
            eopd_seg = np.unwrap(np.concatenate(([last_eopd], wrapped)))[1:]
        last_eopd = float(eopd_seg[-1])

        i_seg, q_seg = receiver_mix(phi_m[seg], phi_off[seg], eopd_seg)
        if config.noise_std > 0:
            i_seg = i_seg + noise_rng.normal(0.0, config.noise_std, sps)
            q_seg = q_seg + noise_rng.normal(0.0, config.noise_std, sps)

        detector_out = float(phase_detector(i_seg, q_seg, config.detector_gain, sps)[0])
        integrator += ki * detector_out * symbol_period
        filter_out = kp * detector_out + integrator

        theta_d[seg] = theta_seg
        alpha_sig[seg] = alpha
        beta_sig[seg] = beta
        theta_eopd[seg] = eopd_seg
        i_out[seg] = i_seg
        q_out[seg] = q_seg
        v_pd[seg] = detector_out
        v_pd_lf[seg] = filter_out

        if closed:
            drift = np.max(np.abs(phi_off[seg] + eopd_seg))
            if not np.isfinite(drift) or drift > INSTABILITY_LIMIT:
                raise LoopInstabilityError(
                    f"Loop diverged at symbol {k}: unwrapped residual {drift:.4g} rad exceeds {INSTABILITY_LIMIT:g}",
                    trace_until((k + 1) * sps, complete=False),
                )

    return trace_until(n, complete=True)


def run_paired(config: LoopConfig) -> Tuple[LoopTrace, LoopTrace]:
    """Open- and closed-loop runs sharing seed, source and offset."""
    return run_loop(replace(config, mode='open')), run_loop(replace(config, mode='closed'))


def loop_metrics(trace: LoopTrace) -> LoopMetrics:
    """Residual RMS, data-aided EVM and eye opening over the post-lock samples."""
    post = trace.post_lock_slice()
    i_sym, q_sym, phi_sym = trace.symbol_samples(post_lock=True)
    eye = eye_metrics(trace.i_out[post], 1.0 / trace.symbol_rate,
                      trace.symbol_rate * trace.samples_per_symbol)
    return LoopMetrics(
        residual_rms=residual_rms(trace.residual[post]),
        evm_percent=evm(i_sym, q_sym, reference=phi_sym),
        eye_opening=eye.eye_opening,
        v_pd_lf_mean=float(np.mean(trace.v_pd_lf[post])),
        theta_d_final=float(trace.theta_d[-1]),
        max_abs_alpha=float(np.max(np.abs(trace.alpha_sig))),
        max_abs_beta=float(np.max(np.abs(trace.beta_sig))),
    )
