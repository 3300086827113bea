"""
Calibration module.

This module handles bias and drive-gain calibration of the phase delay: an
iterative multivariate gradient descent on the mean-square mismatch between
the measured and predicted magnitude monitor, with parameter reset when the
risk crosses a threshold, plus a Monte-Carlo harness over random drifts.
"""

from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed

from common.constants import (
    DEFAULT_MU, DEFAULT_EPOCHS, DEFAULT_GATE, DEFAULT_RESET_THRESHOLD,
    CONVERGENCE_THRESHOLD, FD_STEP_VOLTAGE_FRACTION, DEFAULT_TRACE_LENGTH,
    DEFAULT_F_CON, DEFAULT_SAMPLE_RATE, DEFAULT_V_PI, UPDATE_ORDER, SETTLING_QUANTILES
)
from common.errors import InvalidInputError, NumericFailureError
from common.logger import logger
from control.control_synthesis import ControlWaveform, PhaseTrajectory, synthesize_controls
from plant.modulator_plant import (
    ModulatorParams, DriftSpec, drive_field, field_transfer_array, monitor_m1, monitor_m2,
    apply_drift, apply_settings
)

PARAM_NAMES = ('alpha_dc', 'beta_dc', 'gamma', 'alpha_sg', 'beta_sg')


@dataclass(frozen=True)
class ParamVector:
    """The five quantities tuned by the descent: three biases and two drive gains."""
    alpha_dc: float
    beta_dc: float
    gamma: float
    alpha_sg: float = 1.0
    beta_sg: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise InvalidInputError(f"Parameter vector must be finite: {self}")
        if self.alpha_sg <= 0 or self.beta_sg <= 0:
            raise InvalidInputError(f"Drive gains must be positive: {self}")

    @classmethod
    def nominal(cls, plant: ModulatorParams) -> 'ParamVector':
        """Settings that would be ideal for an undrifted plant."""
        ideal = plant.at_nominal()
        return cls(alpha_dc=ideal.alpha_dc, beta_dc=ideal.beta_dc, gamma=ideal.gamma)

    @classmethod
    def from_plant(cls, plant: ModulatorParams) -> 'ParamVector':
        """Settings that exactly compensate a (possibly drifted) plant."""
        return cls(alpha_dc=plant.alpha_dc, beta_dc=plant.beta_dc, gamma=plant.gamma,
                   alpha_sg=plant.alpha_gain, beta_sg=plant.beta_gain)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class ParamGradient:
    """Partial derivatives of the risk with respect to each tuned quantity."""
    alpha_dc: float
    beta_dc: float
    gamma: float
    alpha_sg: float
    beta_sg: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)


@dataclass(frozen=True)
class DescentConfig:
    """Gradient-descent settings.

    ``fd_step`` is relative: V_pi * fd_step for voltages, fd_step for gains.
    ``seed`` is the master seed of Monte-Carlo sweeps.
    """
    mu: float = DEFAULT_MU
    epochs: int = DEFAULT_EPOCHS
    gate: float = DEFAULT_GATE
    reset_threshold: float = DEFAULT_RESET_THRESHOLD
    fd_step: float = FD_STEP_VOLTAGE_FRACTION
    seed: int = 0
    early_stop: bool = True
    convergence_threshold: float = CONVERGENCE_THRESHOLD

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidInputError(f"mu must be positive, got {self.mu}")
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.gate < 0:
            raise InvalidInputError(f"gate must be >= 0, got {self.gate}")
        if not self.reset_threshold > self.gate:
            raise InvalidInputError("reset_threshold must exceed the gate")
        if not self.fd_step > 0:
            raise InvalidInputError(f"fd_step must be positive, got {self.fd_step}")


@dataclass
class CalibrationReport:
    """History of one calibration run.

    ``param_history[k]`` is the state carried out of entry ``k``: the state
    that produced ``j_history[k]``, or the nominal state after a reset.
    """
    j_history: List[float]
    param_history: List[ParamVector]
    resets: int
    converged: bool
    final_j: float
    reset_epochs: List[int] = field(default_factory=list)
    epochs_run: int = 0
    m2_deviation_before: float = float('nan')
    m2_deviation_after: float = float('nan')

    @property
    def initial_j(self) -> float:
        return self.j_history[0]

    @property
    def final_params(self) -> ParamVector:
        return self.param_history[-1]


def calibration_waveform(v_pi: float = DEFAULT_V_PI, n_samples: int = DEFAULT_TRACE_LENGTH,
                         f_con: float = DEFAULT_F_CON, sample_rate: float = DEFAULT_SAMPLE_RATE,
                         r: float = 1.0) -> ControlWaveform:
    """Ideal ramp drive of ``n_samples`` samples used as the calibration stimulus."""
    if n_samples < 2:
        raise InvalidInputError(f"Calibration trace needs at least 2 samples, got {n_samples}")
    t = np.arange(n_samples) / sample_rate
    return synthesize_controls(PhaseTrajectory(t=t, theta_d=2 * np.pi * f_con * t), r, v_pi)


def predicted_m1(waveform: ControlWaveform) -> np.ndarray:
    """Magnitude monitor of the ideal plant driven by ``waveform``."""
    ideal = ModulatorParams.nominal(waveform.v_pi_ref)
    return monitor_m1(field_transfer_array(ideal, waveform.alpha_sig, waveform.beta_sig))


def risk(m1_actual, m1_predicted) -> float:
    """Mean squared difference between actual and predicted magnitude monitors."""
    m1_actual = np.asarray(m1_actual, dtype=float)
    m1_predicted = np.asarray(m1_predicted, dtype=float)
    if m1_actual.size == 0 or m1_actual.shape != m1_predicted.shape:
        raise InvalidInputError(
            f"Risk needs equal non-empty sequences, got {m1_actual.shape} and {m1_predicted.shape}"
        )
    return float(np.mean((m1_actual - m1_predicted) ** 2))


class RiskEvaluator:
    """Plant evaluator: applies candidate settings to a drifted plant and scores M1.

    ``risk_at`` takes the settings as an array in PARAM_NAMES order and skips
    the dataclass round trip; the descent calls it for every candidate.
    """

    def __init__(self, true_plant: ModulatorParams, waveform: ControlWaveform):
        self.true_plant = true_plant
        self.waveform = waveform
        self.m1_predicted = predicted_m1(waveform)
        self.m2_predicted = monitor_m2(
            field_transfer_array(ModulatorParams.nominal(waveform.v_pi_ref),
                                 waveform.alpha_sig, waveform.beta_sig)
        )
        # Natural unit of each tuned quantity
        self.scales = {
            'alpha_dc': true_plant.v_pi_i,
            'beta_dc': true_plant.v_pi_q,
            'gamma': true_plant.v_pi_pm,
            'alpha_sg': 1.0,
            'beta_sg': 1.0,
        }
        ideal = true_plant.at_nominal()
        self._ideal_biases = np.array([ideal.alpha_dc, ideal.beta_dc, ideal.gamma])
        self._truth = np.array([true_plant.alpha_dc, true_plant.beta_dc, true_plant.gamma,
                                true_plant.alpha_gain, true_plant.beta_gain])

    def field(self, pv: ParamVector) -> np.ndarray:
        effective = apply_settings(self.true_plant, pv)
        return field_transfer_array(effective, self.waveform.alpha_sig, self.waveform.beta_sig)

    def field_at(self, values: np.ndarray) -> np.ndarray:
        """Field for settings in PARAM_NAMES order, same offsets as apply_settings."""
        biases = self._ideal_biases + (values[:3] - self._truth[:3])
        gains = values[3:] / self._truth[3:]
        return drive_field(self.true_plant, self.waveform.alpha_sig, self.waveform.beta_sig, biases, gains)

    def m1(self, pv: ParamVector) -> np.ndarray:
        return monitor_m1(self.field(pv))

    def m2(self, pv: ParamVector) -> np.ndarray:
        return monitor_m2(self.field(pv))

    def m2_deviation(self, pv: ParamVector) -> float:
        """RMS difference between actual and predicted interferometer monitor."""
        return float(np.sqrt(np.mean((self.m2(pv) - self.m2_predicted) ** 2)))

    def risk_at(self, values: np.ndarray) -> float:
        return risk(monitor_m1(self.field_at(values)), self.m1_predicted)

    def __call__(self, pv: ParamVector) -> float:
        return self.risk_at(pv.as_array())


def _step_size(name: str, evaluator: RiskEvaluator, cfg: DescentConfig) -> float:
    return cfg.fd_step * evaluator.scales[name]


def _central_difference(evaluator: RiskEvaluator, values: np.ndarray, index: int, h: float) -> float:
    shifted = values.copy()
    shifted[index] = values[index] + h
    j_plus = evaluator.risk_at(shifted)
    shifted[index] = values[index] - h
    j_minus = evaluator.risk_at(shifted)
    return (j_plus - j_minus) / (2 * h)


def partial_derivative(pv: ParamVector, name: str, evaluator: RiskEvaluator,
                       cfg: DescentConfig, step: Optional[float] = None) -> float:
    """Central finite difference of J along one parameter, others held fixed."""
    h = _step_size(name, evaluator, cfg) if step is None else step
    return _central_difference(evaluator, pv.as_array(), PARAM_NAMES.index(name), h)


def gradient(pv: ParamVector, evaluator: RiskEvaluator, cfg: DescentConfig) -> ParamGradient:
    """Central finite-difference estimate of the risk gradient at ``pv``.

    The evaluator carries the plant and the drive waveform.
    """
    return ParamGradient(**{
        name: partial_derivative(pv, name, evaluator, cfg) for name in PARAM_NAMES
    })


def risk_hessian(pv: ParamVector, evaluator: RiskEvaluator, cfg: DescentConfig) -> np.ndarray:
    """Finite-difference Hessian of J in units of each parameter's natural scale."""
    steps = np.array([_step_size(name, evaluator, cfg) for name in PARAM_NAMES])
    units = np.array([evaluator.scales[name] for name in PARAM_NAMES])
    base = pv.as_array()

    def j_at(offsets: np.ndarray) -> float:
        return evaluator.risk_at(base + offsets)

    n = len(PARAM_NAMES)
    hessian = np.zeros((n, n))
    j0 = j_at(np.zeros(n))
    for a in range(n):
        ea = np.eye(n)[a] * steps[a]
        hessian[a, a] = (j_at(ea) - 2 * j0 + j_at(-ea)) / steps[a] ** 2
        for b in range(a + 1, n):
            eb = np.eye(n)[b] * steps[b]
            mixed = (j_at(ea + eb) - j_at(ea - eb) - j_at(-ea + eb) + j_at(-ea - eb)) / (4 * steps[a] * steps[b])
            hessian[a, b] = hessian[b, a] = mixed
    return hessian * np.outer(units, units)


def is_locally_convex(pv: ParamVector, evaluator: RiskEvaluator, cfg: DescentConfig,
                      tol: float = 1e-9) -> bool:
    """True when the Hessian at ``pv`` has no eigenvalue below ``-tol``."""
    return bool(np.min(np.linalg.eigvalsh(risk_hessian(pv, evaluator, cfg))) >= -tol)


def calibrate(true_plant: ModulatorParams, init: ParamVector, waveform: ControlWaveform,
              cfg: DescentConfig = DescentConfig()) -> CalibrationReport:
    """Recover the five settings of a drifted plant by sequential gradient descent.

    Each epoch updates gamma, beta_sg, beta_dc, alpha_sg and alpha_dc in that
    order, each with a fresh gradient at the latest values, using
    p <- p - mu * scale**2 * dJ/dp. When J crosses the reset threshold the
    settings return to nominal and the descent continues.
    """
    evaluator = RiskEvaluator(true_plant, waveform)
    nominal = ParamVector.nominal(true_plant)

    pv = init
    j = evaluator(pv)
    j_history = [j]
    param_history = [pv]
    reset_epochs: List[int] = []
    m2_before = evaluator.m2_deviation(init)

    def report_so_far(epochs_run: int) -> CalibrationReport:
        final_j = j_history[-1]
        return CalibrationReport(
            j_history=list(j_history),
            param_history=list(param_history),
            resets=len(reset_epochs),
            converged=bool(np.isfinite(final_j) and final_j < cfg.convergence_threshold),
            final_j=final_j,
            reset_epochs=list(reset_epochs),
            epochs_run=epochs_run,
            m2_deviation_before=m2_before,
            m2_deviation_after=evaluator.m2_deviation(param_history[-1]),
        )

    if not np.isfinite(j):
        raise NumericFailureError(f"Initial risk is not finite: {j}", report_so_far(0))

    logger.log_calibration_start(j, cfg.gate)
    epochs_run = 0

    if j > cfg.gate:
        order = [PARAM_NAMES.index(name) for name in UPDATE_ORDER]
        scales = np.array([evaluator.scales[name] for name in PARAM_NAMES])
        steps = cfg.fd_step * scales
        values = pv.as_array()
        for epoch in range(1, cfg.epochs + 1):
            epochs_run = epoch
            diverged = False
            for index in order:
                slope = _central_difference(evaluator, values, index, steps[index])
                if not np.isfinite(slope):
                    raise NumericFailureError(
                        f"Gradient along {PARAM_NAMES[index]} is not finite at epoch {epoch}",
                        report_so_far(epoch - 1)
                    )
                updated = values[index] - cfg.mu * scales[index] ** 2 * slope
                if PARAM_NAMES[index].endswith('_sg') and updated <= 0:
                    diverged = True
                    break
                values[index] = updated

            j = evaluator.risk_at(values)
            if not np.isfinite(j):
                j_history.append(j)
                param_history.append(ParamVector(*values))
                raise NumericFailureError(f"Risk became non-finite at epoch {epoch}", report_so_far(epoch))

            logger.log_calibration_epoch(epoch, j)
            if diverged or j > cfg.reset_threshold:
                logger.log_reset(epoch, j, cfg.reset_threshold)
                values = nominal.as_array()
                reset_epochs.append(epoch)
            pv = ParamVector(*values)

            j_history.append(j)
            param_history.append(pv)

            if cfg.early_stop and j <= cfg.gate:
                break

    report = report_so_far(epochs_run)
    logger.log_calibration_done(report.final_j, epochs_run, report.resets, report.converged)
    return report


@dataclass
class MonteCarloSummary:
    """Aggregate of independent calibrations over random drifts."""
    initial_j: np.ndarray
    final_j: np.ndarray
    resets: np.ndarray
    converged: np.ndarray
    epochs_run: np.ndarray
    j_histories: List[np.ndarray]

    @property
    def n_runs(self) -> int:
        return len(self.final_j)

    @property
    def convergence_fraction(self) -> float:
        return float(np.mean(self.converged))

    def j_quantiles(self, quantiles=SETTLING_QUANTILES) -> Dict[str, float]:
        return {f"p{int(round(100 * q))}": float(np.quantile(self.final_j, q)) for q in quantiles}

    def reset_histogram(self) -> Dict[int, int]:
        counts, occurrences = np.unique(self.resets, return_counts=True)
        return {int(c): int(n) for c, n in zip(counts, occurrences)}

    def settling_curves(self, quantiles=SETTLING_QUANTILES) -> np.ndarray:
        """Per-epoch J quantiles across runs; finished runs hold their final J.

        Returns an array of shape (epochs, len(quantiles)).
        """
        length = max(len(h) for h in self.j_histories)
        padded = np.array([np.pad(h, (0, length - len(h)), mode='edge') for h in self.j_histories])
        return np.quantile(padded, quantiles, axis=0).T


def _calibrate_drifted(plant: ModulatorParams, drift: DriftSpec, waveform: ControlWaveform,
                       cfg: DescentConfig) -> CalibrationReport:
    true_plant = apply_drift(plant, drift)
    return calibrate(true_plant, ParamVector.nominal(plant), waveform, cfg)


def run_seeds(master_seed: int, n_runs: int) -> List[int]:
    """Independent per-run drift seeds derived from a master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n_runs)
    return [int(child.generate_state(1)[0]) for child in children]


def monte_carlo(n_runs: int, spec: DriftSpec, cfg: DescentConfig = DescentConfig(),
                waveform: Optional[ControlWaveform] = None,
                plant: Optional[ModulatorParams] = None, n_jobs: int = 1) -> MonteCarloSummary:
    """Calibrate ``n_runs`` freshly drifted plants.

    Run ``k`` drifts with seed ``run_seeds(cfg.seed, n_runs)[k]``; the
    drift spec's own seed is not used. Results are ordered by run index regardless
    of ``n_jobs``.
    """
    if n_runs < 1:
        raise InvalidInputError(f"n_runs must be >= 1, got {n_runs}")
    plant = plant if plant is not None else ModulatorParams.nominal()
    waveform = waveform if waveform is not None else calibration_waveform(plant.v_pi_i)

    drifts = [replace(spec, seed=seed) for seed in run_seeds(cfg.seed, n_runs)]
    if n_jobs == 1:
        reports = []
        for index, drift in enumerate(drifts, start=1):
            reports.append(_calibrate_drifted(plant, drift, waveform, cfg))
            if index % max(n_runs // 10, 1) == 0:
                logger.log_monte_carlo_progress(index, n_runs)
    else:
        reports = Parallel(n_jobs=n_jobs)(
            delayed(_calibrate_drifted)(plant, drift, waveform, cfg) for drift in drifts
        )
        logger.log_monte_carlo_progress(n_runs, n_runs)

    return MonteCarloSummary(
        initial_j=np.array([r.initial_j for r in reports]),
        final_j=np.array([r.final_j for r in reports]),
        resets=np.array([r.resets for r in reports], dtype=int),
        converged=np.array([r.converged for r in reports], dtype=bool),
        epochs_run=np.array([r.epochs_run for r in reports], dtype=int),
        j_histories=[np.array(r.j_history) for r in reports],
    )
