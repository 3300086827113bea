"""
Experiment commands module.

This module handles the four experiments of the command-line front end:
the ramp demonstration, a single calibration, the Monte-Carlo calibration
sweep and the synchronization loop. Each command writes its CSV tables,
a summary.json carrying the config hash and seed, and run.log into the
configured output directory.
"""

import os
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List

import numpy as np

from common.constants import SUMMARY_FILE, SETTLING_QUANTILES
from common.errors import ConfigValidationError, NumericFailureError, LoopInstabilityError
from common.logger import logger
from analysis.measurements import spectrum, harmonic_suppression, phase_slope, fold_traces
from control.calibration import (
    PARAM_NAMES, ParamVector, CalibrationReport, RiskEvaluator, calibrate,
    calibration_waveform, monte_carlo, run_seeds
)
from control.control_synthesis import linear_ramp_trajectory, synthesize_controls, control_frequency
from experiments.exporters import write_csv, write_json
from experiments.utils.config import ExperimentConfig
from plant.modulator_plant import apply_drift, simulate_trace
from sync.sync_loop import LoopTrace, LoopConfig, run_loop, loop_metrics


def _prepare_output(directory) -> Path:
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigValidationError(f"Cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ConfigValidationError(f"Output directory {path} is not writable")
    return path


@contextmanager
def _experiment_output(config: ExperimentConfig):
    """Create the output directory and mirror the log into its run.log."""
    out = _prepare_output(config.output_dir)
    logger.attach_run_log(out)
    logger.log_experiment_start(config.experiment, config.seed, config.config_hash())
    try:
        yield out
    finally:
        logger.detach_run_log()


def _provenance(config: ExperimentConfig) -> Dict:
    return {
        'experiment': config.experiment,
        'seed': config.seed,
        'config_hash': config.config_hash(),
    }


def cmd_ramp(config: ExperimentConfig) -> List[Path]:
    """Linear ramp demonstration: drive waveforms, monitors and phase slope."""
    settings = config.ramp
    plant = config.get_plant()
    trajectory = linear_ramp_trajectory(settings.f_con, settings.duration, settings.sample_rate)

    with _experiment_output(config) as out:
        waveform = synthesize_controls(trajectory, settings.r, plant.v_pi_i)
        trace = simulate_trace(plant, waveform)

        suppression = None
        if settings.f_con > 0 and len(trace) >= 16 and settings.f_con <= settings.sample_rate / 2:
            m2_spectrum = spectrum(trace.m2, settings.sample_rate, settings.window, remove_dc=True)
            suppression = harmonic_suppression(m2_spectrum, settings.f_con, settings.harmonics)

        many = len(trace) > 1
        summary = {
            **_provenance(config),
            'phase_slope': phase_slope(trace.theta_true, trace.t) if many else 0.0,
            'control_frequency': control_frequency(waveform) if many else 0.0,
            'final_phase': float(trace.theta_true[-1]),
            'magnitude_ripple': float(np.ptp(trace.m1)),
            'harmonic_suppression_db': suppression,
            'max_abs_alpha': float(np.max(np.abs(waveform.alpha_sig))),
            'max_abs_beta': float(np.max(np.abs(waveform.beta_sig))),
            'n_samples': len(trace),
        }

        paths = [
            write_csv(out / 'waveforms.csv', {
                't': waveform.t, 'alpha_sig': waveform.alpha_sig, 'beta_sig': waveform.beta_sig,
            }),
            write_csv(out / 'monitors.csv', {
                't': trace.t, 'm1': trace.m1, 'm2': trace.m2, 'theta_true': trace.theta_true,
            }),
            write_json(out / SUMMARY_FILE, summary),
        ]
        logger.info(f"Ramp: phase slope {summary['phase_slope']:.6e} rad/s over {len(trace)} samples")
        logger.log_files_written(paths)
    return paths


def _write_calibration(out: Path, config: ExperimentConfig, report: CalibrationReport,
                       evaluator: RiskEvaluator, init: ParamVector, complete: bool) -> List[Path]:
    epochs = np.arange(len(report.j_history))
    history = {'epoch': epochs}
    for name in PARAM_NAMES:
        history[name] = [getattr(pv, name) for pv in report.param_history]

    t = evaluator.waveform.t
    final = report.final_params
    summary = {
        **_provenance(config),
        'complete': complete,
        'initial_j': report.initial_j,
        'final_j': report.final_j,
        'converged': report.converged,
        'resets': report.resets,
        'reset_epochs': report.reset_epochs,
        'epochs_run': report.epochs_run,
        'm2_deviation_before': report.m2_deviation_before,
        'm2_deviation_after': report.m2_deviation_after,
        'final_params': final.as_dict(),
    }

    paths = [
        write_csv(out / 'j_history.csv', {'epoch': epochs, 'j': report.j_history}),
        write_csv(out / 'params_history.csv', history),
        write_csv(out / 'before_after_m1.csv', {
            't': t, 'predicted': evaluator.m1_predicted,
            'before': evaluator.m1(init), 'after': evaluator.m1(final),
        }),
        write_csv(out / 'before_after_m2.csv', {
            't': t, 'predicted': evaluator.m2_predicted,
            'before': evaluator.m2(init), 'after': evaluator.m2(final),
        }),
        write_json(out / 'true_params.json', ParamVector.from_plant(evaluator.true_plant).as_dict()),
        write_json(out / SUMMARY_FILE, summary),
    ]
    return paths


def cmd_calibrate(config: ExperimentConfig) -> List[Path]:
    """Drift the plant once with the master seed and calibrate it."""
    plant = config.get_plant()
    cfg = config.get_descent_config()
    true_plant = apply_drift(plant, config.get_drift_spec())
    waveform = calibration_waveform(plant.v_pi_i, config.descent.trace_length)
    init = ParamVector.nominal(plant)
    evaluator = RiskEvaluator(true_plant, waveform)

    with _experiment_output(config) as out:
        try:
            report = calibrate(true_plant, init, waveform, cfg)
        except NumericFailureError as e:
            if e.report is not None:
                logger.log_files_written(_write_calibration(out, config, e.report, evaluator, init, False))
            raise

        logger.info(
            f"Calibration: J {report.initial_j:.4e} -> {report.final_j:.4e} in {report.epochs_run} epochs, "
            f"{report.resets} resets, converged={report.converged}"
        )
        paths = _write_calibration(out, config, report, evaluator, init, True)
        logger.log_files_written(paths)
    return paths


def cmd_montecarlo(config: ExperimentConfig) -> List[Path]:
    """Calibrate many independently drifted plants and aggregate the outcome."""
    plant = config.get_plant()
    cfg = config.get_descent_config()
    n_runs = config.montecarlo.n_runs
    waveform = calibration_waveform(plant.v_pi_i, config.descent.trace_length)

    with _experiment_output(config) as out:
        result = monte_carlo(n_runs, config.get_drift_spec(), cfg, waveform, plant,
                             n_jobs=config.montecarlo.parallel)

        quantiles = result.j_quantiles()
        curves = result.settling_curves()
        failures = ~result.converged
        aggregate = {
            **_provenance(config),
            'n_runs': result.n_runs,
            'convergence_fraction': result.convergence_fraction,
            'final_j_quantiles': quantiles,
            'initial_j_median': float(np.median(result.initial_j)),
            'reset_histogram': result.reset_histogram(),
            'non_converged': int(np.sum(failures)),
            'non_converged_with_reset': int(np.sum(failures & (result.resets > 0))),
        }
        summary = {key: aggregate[key] for key in (
            'experiment', 'seed', 'config_hash', 'n_runs', 'convergence_fraction', 'final_j_quantiles'
        )}

        paths = [
            write_csv(out / 'runs.csv', {
                'run': np.arange(n_runs),
                'seed': run_seeds(cfg.seed, n_runs),
                'initial_j': result.initial_j,
                'final_j': result.final_j,
                'resets': result.resets,
                'converged': result.converged.astype(int),
                'epochs_run': result.epochs_run,
            }),
            write_csv(out / 'settling.csv', {
                'epoch': np.arange(len(curves)),
                **{label: curves[:, k] for k, label in enumerate(_quantile_labels())},
            }),
            write_json(out / 'aggregate.json', aggregate),
            write_json(out / SUMMARY_FILE, summary),
        ]
        logger.info(
            f"Monte Carlo: {100 * result.convergence_fraction:.1f}% of {n_runs} runs converged, "
            f"median final J {quantiles['p50']:.3e}"
        )
        logger.log_files_written(paths)
    return paths


def _quantile_labels() -> List[str]:
    return ['median' if q == 0.5 else f"p{int(round(100 * q))}" for q in SETTLING_QUANTILES]


def _write_loop(out: Path, loop_config: LoopConfig, trace: LoopTrace) -> Dict:
    """Write the loop tables and return the summary fields of this trace."""
    kp, ki = loop_config.filter_gains()
    fields = {
        'mode': trace.mode,
        'complete': trace.complete,
        'n_symbols': trace.n_symbols,
        'kp': kp,
        'ki': ki,
        'bandwidth_hz': loop_config.bandwidth_hz(),
    }
    if loop_config.offset.kind == 'ramp':
        fields['expected_v_pd_lf'] = loop_config.offset.rate / (2 * np.pi * loop_config.vco_gain)
    metrics = loop_metrics(trace) if trace.complete else None
    if metrics is not None:
        fields.update(asdict(metrics))

    sps = trace.samples_per_symbol
    write_csv(out / 'loop_trace.csv', {
        't': trace.t, 'phi_off': trace.phi_off, 'theta_eopd': trace.theta_eopd,
        'v_pd': trace.v_pd, 'v_pd_lf': trace.v_pd_lf, 'residual': trace.residual,
    })
    write_csv(out / 'controls.csv', {
        't': trace.t, 'theta_d': trace.theta_d, 'alpha_sig': trace.alpha_sig, 'beta_sig': trace.beta_sig,
    })
    i_sym, q_sym, phi_sym = trace.symbol_samples()
    write_csv(out / 'constellation.csv', {
        'symbol': np.arange(len(i_sym)), 'i': i_sym, 'q': q_sym, 'phi_m': phi_sym,
    })

    post = trace.post_lock_slice()
    folded = np.vstack([fold_traces(trace.i_out[post], sps), fold_traces(trace.q_out[post], sps)])
    n_traces = len(folded) // 2
    write_csv(out / 'eye.csv', {
        'trace': np.tile(np.arange(n_traces), 2),
        'component': ['i'] * n_traces + ['q'] * n_traces,
        **{f"s{k}": folded[:, k] for k in range(sps)},
    })

    if metrics is not None:
        logger.log_loop_lock(trace.mode, metrics.residual_rms, metrics.evm_percent)
    return fields


def _run_mode(out: Path, config: ExperimentConfig, loop_config: LoopConfig) -> Dict:
    """Run one loop mode and write it to ``out``; a diverged run leaves its partial trace there."""
    try:
        trace = run_loop(loop_config)
    except LoopInstabilityError as e:
        if e.trace is not None:
            fields = _write_loop(out, loop_config, e.trace)
            write_json(out / SUMMARY_FILE, {**_provenance(config), **fields})
            logger.warning(f"Partial loop trace written to {out}")
        raise
    fields = _write_loop(out, loop_config, trace)
    write_json(out / SUMMARY_FILE, {**_provenance(config), **fields})
    return fields


def cmd_syncloop(config: ExperimentConfig) -> List[Path]:
    """Run the synchronization loop; paired mode writes open/ and closed/ side by side.

    Paired runs share the seed, so both modes see the same symbols, offset
    and noise. Each mode is written as soon as it finishes.
    """
    loop_config = config.get_loop_config()

    with _experiment_output(config) as out:
        if loop_config.mode == 'paired':
            summary = {**_provenance(config), 'mode': 'paired', 'complete': False}
            for mode in ('open', 'closed'):
                try:
                    summary[mode] = _run_mode(_prepare_output(out / mode), config,
                                              replace(loop_config, mode=mode))
                except LoopInstabilityError:
                    write_json(out / SUMMARY_FILE, summary)
                    raise
            summary['complete'] = True
            write_json(out / SUMMARY_FILE, summary)
        else:
            _run_mode(out, config, loop_config)

        paths = sorted(p for p in out.rglob('*') if p.is_file())
        logger.log_files_written(paths)
    return paths


COMMANDS = {
    'ramp': cmd_ramp,
    'calibrate': cmd_calibrate,
    'montecarlo': cmd_montecarlo,
    'syncloop': cmd_syncloop,
}


def run_experiment(config: ExperimentConfig) -> List[Path]:
    """Dispatch to the command for the configured experiment kind."""
    return COMMANDS[config.experiment](config)
