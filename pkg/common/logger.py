"""
Simulation logging module.

This module handles logging for the plant, calibration, loop and experiment
code, plus the optional per-run log file written next to experiment outputs.
"""

import logging
from pathlib import Path
from typing import Iterable, Optional

from common.constants import RUN_LOG_FILE


class SimulationLogger:
    """Simulation logging class."""

    def __init__(self, log_level: int = logging.INFO):
        self.logger = logging.getLogger('eopd_simulation')
        self.logger.setLevel(log_level)
        self.logger.propagate = False

        # Remove existing handlers
        for handler in self.logger.handlers[:]:
            self.logger.removeHandler(handler)

        self.formatter = logging.Formatter(
            '%(asctime)s [%(levelname)s] %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        console_handler.setFormatter(self.formatter)
        self.logger.addHandler(console_handler)

        self.run_log_handler: Optional[logging.FileHandler] = None

    def set_level(self, log_level: int):
        """Change the level of the logger and all its handlers."""
        self.logger.setLevel(log_level)
        for handler in self.logger.handlers:
            handler.setLevel(log_level)

    def info(self, message: str):
        """Log info message."""
        self.logger.info(message)

    def error(self, message: str):
        """Log error message."""
        self.logger.error(message)

    def warning(self, message: str):
        """Log warning message."""
        self.logger.warning(message)

    def debug(self, message: str):
        """Log debug message."""
        self.logger.debug(message)

    def attach_run_log(self, directory) -> Path:
        """Write a copy of every record to run.log inside ``directory``."""
        self.detach_run_log()
        path = Path(directory) / RUN_LOG_FILE
        handler = logging.FileHandler(path, mode='w', encoding='utf-8')
        handler.setLevel(self.logger.level)
        handler.setFormatter(self.formatter)
        self.logger.addHandler(handler)
        self.run_log_handler = handler
        return path

    def detach_run_log(self):
        """Close the run log file, if one is attached."""
        if self.run_log_handler is not None:
            self.logger.removeHandler(self.run_log_handler)
            self.run_log_handler.close()
            self.run_log_handler = None

    def log_experiment_start(self, kind: str, seed: int, config_hash: str):
        """Log the start of an experiment."""
        self.info(f"Experiment '{kind}' starting (seed={seed}, config={config_hash[:12]})")

    def log_calibration_start(self, j0: float, gate: float):
        """Log the initial risk and whether descent is needed."""
        if j0 > gate:
            self.debug(f"Initial risk J0={j0:.6e} above gate {gate:.1e}, starting descent")
        else:
            self.debug(f"Initial risk J0={j0:.6e} within gate {gate:.1e}, no descent")

    def log_calibration_epoch(self, epoch: int, j: float):
        """Log the risk after one epoch."""
        self.debug(f"Epoch {epoch}: J={j:.6e}")

    def log_reset(self, epoch: int, j: float, threshold: float):
        """Log a parameter reset."""
        self.debug(f"Epoch {epoch}: J={j:.4e} crossed {threshold:.2f}, parameters reset to nominal")

    def log_calibration_done(self, final_j: float, epochs: int, resets: int, converged: bool):
        """Log the calibration outcome."""
        verdict = "converged" if converged else "NOT converged"
        self.debug(f"Calibration {verdict}: final J={final_j:.4e} after {epochs} epochs, {resets} resets")

    def log_monte_carlo_progress(self, done: int, total: int):
        """Log Monte-Carlo progress."""
        self.info(f"Monte Carlo: {done}/{total} runs complete")

    def log_loop_lock(self, mode: str, residual_rms: float, evm_percent: float):
        """Log synchronization loop metrics."""
        self.info(f"Loop ({mode}): residual RMS={residual_rms:.4f} rad, EVM={evm_percent:.2f}%")

    def log_files_written(self, paths: Iterable[Path]):
        """Log the files an experiment produced."""
        for path in paths:
            self.info(f"  wrote {path}")

    def log_error(self, operation: str, error: Exception):
        """Log error with operation context."""
        self.error(f"Error in {operation}: {error}")


# Global logger instance
logger = SimulationLogger()
