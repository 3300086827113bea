"""
Shared constants for the endless optical phase delay toolkit.

This module contains all defaults used across the plant, control, sync,
analysis and experiment packages.
"""

import math

# Modulator
DEFAULT_V_PI = 3.0  # volts, all three half-wave voltages
DEFAULT_COMBINER_NORM = 1.0
DEFAULT_IMBALANCE = 0.0
FIELD_NORMALIZATION = 2.0  # cancels the combiner 1/2: unit field magnitude on the design circle

# Control signals
DEFAULT_F_CON = 1.0e6  # Hz
DEFAULT_SAMPLE_RATE = 64.0e6  # Hz
DEFAULT_DURATION = 10.0e-6  # seconds
DEFAULT_RADIUS = 1.0
MIN_SAMPLES_PER_PERIOD = 64
MAX_CONTROL_STEP_FRACTION = 0.25  # of V_pi between adjacent samples

# Drift
DEFAULT_DRIFT_RANGE = 0.30
DRIFT_DISTRIBUTIONS = ('uniform', 'gaussian')

# Calibration
DEFAULT_MU = 0.05
DEFAULT_EPOCHS = 500
DEFAULT_GATE = 1.0e-5  # 0.001 %
DEFAULT_RESET_THRESHOLD = 0.5
CONVERGENCE_THRESHOLD = 1.0e-3  # 0.1 %
FD_STEP_VOLTAGE_FRACTION = 1.0e-3  # of V_pi
DEFAULT_TRACE_LENGTH = 4096
UPDATE_ORDER = ('gamma', 'beta_sg', 'beta_dc', 'alpha_sg', 'alpha_dc')

# Monte Carlo
DEFAULT_MC_RUNS = 1000
SETTLING_QUANTILES = (0.10, 0.50, 0.90)

# Synchronization loop
DEFAULT_SYMBOL_RATE = 10.0e9  # baud
DEFAULT_SAMPLES_PER_SYMBOL = 16
DEFAULT_N_SYMBOLS = 10000
DEFAULT_DETECTOR_GAIN = 0.2  # volts per radian
DEFAULT_VCO_GAIN = 1.0e7  # Hz per volt
DEFAULT_DAMPING = 1.0 / math.sqrt(2.0)
NATURAL_FREQUENCY_DIVISOR = 2000.0  # natural frequency = symbol_rate / divisor
BANDWIDTH_LIMIT_DIVISOR = 10.0
DEFAULT_RAMP_RATE = 2.0 * math.pi * 1.0e6  # rad/s
DEFAULT_SETTLE_FRACTION = 0.5
INSTABILITY_LIMIT = 1.0e3  # radians of unwrapped residual
OFFSET_KINDS = ('ramp', 'random_walk', 'sinusoidal')
LOOP_MODES = ('open', 'closed', 'paired')
QPSK_PHASES = (math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4)

# Analysis
MIN_SPECTRUM_LENGTH = 16
MIN_EYE_SYMBOLS = 10
DEFAULT_HARMONICS = 5
WINDOWS = ('hann', 'rect')
DB_FLOOR = -400.0

# Experiments
EXPERIMENT_KINDS = ('ramp', 'calibrate', 'montecarlo', 'syncloop')
DEFAULT_OUTPUT_DIR = 'results'
DEFAULT_SEED = 1
RUN_LOG_FILE = 'run.log'
SUMMARY_FILE = 'summary.json'

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_FAILURE = 3
