#!/usr/bin/env python3
"""
Endless Optical Phase Delay Toolkit - Main Entry Point

Runs one experiment and writes its results:
- ramp: control waveforms, monitors and phase slope of a linear ramp
- calibrate: gradient-descent calibration of a drifted plant
- montecarlo: calibration over many random drifts
- syncloop: carrier-phase synchronization loop (open, closed or paired)

Usage:
    python main_eopd.py ramp|calibrate|montecarlo|syncloop [options]

Optional arguments:
    --config PATH     JSON experiment configuration (default: built-in defaults)
    --out DIR         Output directory (default: results)
    --seed N          Master seed, overrides the configuration
    --parallel K      Parallel Monte-Carlo workers (joblib n_jobs)
    --verbose         Debug logging

Exit codes: 0 success, 2 configuration error, 3 numeric failure or loop instability.
"""

import argparse
import logging
import sys
from typing import List, Optional

from common.constants import (
    EXPERIMENT_KINDS, EXIT_OK, EXIT_CONFIG_ERROR, EXIT_NUMERIC_FAILURE
)
from common.errors import InvalidInputError, NumericFailureError, LoopInstabilityError
from common.logger import logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='eopd', description='Endless optical phase delay toolkit')
    parser.add_argument('experiment', choices=EXPERIMENT_KINDS,
                        help='Experiment to run')
    parser.add_argument('--config', type=str, default=None,
                        help='JSON configuration file (default: built-in defaults)')
    parser.add_argument('--out', type=str, default=None,
                        help='Output directory (default: results)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Master seed (overrides the configuration)')
    parser.add_argument('--parallel', type=int, default=None,
                        help='Parallel Monte-Carlo workers (default: 1)')
    parser.add_argument('--verbose', action='store_true',
                        help='Enable debug logging')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the experiment and return the exit code."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logger.set_level(logging.DEBUG)

    from experiments.commands import run_experiment
    from experiments.utils.config import ExperimentConfig

    try:
        if args.config:
            config = ExperimentConfig.from_file(args.config)
            if config.experiment != args.experiment:
                raise InvalidInputError(
                    f"Configuration names experiment '{config.experiment}' but '{args.experiment}' was requested"
                )
        else:
            config = ExperimentConfig.from_dict({'experiment': args.experiment})
        config = config.with_overrides(seed=args.seed, output_dir=args.out, parallel=args.parallel)
        run_experiment(config)
    except InvalidInputError as e:
        logger.log_error(args.experiment, e)
        return EXIT_CONFIG_ERROR
    except OSError as e:
        logger.log_error(args.experiment, e)
        return EXIT_CONFIG_ERROR
    except (NumericFailureError, LoopInstabilityError) as e:
        logger.log_error(args.experiment, e)
        return EXIT_NUMERIC_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
