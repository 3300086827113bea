#!/usr/bin/env python3
"""
Unit tests for main_eopd.py and experiments/commands.py

Tests the command-line front end end to end:
- Output files, summaries and provenance for every experiment
- Exit codes for configuration errors and numeric failures
- Reproducible CSV output
"""

import csv
import json
import os
import tempfile
import unittest

import numpy as np

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

from control.calibration import PARAM_NAMES
from main_eopd import main

SMALL_DESCENT = {'trace_length': 512, 'epochs': 40}
SMALL_SYNC = {
    'symbol_rate': 1e9, 'samples_per_symbol': 8, 'n_symbols': 2000,
    'natural_frequency': 5e6,
}


def read_rows(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.reader(f))


def read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


class TestCommandLine(unittest.TestCase):
    """Test cases for the experiment runner."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, config: dict, out: str = 'out', *extra) -> int:
        path = self.root / 'config.json'
        path.write_text(json.dumps(config), encoding='utf-8')
        return main([config['experiment'], '--config', str(path), '--out', str(self.root / out), *extra])

    def test_ramp(self):
        self.assertEqual(main(['ramp', '--out', str(self.root / 'out')]), 0)
        out = self.root / 'out'
        for name in ('waveforms.csv', 'monitors.csv', 'summary.json', 'run.log'):
            self.assertTrue((out / name).is_file(), name)

        summary = read_json(out / 'summary.json')
        self.assertEqual(summary['experiment'], 'ramp')
        self.assertEqual(summary['seed'], 1)
        self.assertEqual(len(summary['config_hash']), 64)
        self.assertAlmostEqual(summary['phase_slope'] / (2 * np.pi * 1e6), 1.0, delta=1e-6)
        self.assertGreaterEqual(summary['harmonic_suppression_db'], 40.0)
        self.assertLessEqual(summary['max_abs_alpha'], 3.0 + 1e-9)

        rows = read_rows(out / 'waveforms.csv')
        self.assertEqual(rows[0], ['t', 'alpha_sig', 'beta_sig'])
        self.assertEqual(len(rows) - 1, summary['n_samples'])

    def test_rerun_is_byte_identical(self):
        config = {'experiment': 'calibrate', 'drift': {'relative_range': 0.2}, 'descent': SMALL_DESCENT}
        self.assertEqual(self.run_cli(config, 'first'), 0)
        self.assertEqual(self.run_cli(config, 'second'), 0)
        for name in ('j_history.csv', 'params_history.csv', 'before_after_m2.csv'):
            first = (self.root / 'first' / name).read_bytes()
            second = (self.root / 'second' / name).read_bytes()
            self.assertEqual(first, second, name)
            self.assertNotIn(b'\r\n', first)

    def assert_same_files(self, first: str, second: str, names):
        for name in names:
            a = (self.root / first / name).read_bytes()
            b = (self.root / second / name).read_bytes()
            self.assertEqual(a, b, name)

    def test_ramp_rerun_is_byte_identical(self):
        config = {'experiment': 'ramp'}
        self.assertEqual(self.run_cli(config, 'first'), 0)
        self.assertEqual(self.run_cli(config, 'second'), 0)
        self.assert_same_files('first', 'second', ('waveforms.csv', 'monitors.csv', 'summary.json'))

    def test_montecarlo_parallel_matches_sequential(self):
        config = {
            'experiment': 'montecarlo',
            'descent': {'trace_length': 512, 'epochs': 10},
            'montecarlo': {'n_runs': 4},
        }
        self.assertEqual(self.run_cli(config, 'sequential'), 0)
        self.assertEqual(self.run_cli(config, 'parallel', '--parallel', '2'), 0)
        self.assert_same_files('sequential', 'parallel', ('runs.csv', 'settling.csv'))

    def test_random_walk_syncloop_is_byte_identical(self):
        config = {
            'experiment': 'syncloop', 'seed': 9,
            'sync': {**SMALL_SYNC, 'offset_kind': 'random_walk', 'diffusion': 1e4},
        }
        self.assertEqual(self.run_cli(config, 'first'), 0)
        self.assertEqual(self.run_cli(config, 'second'), 0)
        self.assert_same_files('first', 'second', ('loop_trace.csv', 'eye.csv', 'constellation.csv'))
        self.assertNotIn('expected_v_pd_lf', read_json(self.root / 'first' / 'summary.json'))

    def test_calibrate_without_drift(self):
        """Test that an undrifted plant stops at the gate with one history row."""
        config = {'experiment': 'calibrate', 'drift': {'relative_range': 0.0}, 'descent': SMALL_DESCENT}
        self.assertEqual(self.run_cli(config), 0)
        out = self.root / 'out'
        self.assertEqual(len(read_rows(out / 'j_history.csv')), 2)
        summary = read_json(out / 'summary.json')
        self.assertTrue(summary['converged'])
        self.assertEqual(summary['epochs_run'], 0)

    def test_calibrate_outputs(self):
        config = {'experiment': 'calibrate', 'drift': {'relative_range': 0.1}, 'descent': SMALL_DESCENT}
        self.assertEqual(self.run_cli(config, 'out', '--seed', '5'), 0)
        out = self.root / 'out'

        j_rows = read_rows(out / 'j_history.csv')
        params_rows = read_rows(out / 'params_history.csv')
        self.assertEqual(len(j_rows), len(params_rows))
        self.assertEqual(params_rows[0], ['epoch', *PARAM_NAMES])
        self.assertEqual(read_rows(out / 'before_after_m1.csv')[0], ['t', 'predicted', 'before', 'after'])
        self.assertEqual(sorted(read_json(out / 'true_params.json')), sorted(PARAM_NAMES))

        summary = read_json(out / 'summary.json')
        self.assertEqual(summary['seed'], 5)
        self.assertLess(summary['final_j'], summary['initial_j'])
        self.assertEqual(float(j_rows[-1][1]), summary['final_j'])

    def test_montecarlo_outputs(self):
        config = {
            'experiment': 'montecarlo',
            'descent': {'trace_length': 512, 'epochs': 10},
            'montecarlo': {'n_runs': 3},
        }
        self.assertEqual(self.run_cli(config), 0)
        out = self.root / 'out'

        runs = read_rows(out / 'runs.csv')
        self.assertEqual(len(runs), 4)
        self.assertEqual(runs[0][:2], ['run', 'seed'])
        self.assertEqual(read_rows(out / 'settling.csv')[0], ['epoch', 'p10', 'median', 'p90'])

        aggregate = read_json(out / 'aggregate.json')
        self.assertEqual(aggregate['n_runs'], 3)
        self.assertEqual(sum(aggregate['reset_histogram'].values()), 3)
        self.assertEqual(read_json(out / 'summary.json')['config_hash'], aggregate['config_hash'])

    def test_paired_syncloop(self):
        config = {'experiment': 'syncloop', 'sync': {**SMALL_SYNC, 'mode': 'paired'}}
        self.assertEqual(self.run_cli(config), 0)
        out = self.root / 'out'

        summary = read_json(out / 'summary.json')
        self.assertEqual(summary['mode'], 'paired')
        self.assertTrue(summary['complete'])
        self.assertLess(summary['closed']['residual_rms'], 0.05)
        self.assertGreater(summary['open']['evm_percent'], summary['closed']['evm_percent'])

        for mode in ('open', 'closed'):
            for name in ('loop_trace.csv', 'controls.csv', 'constellation.csv', 'eye.csv', 'summary.json'):
                self.assertTrue((out / mode / name).is_file(), f"{mode}/{name}")
        eye_header = read_rows(out / 'closed' / 'eye.csv')[0]
        self.assertEqual(eye_header, ['trace', 'component'] + [f"s{k}" for k in range(8)])

    def test_loop_instability_exit_code(self):
        config = {
            'experiment': 'syncloop',
            'sync': {'symbol_rate': 1e6, 'samples_per_symbol': 4, 'n_symbols': 4000,
                     'natural_frequency': 100.0, 'ramp_rate': 2 * np.pi * 1e5},
        }
        self.assertEqual(self.run_cli(config), 3)
        summary = read_json(self.root / 'out' / 'summary.json')
        self.assertFalse(summary['complete'])
        self.assertTrue((self.root / 'out' / 'loop_trace.csv').is_file())

    def test_paired_instability_keeps_open_run(self):
        """Test that a diverging closed run leaves the finished open run in place."""
        config = {
            'experiment': 'syncloop',
            'sync': {'symbol_rate': 1e6, 'samples_per_symbol': 4, 'n_symbols': 4000,
                     'natural_frequency': 100.0, 'ramp_rate': 2 * np.pi * 1e5, 'mode': 'paired'},
        }
        self.assertEqual(self.run_cli(config), 3)
        out = self.root / 'out'

        open_summary = read_json(out / 'open' / 'summary.json')
        self.assertTrue(open_summary['complete'])
        self.assertIn('evm_percent', open_summary)
        self.assertTrue((out / 'open' / 'eye.csv').is_file())

        closed_summary = read_json(out / 'closed' / 'summary.json')
        self.assertFalse(closed_summary['complete'])
        self.assertTrue((out / 'closed' / 'loop_trace.csv').is_file())
        self.assertFalse((out / 'loop_trace.csv').exists())

        summary = read_json(out / 'summary.json')
        self.assertFalse(summary['complete'])
        self.assertIn('open', summary)
        self.assertNotIn('closed', summary)

    def test_too_few_symbols_writes_nothing(self):
        config = {'experiment': 'syncloop', 'sync': {**SMALL_SYNC, 'n_symbols': 15}}
        self.assertEqual(self.run_cli(config), 2)
        self.assertFalse((self.root / 'out').exists())

    def test_invalid_config_writes_nothing(self):
        config = {'experiment': 'ramp', 'ramp': {'f_control': 1e6}}
        self.assertEqual(self.run_cli(config), 2)
        self.assertFalse((self.root / 'out').exists())

    def test_undersampled_ramp_rejected(self):
        config = {'experiment': 'ramp', 'ramp': {'sample_rate': 8e6}}
        self.assertEqual(self.run_cli(config), 2)
        self.assertFalse((self.root / 'out').exists())

    def test_experiment_mismatch(self):
        path = self.root / 'config.json'
        path.write_text(json.dumps({'experiment': 'ramp'}), encoding='utf-8')
        self.assertEqual(main(['calibrate', '--config', str(path), '--out', str(self.root / 'out')]), 2)

    def test_missing_config_file(self):
        self.assertEqual(main(['ramp', '--config', str(self.root / 'nope.json')]), 2)

    def test_unwritable_output(self):
        blocker = self.root / 'file'
        blocker.write_text('x', encoding='utf-8')
        self.assertEqual(main(['ramp', '--out', os.path.join(str(blocker), 'sub')]), 2)

    def test_unknown_experiment(self):
        with self.assertRaises(SystemExit) as ctx:
            main(['sweep'])
        self.assertEqual(ctx.exception.code, 2)


if __name__ == '__main__':
    unittest.main()
