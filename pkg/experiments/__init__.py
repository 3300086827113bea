"""
Experiments package for the command-line front end.

Handles:
- Experiment configuration
- Running the ramp, calibration, Monte-Carlo and sync-loop experiments
- Exporting CSV and JSON results
"""
