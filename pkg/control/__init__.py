"""
Control package for the endless phase delay.

This package contains:
- Control-signal synthesis and phase unwrapping
- Gradient-descent calibration of biases and drive gains
"""
