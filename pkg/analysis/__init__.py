"""
Analysis package: spectra, harmonic suppression, phase slope, EVM and eye metrics.
"""
