"""
Utility module for experiment configuration.
"""
