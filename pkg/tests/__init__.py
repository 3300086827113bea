"""
Tests for the Endless Optical Phase Delay toolkit
"""
