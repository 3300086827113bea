"""
Sync package: carrier-phase synchronization loop with the phase delay as actuator.
"""
