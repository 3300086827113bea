"""
Plant package: physics model of the IQ-modulator based endless phase delay.
"""
