"""
Noise schedules, forward corruption, base training and samplers.
"""
