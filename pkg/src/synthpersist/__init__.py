"""Synthetic biometric feature databases with controlled temporal persistence.

Modules
-------
synthgen     feature synthesis and ICC-banded database assembly
reliability  two-way ANOVA mean squares, ICC, variance components
matcher      similarity scores, EER, score statistics, intercorrelations
experiments  replicate-median Monte Carlo protocols
io           database files, metadata sidecars, configs and result tables
cli          command-line entry point
"""

__version__ = "0.1.0"
