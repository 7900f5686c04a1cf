"""Learned SNAP-gate pulse generation for a cavity qudit with fixed-point inference.

Submodules
----------
operators   system constants, SNAP targets and trace fidelity
pulses      quadratic B-spline pulse envelopes
dynamics    block-diagonal propagation, infidelity and its gradient
control     per-angle pulse optimization and dataset generation
datasets    filtering, smoothing, splits and persistence
networks    MLP / mixture-of-experts / multi-region regressors and training
fixedpoint  fixed-point formats, QAT and the integer inference emulator
explorer    random architecture search and Pareto fronts
cli         command-line driver
"""
__version__ = "0.1.0"
