"""Diagonal state-space models under recurrent-weight reparameterization.

Submodules:

    reparam   eigenvalue maps f(w), derivatives, gradient scales, stability gaps
    kernel    memory kernels, L1 norms/distances, linear functionals
    ssm       the diagonal SSM layer: forward, parallel scan, BPTT
    train     synthetic datasets, optimizer loop, gradient-over-weight telemetry
    perturb   perturbation-error estimation and beta sweeps
    cli       command line entry point (``ssmlab``)
"""

from ssmlab.errors import (
    ConfigurationError,
    DomainError,
    NumericError,
    SSMLabError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DomainError",
    "NumericError",
    "SSMLabError",
    "__version__",
]
