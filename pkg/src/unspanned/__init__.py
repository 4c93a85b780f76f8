"""Gaussian affine term-structure models with unspanned latent risk-premium factors.

Estimation is sequential: a particle cloud over parameters is updated one
month at a time, with the latent factor integrated out by a Kalman filter.
"""

__version__ = "0.1.0"
