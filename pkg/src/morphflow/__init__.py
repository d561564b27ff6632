"""morphflow: bilinear identity/expression shape modeling with normalizing-flow latents.

Pipeline pieces: cross-topology barycentric mesh mapping, spectral action-unit
detection, expression deformation transfer, HOSVD bilinear factorization,
Real-NVP style flows over the factor coefficients, latent-space utilities, and
a 3D-3D fitter, orchestrated by a CLI over a synthetic mesh family.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
