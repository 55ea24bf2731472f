"""latdisp: a numerical laboratory for spectral theory and dispersive decay
of the discrete 3D Schrodinger and Klein-Gordon equations with finitely
supported potentials."""

__version__ = "0.1.0"

from .kernels import BACKEND, HAVE_EXT  # noqa: F401
