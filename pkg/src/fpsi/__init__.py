"""Finite-element solver and analysis certificates for a coupled
incompressible free flow / poroelastic bed system on the unit square.

The package builds structured two-subdomain meshes, assembles the coupled
velocity / fluid-pressure / displacement / pore-pressure block system with
Beavers-Joseph-Saffman interface coupling, integrates it with implicit
one-step schemes, estimates every discrete inequality constant the energy
analysis needs (trace, Poincare, Sobolev, Korn, inf-sup, lifting), and turns
the a priori bounds into per-step numerical certificates.
"""

__version__ = "0.1.0"

from . import (assembly, constants, expressions, fem, mesh, monitor,
               timestepper, verify)

__all__ = [
    "__version__",
    "assembly",
    "constants",
    "expressions",
    "fem",
    "mesh",
    "monitor",
    "timestepper",
    "verify",
]
