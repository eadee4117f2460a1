"""Normalizing flows for rigid-body molecular ensembles.

Rotations live on the unit-quaternion double cover of SO(3); flows are built
from projective and Moebius sphere diffeomorphisms wired into coupling layers,
trained against Boltzmann targets, and used for free-energy estimation.
"""

__version__ = "0.1.0"
