"""Energy targets in reduced units: a quartic-field tetrahedral body and a toy rigid-molecule crystal.

All energies are dimensionless with k_B = 1; ensembles divide a raw energy by
the rung temperature. Every energy routine accepts plain arrays or autodiff
variables and supports an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import ValidationError
from .geom import BodyTemplate, PoseSet, rotate_point

# Five-bead tetrahedral body used by the external-field benchmark. The central
# bead sits at the origin (poses for this body keep x0 = 0); the four satellite
# beads are at bond length ~0.107. Slightly irregular on purpose: the satellite
# coordinates are rounded, so the only exact symmetries of the energy are the
# lab-frame ones tested as the negative control.
_TETRA_BEADS = np.array(
    [
        [0.000, 0.000, 0.000],
        [0.107, 0.000, 0.000],
        [-0.036, -0.078, 0.064],
        [-0.036, -0.017, -0.100],
        [-0.036, 0.094, 0.035],
    ]
)


def tetra_template() -> BodyTemplate:
    """Default tetrahedral body: central bead at the origin plus four satellites."""
    return BodyTemplate(_TETRA_BEADS.copy())


def regular_tetra_template(bond: float = 0.107) -> BodyTemplate:
    """Exactly regular variant: satellites at the alternated cube vertices, central bead at the origin.

    Its rotational symmetry group is realized by signed coordinate
    permutations, which the symmetry control checks rely on.
    """
    v = bond / np.sqrt(3.0)
    beads = np.array(
        [
            [0.0, 0.0, 0.0],
            [v, v, v],
            [v, -v, -v],
            [-v, v, -v],
            [-v, -v, v],
        ]
    )
    return BodyTemplate(beads)


@dataclass(frozen=True)
class TetraField:
    """Quartic attraction toward a fixed lab-frame point: u = coupling * sum_kd (x_kd - center_d)^4."""

    center: np.ndarray
    coupling: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        if center.shape != (3,):
            raise ValidationError("field center must be a 3-vector")
        if not self.coupling > 0.0:
            raise ValidationError("field coupling must be positive")
        object.__setattr__(self, "center", center)


def default_tetra_field() -> TetraField:
    return TetraField(center=np.array([0.09, -0.073, 0.0]), coupling=136.98630)


def tetra_energy(body, field: TetraField | None = None):
    """Quartic field energy of bead coordinates `body` with shape (..., K, 3).

    Returns a scalar (or a batch of scalars for a leading batch axis). Rigidity
    of the body is the caller's responsibility; any bead cloud is accepted.
    """
    if field is None:
        field = default_tetra_field()
    d2 = ad.square(ad.sub(body, field.center))
    return ad.mul(field.coupling, ad.sum(ad.square(d2), axis=(-1, -2)))


def bent_template(bond: float = 1.0, angle_deg: float = 104.5) -> BodyTemplate:
    """Three-bead bent molecule in its own plane: beads at the origin and two arms of length `bond`."""
    a = np.deg2rad(angle_deg)
    beads = np.array(
        [
            [0.0, 0.0, 0.0],
            [bond, 0.0, 0.0],
            [bond * np.cos(a), bond * np.sin(a), 0.0],
        ]
    )
    return BodyTemplate(beads)


def sc_lattice(n_side: int = 2, spacing: float = 3.0) -> np.ndarray:
    """Simple cubic site grid of n_side^3 points, centered on the origin."""
    if n_side < 1:
        raise ValidationError("n_side must be >= 1")
    axis = (np.arange(n_side) - (n_side - 1) / 2.0) * spacing
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)


@dataclass(frozen=True, eq=False)
class ToyCrystal:
    """Tethered rigid molecules with soft-core LJ + Coulomb bead pairs, truncated and shifted at `cutoff`.

    sites: (N, 3) lattice anchor of each molecule's first bead.
    charges: per-bead charges, one per template bead.
    softening: soft-core length added in quadrature to every bead distance.
    """

    sites: np.ndarray
    template: BodyTemplate
    tether_k: float = 5.0
    eps: float = 0.25
    sigma: float = 1.0
    cutoff: float = 4.0
    softening: float = 0.2
    charges: tuple = (-0.8, 0.4, 0.4)

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=np.float64)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "charges", tuple(float(c) for c in self.charges))
        if sites.ndim != 2 or sites.shape[1] != 3 or sites.shape[0] < 2:
            raise ValidationError("need at least 2 lattice sites of shape (N, 3)")
        if len(self.charges) != self.template.n_beads:
            raise ValidationError("one charge per template bead required")
        for name in ("tether_k", "eps", "sigma", "cutoff", "softening"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be positive")
        diffs = sites[:, None, :] - sites[None, :, :]
        dist = np.sqrt(np.sum(diffs * diffs, axis=-1))
        min_spacing = np.min(dist[~np.eye(len(sites), dtype=bool)])
        # keeps interactions within the first two neighbor shells of the grid
        if not self.cutoff < np.sqrt(2.0) * min_spacing:
            raise ValidationError("cutoff must stay below sqrt(2) times the minimal site spacing")
        object.__setattr__(self, "_gather", _pair_gather(len(sites), self.template, self.charges))

    @property
    def n(self) -> int:
        return self.sites.shape[0]


def default_toy_crystal() -> ToyCrystal:
    return ToyCrystal(sites=sc_lattice(2, 3.0), template=bent_template())


def _pair_gather(n: int, template: BodyTemplate, charges: tuple):
    """Constant matrices turning (N,*) pose arrays into flat per-pair bead arrays.

    Keeps every tape intermediate at rank <= 3: molecules are repeated K times
    with a selection matrix, beads of each unordered molecule pair are pulled
    out with one-hot gathers.
    """
    k = template.n_beads
    s_mol = np.kron(np.eye(n), np.ones((k, 1)))
    t_flat = np.tile(template.beads, (n, 1))
    rows_a, rows_b, qprod = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            for a in range(k):
                for b in range(k):
                    rows_a.append(i * k + a)
                    rows_b.append(j * k + b)
                    qprod.append(charges[a] * charges[b])
    n_terms = len(rows_a)
    p_a = np.zeros((n_terms, n * k))
    p_b = np.zeros((n_terms, n * k))
    p_a[np.arange(n_terms), rows_a] = 1.0
    p_b[np.arange(n_terms), rows_b] = 1.0
    return s_mol, t_flat, p_a, p_b, np.array(qprod)


def _pair_shift(model: ToyCrystal, qprod: np.ndarray) -> np.ndarray:
    sc = model.sigma**2 / (model.cutoff**2 + model.softening**2)
    lj = 4.0 * model.eps * (sc**6 - sc**3)
    return lj + qprod / np.sqrt(model.cutoff**2 + model.softening**2)


def crystal_energy_xq(x0, q, model: ToyCrystal):
    """Crystal energy from raw pose arrays x0 (..., N, 3) and q (..., N, 4); tape-capable."""
    s_mol, t_flat, p_a, p_b, qprod = model._gather
    x_rep = ad.matmul(s_mol, x0)
    q_rep = ad.matmul(s_mol, q)
    beads = ad.add(x_rep, rotate_point(q_rep, t_flat))
    d = ad.sub(ad.matmul(p_a, beads), ad.matmul(p_b, beads))
    r2 = ad.sum(ad.square(d), axis=-1)
    soft = ad.add(r2, model.softening**2)
    s = ad.div(model.sigma**2, soft)
    s3 = ad.mul(ad.mul(s, s), s)
    lj = ad.mul(4.0 * model.eps, ad.sub(ad.square(s3), s3))
    coul = ad.mul(qprod, ad.div(1.0, ad.sqrt(soft)))
    pair = ad.sub(ad.add(lj, coul), _pair_shift(model, qprod))
    inside = (value_of(r2) < model.cutoff**2).astype(np.float64)
    e_pair = ad.sum(ad.mul(pair, inside), axis=-1)
    dx = ad.sub(x0, model.sites)
    e_tether = ad.mul(model.tether_k, ad.sum(ad.square(dx), axis=(-1, -2)))
    return ad.add(e_tether, e_pair)


def crystal_energy(poses: PoseSet, model: ToyCrystal) -> float:
    """Total energy of a pose set: tether terms plus truncated-shifted bead pair terms."""
    if poses.n != model.n:
        raise ValidationError("pose count does not match lattice site count")
    return float(crystal_energy_xq(poses.x0, poses.q, model))


@dataclass(frozen=True)
class EnergyEnsemble:
    """A raw energy function together with the temperature rungs that scale it."""

    energy: object
    temperatures: tuple

    def __post_init__(self):
        temps = tuple(float(t) for t in self.temperatures)
        if len(temps) < 1 or any(t <= 0.0 for t in temps):
            raise ValidationError("temperatures must be positive")
        object.__setattr__(self, "temperatures", temps)

    @property
    def n_rungs(self) -> int:
        return len(self.temperatures)


def ensemble_u(ens: EnergyEnsemble, x, alpha: int):
    """Reduced energy u_alpha(x) = E(x) / T_alpha (k_B = 1)."""
    return ad.mul(ens.energy(x), 1.0 / ens.temperatures[alpha])


def temperature_ladder(t_start: float, t_end: float, n_rungs: int) -> tuple:
    """Geometric ladder from t_start to t_end inclusive: constant ratio between rungs."""
    if n_rungs < 2:
        raise ValidationError("a ladder needs at least 2 rungs")
    if t_start <= 0.0 or t_end <= 0.0:
        raise ValidationError("temperatures must be positive")
    ratio = (t_end / t_start) ** (1.0 / (n_rungs - 1))
    return tuple(t_start * ratio**k for k in range(n_rungs))
