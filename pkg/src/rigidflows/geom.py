"""Quaternion algebra, the S3 -> SO(3) double cover, and rigid poses.

Quaternions are scalar-last float64 arrays (x, y, z, w); every function
broadcasts over leading axes. rotate_point and tangent_basis accept autodiff
Vars as well as plain arrays.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError


class GeometryError(ValidationError):
    """Input violates a geometric precondition (non-rigid body, bad matrix)."""


def quat_normalize(q):
    """q / ||q||; rejects near-zero input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise GeometryError("cannot normalize a near-zero quaternion")
    return q / n


def quat_conj(q):
    """conjugate (-x, -y, -z, w)."""
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_mul(q1, q2):
    """Hamilton product, renormalized."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    x1, y1, z1, w1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    x2, y2, z2, w2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    out = np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def canonical_sign(q):
    """Representative with w >= 0; w = 0 ties take the first nonzero of (x,y,z) positive."""
    q = np.asarray(q, dtype=np.float64)
    s = np.sign(q[..., 3])
    for i in range(3):
        s = np.where(s == 0.0, np.sign(q[..., i]), s)
    s = np.where(s == 0.0, 1.0, s)
    return q * s[..., None]


def rotate_point(q, v):
    """Rotate v by q via q (x,y,z,0) q*; works on Vars and arrays."""
    u = q[..., 0:3] if isinstance(q, ad.Var) else np.asarray(q, dtype=np.float64)[..., 0:3]
    w = q[..., 3:4] if isinstance(q, ad.Var) else np.asarray(q, dtype=np.float64)[..., 3:4]
    t = ad.mul(2.0, ad.cross(u, v))
    return ad.add(ad.add(v, ad.mul(w, t)), ad.cross(u, t))


def quat_to_rotmat(q):
    """3x3 rotation matrix of q; satisfies g(q) = g(-q)."""
    q = quat_normalize(q)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rotmat_to_quat(r, sign="+", rng=None):
    """Lift r in SO(3) to S3 (Shepperd branch on the largest diagonal element).

    sign "+" gives the canonical w >= 0 representative, "-" its negation,
    "random" either with probability 1/2 drawn from rng.
    """
    r = np.asarray(r, dtype=np.float64)
    ortho = np.abs(np.swapaxes(r, -1, -2) @ r - np.eye(3)).max(axis=(-1, -2))
    if np.any(ortho > 1e-6) or np.any(np.linalg.det(r) < 0):
        raise GeometryError("matrix is not a rotation within tolerance")

    t = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    m = np.stack([t, r[..., 0, 0], r[..., 1, 1], r[..., 2, 2]], axis=-1)
    branch = np.argmax(m, axis=-1)

    def _cand(arg, a, b, c, d):
        s = np.sqrt(np.maximum(arg, 1e-30))
        h = 0.5 / s
        return np.stack([a * h, b * h, c * h, d * h], axis=-1), 0.5 * s

    # one candidate per Shepperd branch; only the argmax branch is kept
    cw, hw = _cand(
        1.0 + t, r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0],
        r[..., 1, 0] - r[..., 0, 1], np.zeros_like(t),
    )
    cw[..., 3] = hw
    cx, hx = _cand(
        1.0 + r[..., 0, 0] - r[..., 1, 1] - r[..., 2, 2],
        np.zeros_like(t), r[..., 0, 1] + r[..., 1, 0],
        r[..., 0, 2] + r[..., 2, 0], r[..., 2, 1] - r[..., 1, 2],
    )
    cx[..., 0] = hx
    cy, hy = _cand(
        1.0 - r[..., 0, 0] + r[..., 1, 1] - r[..., 2, 2],
        r[..., 0, 1] + r[..., 1, 0], np.zeros_like(t),
        r[..., 1, 2] + r[..., 2, 1], r[..., 0, 2] - r[..., 2, 0],
    )
    cy[..., 1] = hy
    cz, hz = _cand(
        1.0 - r[..., 0, 0] - r[..., 1, 1] + r[..., 2, 2],
        r[..., 0, 2] + r[..., 2, 0], r[..., 1, 2] + r[..., 2, 1],
        np.zeros_like(t), r[..., 1, 0] - r[..., 0, 1],
    )
    cz[..., 2] = hz

    cands = np.stack([cw, cx, cy, cz], axis=-2)
    q = np.take_along_axis(cands, branch[..., None, None] + np.zeros((1, 4), dtype=int), axis=-2)[
        ..., 0, :
    ]
    q = canonical_sign(quat_normalize(q))
    if sign == "+":
        return q
    if sign == "-":
        return -q
    if sign == "random":
        if rng is None:
            raise ValueError("sign='random' needs an rng")
        flips = np.where(rng.random(q.shape[:-1]) < 0.5, 1.0, -1.0)
        return q * flips[..., None]
    raise ValueError(f"unknown sign mode {sign!r}")


def random_unit_quaternion(rng, shape=()):
    """Uniform draw on S3."""
    if isinstance(shape, int):
        shape = (shape,)
    return quat_normalize(rng.standard_normal(shape + (4,)))


def tangent_basis(p):
    """Orthonormal 4x3 basis of the tangent space at p (Var or array).

    Gram-Schmidt of the three standard basis vectors least aligned with p,
    taken in ascending index order.
    """
    pv = ad.value_of(p)
    drop = np.argmax(np.abs(pv), axis=-1)
    keep = np.array([[i for i in range(4) if i != d] for d in drop.ravel()])
    seeds = np.zeros(drop.shape + (3, 4))
    flat = seeds.reshape(-1, 3, 4)
    flat[np.arange(flat.shape[0])[:, None], np.arange(3)[None, :], keep] = 1.0

    cols = []
    for j in range(3):
        v = seeds[..., j, :] - ad.mul(ad.dot(seeds[..., j, :], p, keepdims=True), p)
        for e in cols:
            v = ad.sub(v, ad.mul(ad.dot(seeds[..., j, :], e, keepdims=True), e))
        cols.append(ad.div(v, ad.norm(v, keepdims=True)))
    return ad.stack(cols, axis=-1)


@dataclass(frozen=True)
class BodyTemplate:
    """Fixed internal coordinates: K bead positions with bead 0 at the origin."""

    beads: np.ndarray

    def __post_init__(self):
        beads = np.asarray(self.beads, dtype=np.float64)
        object.__setattr__(self, "beads", beads)
        if beads.ndim != 2 or beads.shape[1] != 3 or beads.shape[0] < 3:
            raise GeometryError("template needs K >= 3 beads of shape (K, 3)")
        if np.linalg.norm(beads[0]) > 0.0:
            raise GeometryError("template bead 0 must sit at the origin")
        if np.linalg.norm(np.cross(beads[1], beads[2])) < 1e-12:
            raise GeometryError("template beads 0,1,2 must span a frame")

    @property
    def n_beads(self):
        return self.beads.shape[0]


@dataclass
class PoseSet:
    """N rigid poses over a shared template: x0 (N,3) translations, q (N,4) rotations."""

    x0: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.x0.shape[:-1] != self.q.shape[:-1] or self.x0.shape[-1] != 3 or self.q.shape[-1] != 4:
            raise GeometryError("PoseSet needs x0 (N,3) and q (N,4)")

    @property
    def n(self):
        return self.x0.shape[-2]

    def copy(self):
        return PoseSet(self.x0.copy(), self.q.copy())


def pose_apply(x0, q, template):
    """Bead coordinates x0 + R(q) t_k, shape (..., K, 3)."""
    x0 = np.asarray(x0, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return x0[..., None, :] + rotate_point(q[..., None, :], template.beads)


def _frame(b0, b1, b2):
    g1 = b1 - b0
    g1 = g1 / np.linalg.norm(g1)
    g2 = (b2 - b0) - np.dot(b2 - b0, g1) * g1
    g2 = g2 / np.linalg.norm(g2)
    return np.stack([g1, g2, np.cross(g1, g2)], axis=-1)


def pose_extract(body, template):
    """Invert pose_apply for one rigid body; raises GeometryError if not rigid.

    Returns (x0, q) with q the canonical (w >= 0) representative.
    """
    body = np.asarray(body, dtype=np.float64)
    if body.shape != template.beads.shape:
        raise GeometryError("body shape does not match template")
    x0 = body[0]
    rot = _frame(body[0], body[1], body[2]) @ _frame(*template.beads[:3]).T
    q = rotmat_to_quat(rot, sign="+")
    rms = np.sqrt(np.mean(np.sum((pose_apply(x0, q, template) - body) ** 2, axis=-1)))
    if rms > 1e-6:
        raise GeometryError(f"body deviates from rigid template (RMS {rms:.3e})")
    return x0, q
