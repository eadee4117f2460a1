"""Metropolis sampling of rigid-body ensembles and the line-oriented dataset format.

An elementary move updates one uniformly chosen molecule: a Gaussian
translation step plus an additive Gaussian rotation step that is renormalized
onto the sphere (a symmetric proposal, since its density depends on the inner
product of old and new quaternion only). A sweep is one elementary move per
molecule; frames are recorded every `sweeps_per_frame` sweeps after burn-in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DatasetHeaderError,
    DatasetQuaternionError,
    DatasetRecordError,
    ValidationError,
)
from .geom import PoseSet, pose_apply

DATASET_FORMAT = "rigidflows-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class McmcConfig:
    """Proposal widths and schedule for one Metropolis run.

    `burn_in` counts discarded leading frames; None means one tenth of
    `n_frames`. `freeze_translation` pins every position (orientation-only
    sampling, e.g. a body anchored at the origin).
    """

    n_frames: int
    sweeps_per_frame: int = 5
    dt: float = 0.4
    dr: float = 0.65
    burn_in: int = None
    seed: int = 0
    freeze_translation: bool = False

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValidationError("n_frames must be at least 1")
        if self.sweeps_per_frame < 1:
            raise ValidationError("sweeps_per_frame must be at least 1")
        if not self.freeze_translation and not self.dt > 0.0:
            raise ValidationError("translation width dt must be positive")
        if not self.dr > 0.0:
            raise ValidationError("rotation width dr must be positive")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValidationError("burn_in must be nonnegative")

    def resolved_burn_in(self):
        return self.n_frames // 10 if self.burn_in is None else self.burn_in


@dataclass
class McmcResult:
    """Recorded frames plus move statistics."""

    x0: np.ndarray  # (F, N, 3)
    q: np.ndarray  # (F, N, 4)
    acceptance_rate: float
    config: McmcConfig


def mcmc_run(u, init, cfg):
    """Sample exp(-u(x0, q)) by single-molecule Metropolis moves.

    `u` maps raw pose arrays (N, 3), (N, 4) to a float in reduced units;
    `init` is the starting PoseSet. Identical (u, init, cfg) reruns are
    bit-identical.
    """
    if not isinstance(init, PoseSet):
        raise ValidationError("init must be a PoseSet")
    rng = np.random.default_rng(cfg.seed)
    x0 = np.array(init.x0, dtype=np.float64)
    q = np.array(init.q, dtype=np.float64)
    n_mol = x0.shape[0]
    u_cur = float(u(x0, q))
    burn = cfg.resolved_burn_in()
    frames_x, frames_q = [], []
    accepted = 0
    proposed = 0
    for frame in range(burn + cfg.n_frames):
        for _ in range(cfg.sweeps_per_frame * n_mol):
            i = int(rng.integers(n_mol))
            x_old = x0[i].copy()
            q_old = q[i].copy()
            if not cfg.freeze_translation:
                x0[i] = x_old + cfg.dt * rng.standard_normal(3)
            step = q_old + cfg.dr * rng.standard_normal(4)
            q[i] = step / np.linalg.norm(step)
            u_new = float(u(x0, q))
            du = u_new - u_cur
            proposed += 1
            if du <= 0.0 or rng.random() < np.exp(-du):
                accepted += 1
                u_cur = u_new
            else:
                x0[i] = x_old
                q[i] = q_old
        if frame >= burn:
            frames_x.append(x0.copy())
            frames_q.append(q.copy())
    return McmcResult(
        x0=np.array(frames_x),
        q=np.array(frames_q),
        acceptance_rate=accepted / proposed,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# potentials in reduced units


def boltzmann_potential(energy, temperature):
    """u(x0, q) = E(PoseSet) / T for any energy over pose sets."""
    if not temperature > 0.0:
        raise ValidationError("temperature must be positive")

    def u(x0, q):
        return float(energy(PoseSet(x0=x0, q=q))) / temperature

    return u


def orientation_potential(f):
    """Translation-free potential from a per-quaternion reduced energy f(q)."""

    def u(x0, q):
        return float(np.sum(f(q)))

    return u


# ---------------------------------------------------------------------------
# dataset container and line format


@dataclass
class Dataset:
    """Frames of rigid poses with a self-describing metadata header.

    Records store, per molecule, the translation then the quaternion
    (x y z qx qy qz qw), seven numbers each.
    """

    meta: dict
    x0: np.ndarray  # (F, N, 3)
    q: np.ndarray  # (F, N, 4)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.x0.ndim != 3 or self.x0.shape[-1] != 3:
            raise ValidationError("dataset positions must have shape (F, N, 3)")
        if self.q.shape != self.x0.shape[:2] + (4,):
            raise ValidationError("dataset rotations must have shape (F, N, 4)")

    @property
    def n_frames(self):
        return self.x0.shape[0]

    @property
    def n_mol(self):
        return self.x0.shape[1]

    def frame(self, i):
        return PoseSet(x0=self.x0[i], q=self.q[i])

    def bodies(self, template):
        return pose_apply(self.x0, self.q, template)


def dataset_from_result(result, template, temperature, generator=None):
    """Wrap an McmcResult with the metadata the file format requires."""
    cfg = result.config
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n_frames": int(result.x0.shape[0]),
        "n_mol": int(result.x0.shape[1]),
        "temperature": float(temperature),
        "seed": int(cfg.seed),
        "template": np.asarray(template.beads).tolist(),
        "generator": dict(
            generator
            or {
                "kind": "mcmc",
                "sweeps_per_frame": cfg.sweeps_per_frame,
                "dt": cfg.dt,
                "dr": cfg.dr,
                "burn_in": cfg.resolved_burn_in(),
                "freeze_translation": cfg.freeze_translation,
            }
        ),
    }
    return Dataset(meta=meta, x0=result.x0, q=result.q)


def dataset_write(ds, path):
    """One JSON header line, then one whitespace-separated record per frame.

    Floats are written with repr, which round-trips float64 exactly.
    """
    meta = dict(ds.meta)
    meta["format"] = DATASET_FORMAT
    meta["version"] = DATASET_VERSION
    meta["n_frames"] = ds.n_frames
    meta["n_mol"] = ds.n_mol
    flat = np.concatenate([ds.x0, ds.q], axis=-1).reshape(ds.n_frames, -1)
    with open(path, "w") as fh:
        fh.write(json.dumps(meta) + "\n")
        for row in flat:
            fh.write(" ".join(repr(v) for v in row.tolist()) + "\n")


def dataset_read(path, unit_tol=1e-9):
    """Parse a dataset file; malformed content raises a named, typed error."""
    with open(path) as fh:
        header = fh.readline()
        if not header.strip():
            raise DatasetHeaderError("dataset has no header line")
        try:
            meta = json.loads(header)
        except json.JSONDecodeError as e:
            raise DatasetHeaderError(f"malformed dataset header: {e}") from e
        if not isinstance(meta, dict) or meta.get("format") != DATASET_FORMAT:
            raise DatasetHeaderError("header does not describe a rigidflows dataset")
        if meta.get("version") != DATASET_VERSION:
            raise DatasetHeaderError(f"unsupported dataset version: {meta.get('version')!r}")
        for key in ("n_frames", "n_mol"):
            if not isinstance(meta.get(key), int) or meta[key] < 1:
                raise DatasetHeaderError(f"header field {key} must be a positive integer")
        n_mol = meta["n_mol"]
        width = 7 * n_mol
        rows = []
        for idx, line in enumerate(fh):
            if not line.strip():
                continue
            tokens = line.split()
            if len(tokens) != width:
                raise DatasetRecordError(
                    f"record {idx}: expected {width} fields for {n_mol} molecules, got {len(tokens)}"
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as e:
                raise DatasetRecordError(f"record {idx}: unparsable number ({e})") from e
    if len(rows) != meta["n_frames"]:
        raise DatasetRecordError(
            f"header announces {meta['n_frames']} frames but the file holds {len(rows)}"
        )
    data = np.array(rows, dtype=np.float64).reshape(len(rows), n_mol, 7)
    x0 = np.ascontiguousarray(data[..., 0:3])
    q = np.ascontiguousarray(data[..., 3:7])
    bad = np.abs(np.linalg.norm(q, axis=-1) - 1.0) > unit_tol
    if np.any(bad):
        idx, mol = np.argwhere(bad)[0]
        raise DatasetQuaternionError(
            f"record {idx}: molecule {mol} rotation is not a unit quaternion "
            f"(|q| = {np.linalg.norm(q[idx, mol]):.12g})"
        )
    return Dataset(meta=meta, x0=x0, q=q)


def dataset_split(ds, fraction=0.5):
    """Deterministic leading/trailing split into two datasets; index sets are disjoint."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError("split fraction must lie strictly between 0 and 1")
    cut = int(round(ds.n_frames * fraction))
    if cut < 1 or cut >= ds.n_frames:
        raise ValidationError("split leaves an empty part")
    head = Dataset(meta={**ds.meta, "n_frames": cut}, x0=ds.x0[:cut], q=ds.q[:cut])
    tail = Dataset(
        meta={**ds.meta, "n_frames": ds.n_frames - cut}, x0=ds.x0[cut:], q=ds.q[cut:]
    )
    return head, tail
