"""Coupling layers over rigid poses and augmented rotation states.

A flow stack is an ordered list of coupling layers plus an analytic base
density. `forward` is the sampling direction (base -> target), `inverse` the
density direction. Parameters live in one flat ordered mapping owned by the
stack; evaluation methods take a parameter view so the same code serves plain
numpy evaluation and tape-backed training (pass autodiff Vars in the view).

Rotations are updated by sphere diffeomorphisms that commute with quaternion
negation, and every path conditioning on quaternions is sign-invariant, so all
densities descend to rotations. Density evaluation lifts each input quaternion
by the deterministic canonical sign; a coin-flip lift is kept behind a flag
only to demonstrate that the choice does not matter.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import s3flows
from .autodiff import value_of
from .errors import NumericalError, ValidationError
from .geom import BodyTemplate, PoseSet, canonical_sign, pose_apply, random_unit_quaternion

LOG_2PI = float(np.log(2.0 * np.pi))
# softplus(x + _SP_ONE) equals exactly 1.0 at x = 0, so gated-out scales are unit
_SP_ONE = 0.5413248546129181


def gated_init(raw, gate):
    """Effective parameters raw * sigmoid(gate); gates start at -4."""
    return ad.mul(raw, ad.sigmoid(gate))


def flip_embed(q, s, f):
    """Sign-invariant features of quaternions q (..., 4).

    Softmax over the two lifts of logits S(sq) weighting features F(sq);
    swapping q for -q swaps both branches, so the value is bitwise unchanged.
    """
    sp = ad.sum(ad.mul(q, s), axis=-1, keepdims=True)
    w = ad.softmax(ad.concat([sp, ad.mul(-1.0, sp)], axis=-1))
    fp = ad.matmul(q, f)
    fm = ad.matmul(ad.mul(-1.0, q), f)
    return ad.add(ad.mul(w[..., 0:1], fp), ad.mul(w[..., 1:2], fm))


def _mlp2(x, pv, prefix):
    h = ad.gelu(ad.add(ad.matmul(x, pv[prefix + "w1"]), pv[prefix + "b1"]))
    return ad.add(ad.matmul(h, pv[prefix + "w2"]), pv[prefix + "b2"])


def _pos_scale(raw):
    # strictly positive, exactly 1 at raw = 0
    return ad.softplus(ad.add(raw, _SP_ONE))


@dataclass
class FlowState:
    """Current value of every partition; entries are arrays or Vars, batched (B, ...)."""

    q: object
    x0: object = None
    aux: object = None

    def replace(self, **kw):
        d = {"q": self.q, "x0": self.x0, "aux": self.aux}
        d.update(kw)
        return FlowState(**d)


@dataclass
class AugmentedState:
    """A single rotation q (..., 4) with Gaussian auxiliary coordinates z (..., A)."""

    q: np.ndarray
    z: np.ndarray


# ---------------------------------------------------------------------------
# conditioners


class ConditionerMLP:
    """Two dense layers (GELU hidden, zero-initialized output weights) from a flat feature vector.

    bias_init "zero" starts the conditioner at exactly zero; "small" draws the
    output bias from N(0, 0.1^2). The symmetrized rotation maps are even
    functions of their parameters, so an all-zero output is a stationary point
    gradient descent can never leave; rotation layers use "small".
    """

    def __init__(self, prefix, in_dim, out_dim, hidden=128, bias_init="zero"):
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.bias_init = bias_init

    def param_entries(self):
        p = self.prefix
        return [
            (p + "w1", (self.in_dim, self.hidden), "fan", self.in_dim),
            (p + "b1", (self.hidden,), "zero", 0),
            (p + "w2", (self.hidden, self.out_dim), "zero", 0),
            (p + "b2", (self.out_dim,), self.bias_init, 0),
        ]

    def __call__(self, x, pv):
        return _mlp2(x, pv, self.prefix)


class ConstantConditioner:
    """A learned parameter vector, independent of the conditioning state.

    Used for the affine rotation baseline: one global matrix per layer, so the
    rotation marginal it can express is a single (antipodal) mode regardless
    of the auxiliary coordinates.
    """

    def __init__(self, prefix, out_dim, bias_init="small"):
        self.prefix = prefix
        self.out_dim = out_dim
        self.bias_init = bias_init

    def param_entries(self):
        return [(self.prefix + "const", (self.out_dim,), self.bias_init, 0)]

    def __call__(self, x, pv):
        batch = value_of(x).shape[:-1]
        return ad.add(np.zeros(batch + (self.out_dim,)), pv[self.prefix + "const"])


class TransformerConditioner:
    """Per-molecule parameter fields from attention over all molecules.

    variant "position": conditions on rotations only; rotations enter half the
    attention heads through squared bilinear logits and the value stream
    through sign-invariant embeddings, so the output is invariant under any
    per-molecule quaternion sign flip.
    variant "rotation": conditions on positions; queries and keys act on the
    hidden features concatenated with the (scaled) lattice displacements.
    """

    def __init__(self, prefix, variant, n_mol, out_per_mol, n_blocks=2, n_heads=8, head_dim=32, flip_dim=32, bias_init="zero"):
        if variant not in ("position", "rotation"):
            raise ValidationError("unknown conditioner variant")
        self.prefix = prefix
        self.variant = variant
        self.n_mol = n_mol
        self.out_per_mol = out_per_mol
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.flip_dim = flip_dim
        self.bias_init = bias_init
        self.dim = n_heads * head_dim

    def param_entries(self):
        p, d = self.prefix, self.dim
        hall = self.n_heads * self.head_dim
        half = (self.n_heads // 2) * self.head_dim
        out = [(p + "id_embed", (self.n_mol, d), "fan", self.n_mol)]
        if self.variant == "position":
            out += [
                (p + "emb_s", (4,), "fan", 4),
                (p + "emb_f", (4, self.flip_dim), "fan", 4),
                (p + "w_in", (self.flip_dim, d), "fan", self.flip_dim),
            ]
        else:
            out += [(p + "w_in", (3, d), "fan", 3)]
        for b in range(self.n_blocks):
            bp = f"{p}b{b}."
            if self.variant == "position":
                out += [
                    (bp + "a_sq", (4, half), "fan", 4),
                    (bp + "b_sq", (4, half), "fan", 4),
                    (bp + "wq", (d, half), "fan", d),
                    (bp + "wk", (d, half), "fan", d),
                ]
            else:
                out += [
                    (bp + "wq", (d + 3, hall), "fan", d + 3),
                    (bp + "wk", (d + 3, hall), "fan", d + 3),
                ]
            out += [
                (bp + "wv", (d, hall), "fan", d),
                (bp + "wo", (hall, d), "fan", hall),
            ]
        out += [
            (p + "w_dec", (d, self.out_per_mol), "zero", 0),
            (p + "b_dec", (self.out_per_mol,), self.bias_init, 0),
        ]
        return out

    def _attend(self, h, pv, bp, q, disp):
        nh = self.n_heads
        scale = 1.0 / np.sqrt(self.head_dim)
        # heads ride the batch axis, so one matmul scores all of them; the
        # block order (squared heads first) matches the wv column order
        v = ad.split_heads(ad.matmul(h, pv[bp + "wv"]), nh)
        if self.variant == "position":
            half = nh // 2
            qa = ad.split_heads(ad.matmul(q, pv[bp + "a_sq"]), half)
            qb = ad.split_heads(ad.matmul(q, pv[bp + "b_sq"]), half)
            sq = ad.mul(scale, ad.square(ad.matmul(qa, ad.swap_last(qb))))
            hq = ad.split_heads(ad.matmul(h, pv[bp + "wq"]), half)
            hk = ad.split_heads(ad.matmul(h, pv[bp + "wk"]), half)
            scores = ad.concat([sq, ad.mul(scale, ad.matmul(hq, ad.swap_last(hk)))], axis=0)
        else:
            hcat = ad.concat([h, disp], axis=-1)
            hq = ad.split_heads(ad.matmul(hcat, pv[bp + "wq"]), nh)
            hk = ad.split_heads(ad.matmul(hcat, pv[bp + "wk"]), nh)
            scores = ad.mul(scale, ad.matmul(hq, ad.swap_last(hk)))
        pooled = ad.matmul(ad.softmax(scores), v)
        return ad.matmul(ad.merge_heads(pooled, nh), pv[bp + "wo"])

    def __call__(self, pv, q=None, disp=None):
        p = self.prefix
        if self.variant == "position":
            feats = flip_embed(q, pv[p + "emb_s"], pv[p + "emb_f"])
            h = ad.add(pv[p + "id_embed"], ad.matmul(feats, pv[p + "w_in"]))
        else:
            h = ad.add(pv[p + "id_embed"], ad.matmul(disp, pv[p + "w_in"]))
        for b in range(self.n_blocks):
            h = ad.add(h, self._attend(h, pv, f"{p}b{b}.", q, disp))
        return ad.add(ad.matmul(h, pv[p + "w_dec"]), pv[p + "b_dec"])


# ---------------------------------------------------------------------------
# coupling layers


class CouplingLayer:
    """Invertible update of one partition, conditioned on the others."""

    def param_entries(self):
        raise NotImplementedError

    def forward(self, state, pv):
        raise NotImplementedError

    def inverse(self, state, pv):
        raise NotImplementedError


class AuxAffineLayer(CouplingLayer):
    """Shift-and-scale of the auxiliary coordinates, conditioned on the rotations."""

    def __init__(self, prefix, n_mol, aux_dim, embed_dim=64, hidden=128):
        self.prefix = prefix
        self.n_mol = n_mol
        self.aux_dim = aux_dim
        self.embed_dim = embed_dim
        self.mlp = ConditionerMLP(prefix + "mlp.", n_mol * embed_dim, 2 * aux_dim, hidden)

    def param_entries(self):
        p = self.prefix
        return [
            (p + "emb_s", (4,), "fan", 4),
            (p + "emb_f", (4, self.embed_dim), "fan", 4),
        ] + self.mlp.param_entries() + [(p + "gate", (1,), "gate", 0)]

    def _shift_scale(self, state, pv):
        p = self.prefix
        feats = flip_embed(state.q, pv[p + "emb_s"], pv[p + "emb_f"])
        fshape = value_of(feats).shape
        flat = ad.reshape(feats, fshape[:-2] + (self.n_mol * self.embed_dim,))
        eff = gated_init(self.mlp(flat, pv), pv[p + "gate"])
        a = self.aux_dim
        return eff[..., :a], _pos_scale(eff[..., a:])

    def forward(self, state, pv):
        shift, scale = self._shift_scale(state, pv)
        aux = ad.add(ad.mul(state.aux, scale), shift)
        return state.replace(aux=aux), ad.sum(ad.log(scale), axis=-1)

    def inverse(self, state, pv):
        shift, scale = self._shift_scale(state, pv)
        aux = ad.div(ad.sub(state.aux, shift), scale)
        return state.replace(aux=aux), ad.mul(-1.0, ad.sum(ad.log(scale), axis=-1))


class PositionAffineLayer(CouplingLayer):
    """Elementwise monotone affine update of molecule positions, conditioned on rotations.

    The designated fixed molecule passes through bit-identically.
    """

    def __init__(self, prefix, n_mol, fixed_molecule, n_blocks=2):
        self.prefix = prefix
        self.n_mol = n_mol
        self.cond = TransformerConditioner(prefix + "tc.", "position", n_mol, 6, n_blocks=n_blocks)
        mask = np.ones((n_mol, 1))
        if fixed_molecule is not None:
            mask[fixed_molecule, 0] = 0.0
        self.mask = mask

    def param_entries(self):
        return self.cond.param_entries() + [(self.prefix + "gate", (1,), "gate", 0)]

    def _shift_scale(self, state, pv):
        eff = gated_init(self.cond(pv, q=state.q), pv[self.prefix + "gate"])
        shift = ad.mul(self.mask, eff[..., 0:3])
        scale = ad.add(1.0, ad.mul(self.mask, ad.sub(_pos_scale(eff[..., 3:6]), 1.0)))
        return shift, scale

    def forward(self, state, pv):
        shift, scale = self._shift_scale(state, pv)
        x0 = ad.add(ad.mul(state.x0, scale), shift)
        return state.replace(x0=x0), ad.sum(ad.log(scale), axis=(-1, -2))

    def inverse(self, state, pv):
        shift, scale = self._shift_scale(state, pv)
        x0 = ad.div(ad.sub(state.x0, shift), scale)
        return state.replace(x0=x0), ad.mul(-1.0, ad.sum(ad.log(scale), axis=(-1, -2)))


def _rot_out_dim(kind, cg_hidden):
    if kind == "moebius":
        return 4
    if kind == "affine":
        return 16
    return 6 * cg_hidden + 1


class RotationLayer(CouplingLayer):
    """Updates every rotation with a sphere diffeomorphism (kind: moebius | cg | affine).

    `orient=+1` places the analytic map in the sampling direction, `orient=-1`
    in the density direction; the opposite leg uses the closed-form or
    iterative inverse, which (except for the Moebius map) only runs on plain
    arrays.
    """

    def __init__(self, prefix, kind, n_mol, cond, orient=+1, cg_hidden=8, sites=None, disp_scale=1.0):
        if kind not in ("moebius", "cg", "affine"):
            raise ValidationError("unknown rotation layer kind")
        if kind in ("cg", "affine") and n_mol != 1:
            raise ValidationError(f"{kind} rotation layers support a single molecule only")
        self.prefix = prefix
        self.kind = kind
        self.n_mol = n_mol
        self.cond = cond
        self.orient = orient
        self.cg_hidden = cg_hidden
        self.sites = None if sites is None else np.asarray(sites, dtype=np.float64)
        self.disp_scale = disp_scale

    def param_entries(self):
        return self.cond.param_entries() + [(self.prefix + "gate", (1,), "gate", 0)]

    def _effective(self, state, pv):
        if isinstance(self.cond, TransformerConditioner):
            disp = ad.mul(ad.sub(state.x0, self.sites), 1.0 / self.disp_scale)
            raw = self.cond(pv, disp=disp)
        else:
            raw = self.cond(state.aux, pv)
        return gated_init(raw, pv[self.prefix + "gate"])

    def _map_params(self, eff):
        if self.kind == "moebius":
            return s3flows.moebius_center(eff)
        if self.kind == "affine":
            # the matrix is W^T W with W = I + M: the map stays inside the
            # quadratic-potential family (symmetric positive matrices), which
            # is the affine-quaternion baseline the ablation compares against
            shape = value_of(eff).shape[:-1] + (4, 4)
            w = ad.add(np.eye(4), ad.reshape(eff, shape))
            return ad.matmul(ad.swap_last(w), w)
        h = self.cg_hidden
        shape = value_of(eff).shape[:-1] + (h, 4)
        return s3flows.ConvexPotentialParams(
            W=ad.reshape(eff[..., : 4 * h], shape),
            u_raw=eff[..., 4 * h : 5 * h],
            b_raw=eff[..., 5 * h : 6 * h],
            c_raw=eff[..., 6 * h],
        )

    def _analytic(self, q, par):
        if self.kind == "moebius":
            return s3flows.moebius_sym_forward(q, par)
        if self.kind == "affine":
            return s3flows.affine_quat_forward(q, par)
        return s3flows.cg_forward(q, par)

    def _analytic_logdet(self, q, par):
        if self.kind == "moebius":
            return s3flows.moebius_sym_logdet(q, par)
        return self._analytic(q, par)[1]

    def _numeric_inverse(self, q, par):
        if self.kind == "moebius":
            # closed form, tape-capable in both directions
            return s3flows.moebius_sym_inverse(q, par)
        if isinstance(q, ad.Var) or _params_have_vars(par):
            raise NumericalError(
                "the non-analytic leg of a rotation layer cannot run on tape variables"
            )
        if self.kind == "affine":
            return s3flows.affine_quat_inverse(q, par)
        flat = q.reshape(-1, 4)
        out = np.empty_like(flat)
        w = value_of(par.W).reshape(-1, self.cg_hidden, 4)
        u = value_of(par.u_raw).reshape(-1, self.cg_hidden)
        b = value_of(par.b_raw).reshape(-1, self.cg_hidden)
        c = value_of(par.c_raw).reshape(-1)
        for i in range(flat.shape[0]):
            pi = s3flows.ConvexPotentialParams(w[i], u[i], b[i], c[i])
            # tighter than the standalone default so stack round trips hold 1e-8
            out[i] = s3flows.cg_inverse(flat[i], pi, tol=1e-10, max_iter=100)
        return out.reshape(q.shape)

    def _squeeze(self, q):
        if self.n_mol == 1:
            qs = value_of(q).shape
            return ad.reshape(q, qs[:-2] + (4,)), qs
        return q, None

    def _unsqueeze(self, q, qshape):
        if qshape is None:
            return q
        return ad.reshape(q, qshape)

    def _run(self, state, pv, apply_analytic):
        eff = self._effective(state, pv)
        q, qshape = self._squeeze(state.q)
        par = self._map_params(eff)
        if apply_analytic:
            qn, ld = self._analytic(q, par)
        else:
            qn = self._numeric_inverse(q, par)
            ld = ad.mul(-1.0, self._analytic_logdet(qn, par))
        if self.n_mol > 1:
            ld = ad.sum(ld, axis=-1)
        return state.replace(q=self._unsqueeze(qn, qshape)), ld

    def forward(self, state, pv):
        return self._run(state, pv, apply_analytic=self.orient == +1)

    def inverse(self, state, pv):
        return self._run(state, pv, apply_analytic=self.orient == -1)


def _params_have_vars(par):
    if isinstance(par, s3flows.ConvexPotentialParams):
        return any(isinstance(t, ad.Var) for t in (par.W, par.u_raw, par.b_raw, par.c_raw))
    return isinstance(par, ad.Var)


def couple_forward(state, layer, pv):
    """Apply one coupling layer in the sampling direction: (state', logdet)."""
    return layer.forward(state, pv)


# ---------------------------------------------------------------------------
# base densities


class AugmentedBase:
    """Gaussian auxiliary coordinates times independent rotations (uniform or symmetrized VMF)."""

    def __init__(self, n_mol=1, aux_dim=2, rotation=None):
        self.n_mol = n_mol
        self.aux_dim = aux_dim
        self.rotation = rotation  # None -> uniform, else SymVMFParams

    def logpdf(self, state):
        lz = ad.sum(ad.mul(-0.5, ad.square(state.aux)), axis=-1)
        lz = ad.add(lz, -0.5 * self.aux_dim * LOG_2PI)
        if self.rotation is None:
            return ad.add(lz, self.n_mol * s3flows.LOG_UNIFORM_S3)
        return ad.add(lz, ad.sum(s3flows.svmf_logpdf(state.q, self.rotation), axis=-1))

    def sample(self, rng, n):
        aux = rng.standard_normal((n, self.aux_dim))
        if self.rotation is None:
            q = random_unit_quaternion(rng, (n, self.n_mol))
        else:
            q = s3flows.svmf_sample(self.rotation, rng, n * self.n_mol).reshape(n, self.n_mol, 4)
        return FlowState(q=q, aux=aux)

    def descriptor(self):
        rot = None
        if self.rotation is not None:
            rot = {"mu": self.rotation.mu.tolist(), "kappa": self.rotation.kappa}
        return {"kind": "augmented", "n_mol": self.n_mol, "aux_dim": self.aux_dim, "rotation": rot}


class LatticeBase:
    """Gaussian positions around lattice sites (fixed molecule pinned) times uniform rotations."""

    def __init__(self, sites, sigma=0.3, fixed_molecule=0):
        self.sites = np.asarray(sites, dtype=np.float64)
        self.sigma = float(sigma)
        self.fixed_molecule = fixed_molecule
        self.n_mol = self.sites.shape[0]
        mask = np.ones((self.n_mol, 1))
        if fixed_molecule is not None:
            mask[fixed_molecule, 0] = 0.0
        self.mask = mask

    def logpdf(self, state):
        dx = ad.sub(state.x0, self.sites)
        per = ad.add(ad.mul(-0.5 / self.sigma**2, ad.square(dx)), -0.5 * LOG_2PI - np.log(self.sigma))
        lx = ad.sum(ad.mul(self.mask, per), axis=(-1, -2))
        return ad.add(lx, self.n_mol * s3flows.LOG_UNIFORM_S3)

    def sample(self, rng, n):
        x0 = self.sites + self.sigma * rng.standard_normal((n, self.n_mol, 3)) * self.mask
        q = random_unit_quaternion(rng, (n, self.n_mol))
        return FlowState(q=q, x0=x0)

    def descriptor(self):
        return {
            "kind": "lattice",
            "sites": self.sites.tolist(),
            "sigma": self.sigma,
            "fixed_molecule": self.fixed_molecule,
        }


# ---------------------------------------------------------------------------
# the stack


class FlowStack:
    """Ordered coupling layers with one flat parameter store and an analytic base."""

    def __init__(self, layers, base, template, fixed_molecule=None, meta=None):
        self.layers = list(layers)
        self.base = base
        self.template = template
        self.fixed_molecule = fixed_molecule
        self.meta = dict(meta or {})
        self.params = OrderedDict()

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        self.params = OrderedDict()
        for layer in self.layers:
            for name, shape, kind, fan in layer.param_entries():
                self.params[name] = _init_array(rng, shape, kind, fan)
        self.meta.setdefault("seed_lineage", []).append({"stage": "init", "seed": int(seed)})
        return self

    def var_view(self):
        return OrderedDict((k, ad.Var(v)) for k, v in self.params.items())

    def n_mol(self):
        return self.base.n_mol

    def forward(self, state, pv=None):
        pv = self.params if pv is None else pv
        ld = np.zeros(value_of(state.q).shape[:-2])
        for layer in self.layers:
            state, l = layer.forward(state, pv)
            ld = ad.add(ld, l)
        return state, ld

    def inverse(self, state, pv=None):
        pv = self.params if pv is None else pv
        ld = np.zeros(value_of(state.q).shape[:-2])
        for layer in reversed(self.layers):
            state, l = layer.inverse(state, pv)
            ld = ad.add(ld, l)
        return state, ld


def _init_array(rng, shape, kind, fan):
    if kind == "zero":
        return np.zeros(shape)
    if kind == "gate":
        return np.full(shape, -4.0)
    if kind == "small":
        return 0.1 * rng.standard_normal(shape)
    bound = 1.0 / np.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# builders


def build_tetra_stack(template, rotation="cg", cg_hidden=128, n_reps=2, aux_dim=2, embed_dim=64, hidden=128, seed=0):
    """Augmented single-body flow: n_reps of (auxiliary shift-scale | rotation map).

    The analytic leg of each rotation map faces the density direction, so
    likelihood training never needs the iterative inverse.
    """
    layers = []
    for r in range(n_reps):
        layers.append(AuxAffineLayer(f"L{2 * r}.aux.", 1, aux_dim, embed_dim, hidden))
        prefix = f"L{2 * r + 1}.rot."
        out_dim = _rot_out_dim(rotation, cg_hidden)
        if rotation == "affine":
            # the baseline map is global: its matrix never sees the auxiliaries
            cond = ConstantConditioner(prefix + "mlp.", out_dim)
        else:
            cond = ConditionerMLP(prefix + "mlp.", aux_dim, out_dim, hidden, bias_init="small")
        layers.append(RotationLayer(prefix, rotation, 1, cond, orient=-1, cg_hidden=cg_hidden))
    base = AugmentedBase(1, aux_dim)
    meta = {
        "architecture": {
            "kind": "tetra",
            "rotation": rotation,
            "cg_hidden": cg_hidden,
            "n_reps": n_reps,
            "aux_dim": aux_dim,
            "embed_dim": embed_dim,
            "hidden": hidden,
        }
    }
    stack = FlowStack(layers, base, template, fixed_molecule=None, meta=meta)
    return stack.init_params(seed)


def build_crystal_stack(sites, template, n_reps=4, fixed_molecule=0, base_sigma=0.3, n_blocks=2, disp_scale=1.0, seed=0):
    """Pose-set flow: n_reps of (position affine | Moebius rotation), transformer-conditioned."""
    sites = np.asarray(sites, dtype=np.float64)
    n_mol = sites.shape[0]
    layers = []
    for r in range(n_reps):
        layers.append(PositionAffineLayer(f"L{2 * r}.pos.", n_mol, fixed_molecule, n_blocks))
        prefix = f"L{2 * r + 1}.rot."
        cond = TransformerConditioner(prefix + "tc.", "rotation", n_mol, 4, n_blocks=n_blocks, bias_init="small")
        layers.append(
            RotationLayer(prefix, "moebius", n_mol, cond, orient=+1, sites=sites, disp_scale=disp_scale)
        )
    base = LatticeBase(sites, base_sigma, fixed_molecule)
    meta = {
        "architecture": {
            "kind": "crystal",
            "sites": sites.tolist(),
            "n_reps": n_reps,
            "fixed_molecule": fixed_molecule,
            "base_sigma": base_sigma,
            "n_blocks": n_blocks,
            "disp_scale": disp_scale,
        }
    }
    stack = FlowStack(layers, base, template, fixed_molecule=fixed_molecule, meta=meta)
    return stack.init_params(seed)


# ---------------------------------------------------------------------------
# density and sampling entry points


def _lift_state(stack, state, lift, rng):
    q = value_of(state.q)
    if lift == "canonical":
        return state.replace(q=canonical_sign(q))
    if lift == "coin":
        if rng is None:
            raise ValidationError("coin-flip lift needs an rng")
        signs = np.where(rng.random(q.shape[:-1]) < 0.5, -1.0, 1.0)
        return state.replace(q=q * signs[..., None])
    if lift == "none":
        return state
    raise ValidationError("lift must be canonical, coin, or none")


def _to_internal(stack, sample):
    if isinstance(sample, AugmentedState):
        q = np.asarray(sample.q, dtype=np.float64)
        z = np.asarray(sample.z, dtype=np.float64)
        squeeze = q.ndim == 1
        if squeeze:
            q, z = q[None], z[None]
        return FlowState(q=q[:, None, :], aux=z), squeeze
    if isinstance(sample, PoseSet):
        squeeze = sample.x0.ndim == 2
        x0, q = sample.x0, sample.q
        if squeeze:
            x0, q = x0[None], q[None]
        return FlowState(q=q, x0=x0), squeeze
    raise ValidationError("sample must be an AugmentedState or PoseSet")


def flow_log_density(stack, sample, pv=None, lift="canonical", rng=None):
    """Exact log-density of `sample` under the push-forward of the stack's base.

    Rotations are lifted to the double cover by the canonical sign; the result
    is independent of that choice because every layer commutes with negation.
    """
    state, squeeze = _to_internal(stack, sample)
    state = _lift_state(stack, state, lift, rng)
    z, ld = stack.inverse(state, pv)
    out = ad.add(stack.base.logpdf(z), ld)
    if squeeze and not isinstance(out, ad.Var):
        return float(out[0])
    return out


def log_density_state(stack, state, pv=None, lift="canonical", rng=None):
    """Batched log-density of an internal FlowState; tape-capable via pv."""
    state = _lift_state(stack, state, lift, rng)
    z, ld = stack.inverse(state, pv)
    return ad.add(stack.base.logpdf(z), ld)


@dataclass
class FlowSamples:
    """Forward draws: the pushed state, Cartesian bodies, and exact log-densities."""

    state: FlowState
    bodies: np.ndarray
    log_density: np.ndarray


def flow_sample(stack, rng, n, pv=None):
    """Draw n samples from the push-forward: base draw, forward pass, exact density."""
    state0 = stack.base.sample(rng, n)
    logp0 = stack.base.logpdf(state0)
    state, ld = stack.forward(state0, pv)
    logp = value_of(logp0) - value_of(ld)
    x0 = state.x0 if state.x0 is not None else np.zeros(value_of(state.q).shape[:-1] + (3,))
    bodies = pose_apply(value_of(x0), value_of(state.q), stack.template)
    return FlowSamples(state=state, bodies=bodies, log_density=logp)


# ---------------------------------------------------------------------------
# serialization


def model_save(stack, path):
    """Write the stack as one self-describing JSON document (round-trip exact floats)."""
    doc = OrderedDict()
    doc["format"] = "rigidflows-model"
    doc["version"] = 1
    doc["architecture"] = stack.meta["architecture"]
    doc["base"] = stack.base.descriptor()
    doc["template"] = stack.template.beads.tolist()
    doc["fixed_molecule"] = stack.fixed_molecule
    doc["seed_lineage"] = stack.meta.get("seed_lineage", [])
    doc["params"] = OrderedDict((k, v.tolist()) for k, v in stack.params.items())
    text = json.dumps(doc, indent=1)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def model_load(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"malformed model document: {e}") from e
    if doc.get("format") != "rigidflows-model" or doc.get("version") != 1:
        raise ValidationError("not a version-1 model document")
    arch = dict(doc["architecture"])
    kind = arch.pop("kind")
    template = BodyTemplate(np.array(doc["template"]))
    if kind == "tetra":
        stack = build_tetra_stack(template, seed=0, **arch)
    elif kind == "crystal":
        sites = np.array(arch.pop("sites"))
        stack = build_crystal_stack(sites, template, seed=0, **arch)
    else:
        raise ValidationError(f"unknown architecture kind: {kind}")
    stack.meta["seed_lineage"] = doc.get("seed_lineage", [])
    loaded = doc["params"]
    if list(loaded.keys()) != list(stack.params.keys()):
        raise ValidationError("model parameter names do not match the architecture")
    for k in stack.params:
        arr = np.asarray(loaded[k], dtype=np.float64).reshape(stack.params[k].shape)
        stack.params[k] = arr
    return stack
