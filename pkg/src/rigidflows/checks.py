"""Executable invariant suite behind the `check` subcommand.

Every check re-derives one documented property of a module on freshly drawn
random inputs. Seeds are fixed, so a rerun performs bit-identical work; the
whole suite is sized to finish in well under ten minutes on one core. Checks
raise CheckFailure (or any exception) to fail; run_checks collects results
and the CLI maps failures to the numerical-failure exit code.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
from scipy.stats import ks_2samp

from . import autodiff as ad
from . import coupling as cp
from . import estimators as est
from . import geom
from . import s3flows
from . import sampling
from . import targets
from . import train
from .autodiff import value_of


class CheckFailure(AssertionError):
    pass


def _require(cond, message):
    if not cond:
        raise CheckFailure(message)


_REGISTRY = []


def _check(name):
    def deco(fn):
        _REGISTRY.append((name, fn))
        return fn

    return deco


# ---------------------------------------------------------------------------
# shared helpers


def _random_tetra_stack(rotation, seed, scale=0.15, gate=0.0, cg_hidden=8):
    stack = cp.build_tetra_stack(
        targets.tetra_template(), rotation=rotation, cg_hidden=cg_hidden, hidden=32, seed=seed
    )
    rng = np.random.default_rng(seed + 100)
    for k, v in stack.params.items():
        if k.endswith("gate"):
            stack.params[k] = np.full(v.shape, gate)
        elif any(t in k for t in ("w2", "b2", "w_dec", "b_dec", "const")):
            stack.params[k] = rng.normal(scale=scale, size=v.shape)
    return stack


def _random_crystal_stack(seed, scale=0.1):
    model = targets.default_toy_crystal()
    stack = cp.build_crystal_stack(model.sites, model.template, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in stack.params.items():
        if k.endswith("gate"):
            stack.params[k] = np.zeros(v.shape)
        elif any(t in k for t in ("w_dec", "b_dec")):
            stack.params[k] = rng.normal(scale=scale, size=v.shape)
    return stack


def _numeric_tangent_logdet(f, p, h=1e-6):
    """log sqrt(det(J^T J)) of an on-sphere map from central differences."""
    e = np.asarray(geom.tangent_basis(p))
    cols = [
        (f(geom.quat_normalize(p + h * e[:, j])) - f(geom.quat_normalize(p - h * e[:, j])))
        / (2.0 * h)
        for j in range(3)
    ]
    jac = np.stack(cols, axis=-1)
    return 0.5 * np.log(np.linalg.det(jac.T @ jac))


def _random_cg_params(rng, n, h=8, scale=0.4):
    return s3flows.ConvexPotentialParams(
        W=scale * rng.standard_normal((n, h, 4)),
        u_raw=scale * rng.standard_normal((n, h)),
        b_raw=scale * rng.standard_normal((n, h)),
        c_raw=scale * rng.standard_normal(n),
    )


def _random_ball(rng, n, radius=0.97):
    v = rng.standard_normal((n, 4))
    r = radius * rng.random((n, 1)) ** 0.25
    return r * v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# geometry


@_check("geom: q and -q give identical rotation matrices (1e-12, 1e4 draws)")
def _geom_double_cover():
    q = geom.random_unit_quaternion(np.random.default_rng(0), 10_000)
    gap = np.abs(geom.quat_to_rotmat(q) - geom.quat_to_rotmat(-q)).max()
    _require(gap < 1e-12, f"double cover broken: {gap:.2e}")


@_check("geom: lift/project round trips hold for every sign mode (1e-9)")
def _geom_sections():
    rng = np.random.default_rng(1)
    r = geom.quat_to_rotmat(geom.random_unit_quaternion(rng, 10_000))
    for mode in ("+", "-", "random"):
        q = geom.rotmat_to_quat(r, sign=mode, rng=rng)
        gap = np.abs(geom.quat_to_rotmat(q) - r).max()
        _require(gap < 1e-9, f"sign mode {mode} round trip off by {gap:.2e}")


@_check("geom: rotations preserve bead norms and pairwise distances")
def _geom_rigidity():
    rng = np.random.default_rng(2)
    q = geom.random_unit_quaternion(rng, 512)
    beads = rng.standard_normal((5, 3))
    moved = geom.rotate_point(q[:, None, :], beads)
    norm_gap = np.abs(np.linalg.norm(moved, axis=-1) - np.linalg.norm(beads, axis=-1)).max()
    d_new = np.linalg.norm(moved[:, :, None, :] - moved[:, None, :, :], axis=-1)
    d_old = np.linalg.norm(beads[:, None, :] - beads[None, :, :], axis=-1)
    _require(norm_gap < 1e-12, f"norms drift {norm_gap:.2e}")
    _require(np.abs(d_new - d_old).max() < 1e-12, "pairwise distances drift")


@_check("geom: pose extract/apply round trip (rms < 1e-8)")
def _geom_pose_round_trip():
    rng = np.random.default_rng(3)
    tpl = targets.tetra_template()
    x0 = rng.standard_normal((256, 3))
    q = geom.random_unit_quaternion(rng, 256)
    body = geom.pose_apply(x0, q, tpl)
    x0b, qb = geom.pose_extract(body, tpl)
    back = geom.pose_apply(x0b, qb, tpl)
    rms = np.sqrt(np.mean((back - body) ** 2))
    _require(rms < 1e-8, f"pose round trip rms {rms:.2e}")


# ---------------------------------------------------------------------------
# sphere diffeomorphisms


@_check("s3flows: moebius and cg maps are flip-equivariant (1e-12)")
def _s3_flip_equivariance():
    rng = np.random.default_rng(4)
    p = geom.random_unit_quaternion(rng, 2_000)
    omega = _random_ball(rng, 2_000)
    plus, _ = s3flows.moebius_sym_forward(p, omega)
    minus, _ = s3flows.moebius_sym_forward(-p, omega)
    even, _ = s3flows.moebius_sym_forward(p, -omega)
    _require(np.abs(np.asarray(plus) + np.asarray(minus)).max() < 1e-12, "moebius p-flip")
    _require(np.abs(np.asarray(plus) - np.asarray(even)).max() < 1e-12, "moebius omega-flip")
    par = _random_cg_params(rng, 2_000)
    plus, _ = s3flows.cg_forward(p, par)
    minus, _ = s3flows.cg_forward(-p, par)
    _require(np.abs(np.asarray(plus) + np.asarray(minus)).max() < 1e-12, "cg p-flip")


@_check("s3flows: volume factors are flip-invariant (1e-12)")
def _s3_logdet_flip():
    rng = np.random.default_rng(5)
    p = geom.random_unit_quaternion(rng, 2_000)
    omega = _random_ball(rng, 2_000)
    a = np.asarray(s3flows.moebius_sym_logdet(p, omega))
    b = np.asarray(s3flows.moebius_sym_logdet(-p, omega))
    _require(np.abs(a - b).max() < 1e-12, "moebius logdet flip")
    par = _random_cg_params(rng, 2_000)
    _, la = s3flows.cg_forward(p, par)
    _, lb = s3flows.cg_forward(-p, par)
    _require(np.abs(np.asarray(la) - np.asarray(lb)).max() < 1e-12, "cg logdet flip")


@_check("s3flows: volume factors stay finite over 1e6 random draws")
def _s3_diffeo_finite():
    rng = np.random.default_rng(6)
    for _ in range(5):
        p = geom.random_unit_quaternion(rng, 100_000)
        ld = s3flows.moebius_sym_logdet(p, _random_ball(rng, 100_000, radius=0.99))
        _require(np.all(np.isfinite(np.asarray(ld))), "moebius logdet not finite")
    for _ in range(5):
        p = geom.random_unit_quaternion(rng, 100_000)
        _, ld = s3flows.cg_forward(p, _random_cg_params(rng, 100_000, scale=1.0))
        _require(np.all(np.isfinite(np.asarray(ld))), "cg logdet not finite")


@_check("s3flows: the planar moebius block is an involution (1e-10)")
def _s3_planar_involution():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1.0, 1.0, 4_000)
    r = rng.uniform(0.0, 0.97, 4_000)
    once = s3flows.moebius_planar_forward(x, r)
    twice = s3flows.moebius_planar_forward(np.asarray(once), r)
    _require(np.abs(np.asarray(twice) - x).max() < 1e-10, "planar map is not an involution")


@_check("s3flows: composition volume equals the sum of layer volumes (numeric oracle)")
def _s3_composition_volume():
    rng = np.random.default_rng(8)
    for _ in range(40):
        p = geom.random_unit_quaternion(rng)
        omega = _random_ball(rng, 1, radius=0.7)[0]
        par = _random_cg_params(rng, 1, h=8, scale=0.3)
        single = s3flows.ConvexPotentialParams(par.W[0], par.u_raw[0], par.b_raw[0], par.c_raw[0])

        def composed(x):
            mid, _ = s3flows.moebius_sym_forward(x, omega)
            out, _ = s3flows.cg_forward(np.asarray(mid), single)
            return np.asarray(out)

        mid, ld1 = s3flows.moebius_sym_forward(p, omega)
        _, ld2 = s3flows.cg_forward(np.asarray(mid), single)
        want = float(np.asarray(ld1)) + float(np.asarray(ld2))
        got = _numeric_tangent_logdet(composed, p)
        _require(abs(got - want) < 1e-5 * max(1.0, abs(want)), f"composition logdet {got} vs {want}")


# ---------------------------------------------------------------------------
# coupling stacks


@_check("coupling: log density is independent of the lift sign (1e-12)")
def _coupling_lift_independence():
    rng = np.random.default_rng(9)
    for rotation in ("moebius", "cg", "affine"):
        stack = _random_tetra_stack(rotation, seed=10)
        samples = cp.flow_sample(stack, rng, 64)
        q = value_of(samples.state.q)
        aux = value_of(samples.state.aux)
        state = cp.FlowState(q=q, aux=aux)
        base = value_of(cp.log_density_state(stack, state, lift="none"))
        signs = np.where(rng.random(q.shape[:-1]) < 0.5, -1.0, 1.0)
        flipped = cp.FlowState(q=q * signs[..., None], aux=aux)
        other = value_of(cp.log_density_state(stack, flipped, lift="none"))
        _require(np.abs(base - other).max() < 1e-12, f"{rotation}: lift sign changes density")


@_check("coupling: stack round trips invert and volumes cancel (1e-8, 1e3 poses)")
def _coupling_invertibility():
    rng = np.random.default_rng(11)
    for rotation in ("moebius", "affine", "cg"):
        stack = _random_tetra_stack(rotation, seed=12)
        n = 1_000 if rotation != "cg" else 128
        state = cp.FlowState(
            q=geom.random_unit_quaternion(rng, (n, 1)), aux=rng.standard_normal((n, 2))
        )
        out, ld_f = stack.forward(state)
        back, ld_i = stack.inverse(
            cp.FlowState(q=value_of(out.q), aux=value_of(out.aux))
        )
        gap_q = np.abs(value_of(back.q) - state.q).max()
        gap_a = np.abs(value_of(back.aux) - state.aux).max()
        cancel = np.abs(value_of(ld_f) + value_of(ld_i)).max()
        _require(gap_q < 1e-8 and gap_a < 1e-8, f"{rotation}: round trip off ({gap_q:.2e})")
        _require(cancel < 1e-8, f"{rotation}: volumes do not cancel ({cancel:.2e})")
    stack = _random_crystal_stack(seed=13)
    n_mol = stack.n_mol()
    state = cp.FlowState(
        x0=value_of(stack.base.sites) + 0.1 * rng.standard_normal((1_000, n_mol, 3)),
        q=geom.random_unit_quaternion(rng, (1_000, n_mol)),
    )
    out, ld_f = stack.forward(state)
    back, ld_i = stack.inverse(cp.FlowState(x0=value_of(out.x0), q=value_of(out.q)))
    gap = max(
        np.abs(value_of(back.x0) - state.x0).max(), np.abs(value_of(back.q) - state.q).max()
    )
    cancel = np.abs(value_of(ld_f) + value_of(ld_i)).max()
    _require(gap < 1e-8, f"crystal stack round trip off by {gap:.2e}")
    _require(cancel < 1e-8, f"crystal stack volumes do not cancel ({cancel:.2e})")


@_check("coupling: input sign flips route through, volume unchanged")
def _coupling_flip_equivariance():
    rng = np.random.default_rng(14)
    stack = _random_crystal_stack(seed=15)
    n_mol = stack.n_mol()
    state = cp.FlowState(
        x0=value_of(stack.base.sites) + 0.1 * rng.standard_normal((64, n_mol, 3)),
        q=geom.random_unit_quaternion(rng, (64, n_mol)),
    )
    out, ld = stack.forward(state)
    signs = np.where(rng.random((64, n_mol)) < 0.5, -1.0, 1.0)
    out2, ld2 = stack.forward(cp.FlowState(x0=state.x0, q=state.q * signs[..., None]))
    _require(
        np.abs(value_of(out2.q) - value_of(out.q) * signs[..., None]).max() < 1e-12,
        "sign flips do not route through the stack",
    )
    _require(np.abs(value_of(out2.x0) - value_of(out.x0)).max() < 1e-12, "positions moved")
    _require(np.abs(value_of(ld2) - value_of(ld)).max() < 1e-12, "volume changed under flips")


@_check("coupling: the anchored molecule's position passes through bit-identically")
def _coupling_fixed_molecule():
    rng = np.random.default_rng(16)
    stack = _random_crystal_stack(seed=17)
    fixed = stack.fixed_molecule
    n_mol = stack.n_mol()
    x0 = value_of(stack.base.sites) + 0.1 * rng.standard_normal((32, n_mol, 3))
    state = cp.FlowState(x0=x0, q=geom.random_unit_quaternion(rng, (32, n_mol)))
    out, _ = stack.forward(state)
    _require(
        np.array_equal(value_of(out.x0)[:, fixed], x0[:, fixed]),
        "anchored molecule position changed",
    )


# ---------------------------------------------------------------------------
# targets


@_check("targets: symmetry rotations conserve the centered field but not the offset one")
def _targets_negative_control():
    rng = np.random.default_rng(18)
    tpl = targets.regular_tetra_template()
    body = geom.pose_apply(np.zeros(3), geom.random_unit_quaternion(rng), tpl)
    verts = {(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)}
    mats = []
    for perm in itertools.permutations(range(3)):
        for sgn in itertools.product([1, -1], repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, sgn)):
                m[row, col] = s
            if abs(np.linalg.det(m) - 1.0) > 1e-12:
                continue
            if {tuple(int(x) for x in m @ np.array(v)) for v in verts} == verts:
                mats.append(m)
    _require(len(mats) == 12, "expected the 12 rotations of the tetrahedral group")
    centered = targets.TetraField(center=np.zeros(3), coupling=1.0)
    offset = targets.default_tetra_field()
    u_cen = float(targets.tetra_energy(body, centered))
    u_off = float(targets.tetra_energy(body, offset))
    worst_cen, best_off = 0.0, 0.0
    for m in mats:
        rotated = body @ m.T
        worst_cen = max(worst_cen, abs(float(targets.tetra_energy(rotated, centered)) - u_cen))
        best_off = max(best_off, abs(float(targets.tetra_energy(rotated, offset)) - u_off))
    _require(worst_cen < 1e-12 * max(1.0, abs(u_cen)), "centered field broke symmetry")
    _require(best_off > 1e-3, "offset field failed to separate the modes")


@_check("targets: crystal energy ignores quaternion sign flips")
def _targets_crystal_flip():
    rng = np.random.default_rng(19)
    model = targets.default_toy_crystal()
    x0 = model.sites + 0.1 * rng.standard_normal(model.sites.shape)
    q = geom.random_unit_quaternion(rng, model.n)
    e = targets.crystal_energy(geom.PoseSet(x0, q), model)
    signs = np.where(rng.random(model.n) < 0.5, -1.0, 1.0)
    e2 = targets.crystal_energy(geom.PoseSet(x0, q * signs[:, None]), model)
    _require(abs(e - e2) < 1e-10 * max(1.0, abs(e)), "sign flip changed the energy")


@_check("targets: reduced energy times temperature is state-point independent")
def _targets_reduced_units():
    rng = np.random.default_rng(20)
    model = targets.default_toy_crystal()
    ens = targets.EnergyEnsemble(
        energy=lambda poses: targets.crystal_energy(poses, model),
        temperatures=(2.5, 1.7, 1.0, 0.5),
    )
    poses = geom.PoseSet(
        model.sites + 0.05 * rng.standard_normal(model.sites.shape),
        geom.random_unit_quaternion(rng, model.n),
    )
    vals = [targets.ensemble_u(ens, poses, a) * t for a, t in enumerate(ens.temperatures)]
    _require(np.ptp(vals) < 1e-10 * max(1.0, abs(vals[0])), "u_alpha * T_alpha varies")


# ---------------------------------------------------------------------------
# sampling


@_check("sampling: orientation chain reproduces the closed-form mixture law (1e5 frames)")
def _sampling_two_sample():
    mu = np.array([0.3, -0.5, 0.8, 0.1])
    mu /= np.linalg.norm(mu)
    kappa = 4.0
    f = lambda q: -np.log(np.cosh(kappa * (q @ mu)))
    cfg = sampling.McmcConfig(
        n_frames=100_000, sweeps_per_frame=1, dr=0.65, seed=21, freeze_translation=True
    )
    init = geom.PoseSet(np.zeros((1, 3)), np.array([[0.0, 0.0, 0.0, 1.0]]))
    res = sampling.mcmc_run(sampling.orientation_potential(f), init, cfg)
    t_chain = res.q[:, 0, :] @ mu
    params = s3flows.SymVMFParams(mu=mu, kappa=kappa)
    t_direct = s3flows.svmf_sample(params, np.random.default_rng(22), 100_000) @ mu
    stat = ks_2samp(t_chain[::10], t_direct[::10])
    _require(stat.pvalue > 1e-3, f"chain/direct sampler disagree (p={stat.pvalue:.2e})")


@_check("sampling: default proposal widths give moderate crystal acceptance")
def _sampling_acceptance_window():
    model = targets.default_toy_crystal()
    u = sampling.boltzmann_potential(lambda poses: targets.crystal_energy(poses, model), 2.5)
    init = geom.PoseSet(
        model.sites.copy(), np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (model.n, 1))
    )
    res = sampling.mcmc_run(u, init, sampling.McmcConfig(n_frames=300, seed=23))
    _require(
        0.2 <= res.acceptance_rate <= 0.6,
        f"acceptance {res.acceptance_rate:.3f} outside [0.2, 0.6]",
    )


@_check("sampling: dataset files are byte-identical across reruns")
def _sampling_dataset_bytes():
    import tempfile
    from pathlib import Path

    def build(path):
        model = targets.default_toy_crystal()
        u = sampling.boltzmann_potential(
            lambda poses: targets.crystal_energy(poses, model), 2.5
        )
        init = geom.PoseSet(
            model.sites.copy(), np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (model.n, 1))
        )
        res = sampling.mcmc_run(u, init, sampling.McmcConfig(n_frames=40, seed=24))
        ds = sampling.dataset_from_result(res, model.template, temperature=2.5)
        sampling.dataset_write(ds, path)
        return Path(path).read_bytes()

    with tempfile.TemporaryDirectory() as tmp:
        a = build(str(Path(tmp) / "a.txt"))
        b = build(str(Path(tmp) / "b.txt"))
    _require(a == b, "dataset serialization is not deterministic")


# ---------------------------------------------------------------------------
# estimators


@_check("estimators: exponential average never beats the mean work (Jensen)")
def _estimators_jensen():
    rng = np.random.default_rng(25)
    for _ in range(50):
        w = rng.standard_normal(rng.integers(2, 200)) * rng.uniform(0.1, 3.0)
        _require(
            float(np.mean(w)) - est.lfep_estimate(w).delta_f > -1e-12,
            "estimate exceeded the mean work",
        )


@_check("estimators: two-state solver matches an independent bisection (1e-8)")
def _estimators_bar_bisect():
    rng = np.random.default_rng(26)
    x0 = rng.normal(0.0, 1.0, 4_000)
    x1 = rng.normal(1.0, 1.4, 4_000)
    u_a = lambda x: 0.5 * x**2
    u_b = lambda x: 0.5 * ((x - 1.0) / 1.4) ** 2 + np.log(1.4)
    u_kn = np.stack([np.concatenate([u_a(x0), u_a(x1)]), np.concatenate([u_b(x0), u_b(x1)])])
    f = est.mbar_solve(u_kn, np.array([4_000, 4_000]))
    w_f = u_b(x0) - u_a(x0)
    w_r = u_a(x1) - u_b(x1)

    def imbalance(c):
        return float(
            np.sum(1.0 / (1.0 + np.exp(w_f - c))) - np.sum(1.0 / (1.0 + np.exp(w_r + c)))
        )

    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if imbalance(mid) > 0:
            hi = mid
        else:
            lo = mid
    _require(abs(f[1] - 0.5 * (lo + hi)) < 1e-8, "solver disagrees with bisection")


@_check("estimators: lfep and mbar agree within 2 sigma on a Gaussian ladder")
def _estimators_lfep_vs_mbar():
    rng = np.random.default_rng(27)
    n = 20_000
    u_a = lambda x: 0.5 * x**2
    u_b = lambda x: 0.5 * x**2 / 0.64 + np.log(0.8)
    x0 = rng.normal(0.0, 1.0, n)
    x1 = rng.normal(0.0, 0.8, n)
    work = u_b(x0) - u_a(x0)
    lfep_df = est.lfep_estimate(work).delta_f
    _, lfep_sigma = est.bootstrap(
        lambda idx: est.lfep_estimate(work[idx]).delta_f, n, b=16, seed=1
    )
    sizes = np.array([n, n])

    def mbar_df_of(i0, i1):
        u_kn = np.stack(
            [
                np.concatenate([u_a(x0[i0]), u_a(x1[i1])]),
                np.concatenate([u_b(x0[i0]), u_b(x1[i1])]),
            ]
        )
        return est.mbar_solve(u_kn, sizes)[1]

    every = np.arange(n)
    mbar_df = mbar_df_of(every, every)
    _, mbar_sigma = est.bootstrap(lambda idx: mbar_df_of(idx[0], idx[1]), [n, n], b=16, seed=2)
    gap = abs(lfep_df - mbar_df)
    bound = 2.0 * np.hypot(lfep_sigma, mbar_sigma)
    _require(gap <= max(bound, 1e-3), f"lfep {lfep_df:.4f} vs mbar {mbar_df:.4f} (2s {bound:.4f})")


@_check("estimators: kish size stays in [1, n] and is n only for flat weights")
def _estimators_kish():
    rng = np.random.default_rng(28)
    for _ in range(50):
        n = int(rng.integers(2, 300))
        lw = rng.standard_normal(n) * rng.uniform(0.0, 4.0)
        ess = est.kish_ess(lw)
        _require(1.0 - 1e-12 <= ess <= n + 1e-12, "kish size out of range")
    _require(abs(est.kish_ess(np.full(17, 3.3)) - 17.0) < 1e-12, "flat weights must give n")
    _require(est.kish_ess(np.array([0.0, 50.0])) < 1.0 + 1e-9, "one dominant weight must give 1")


# ---------------------------------------------------------------------------
# training and gradients


def _fd_subset(loss_fn, params, picks, h=1e-5):
    """Relative error of tape gradients against central differences on chosen coordinates."""
    pv = {k: ad.Var(v.copy()) for k, v in params.items()}
    loss = loss_fn(pv)
    loss.backward()
    worst = 0.0
    for key, flat_index in picks:
        bump = {k: v.copy() for k, v in params.items()}
        bump[key].flat[flat_index] += h
        hi = float(value_of(loss_fn({k: ad.Var(v) for k, v in bump.items()})))
        bump[key].flat[flat_index] -= 2 * h
        lo = float(value_of(loss_fn({k: ad.Var(v) for k, v in bump.items()})))
        fd = (hi - lo) / (2.0 * h)
        got = float(np.asarray(pv[key].grad).flat[flat_index])
        worst = max(worst, abs(got - fd) / max(1.0, abs(fd)))
    return worst


def _pick_coords(params, rng, per_family=2):
    picks = []
    for key, v in params.items():
        if v.size == 0:
            continue
        take = min(per_family, v.size)
        for idx in rng.choice(v.size, size=take, replace=False):
            picks.append((key, int(idx)))
    rng.shuffle(picks)
    return picks[:14]


@_check("train: loss gradients match central differences (1e-4)")
def _train_fd_gradients():
    rng = np.random.default_rng(29)
    stack = _random_tetra_stack("cg", seed=30)
    q = geom.random_unit_quaternion(rng, 6)

    def nll(pv):
        return train.nll_loss(stack, q, np.random.default_rng(7), pv=pv)

    picks = _pick_coords(stack.params, rng)
    worst = _fd_subset(nll, stack.params, picks)
    _require(worst < 1e-4, f"nll gradient relative error {worst:.2e}")

    crystal = _random_crystal_stack(seed=31)
    model = targets.default_toy_crystal()
    n_mol = crystal.n_mol()
    state = cp.FlowState(
        x0=value_of(crystal.base.sites) + 0.05 * rng.standard_normal((6, n_mol, 3)),
        q=geom.random_unit_quaternion(rng, (6, n_mol)),
    )
    u_t = lambda s: targets.crystal_energy_xq(s.x0, s.q, model)
    log_p0 = np.zeros(6)

    def rkl(pv):
        return train.rkl_loss(crystal, state, u_t, log_p0, pv=pv)

    picks = _pick_coords(crystal.params, rng)
    worst = _fd_subset(rkl, crystal.params, picks)
    _require(worst < 1e-4, f"rkl gradient relative error {worst:.2e}")


@_check("train: gradients are bit-identical across repeated evaluation")
def _train_grad_determinism():
    stack = _random_tetra_stack("moebius", seed=32)
    q = geom.random_unit_quaternion(np.random.default_rng(33), 8)

    def grads():
        pv = stack.var_view()
        loss = train.nll_loss(stack, q, np.random.default_rng(3), pv=pv)
        loss.backward()
        return {k: np.asarray(v.grad).copy() for k, v in pv.items() if v.grad is not None}

    a, b = grads(), grads()
    _require(set(a) == set(b), "gradient key sets differ")
    for k in a:
        _require(np.array_equal(a[k], b[k]), f"gradient {k} differs across reruns")


@_check("train: identical seeds give identical trained parameters")
def _train_reproducible():
    data = geom.random_unit_quaternion(np.random.default_rng(34), 64)

    def final_params():
        stack = cp.build_tetra_stack(targets.tetra_template(), rotation="moebius", hidden=16, seed=35)
        train.train_tetra_nll(stack, data, steps=8, batch_size=8, seed=36)
        return stack.params

    a, b = final_params(), final_params()
    for k in a:
        _require(np.array_equal(a[k], b[k]), f"parameter {k} differs between reruns")


@_check("train: reverse-kl batch loss equals the mean generalized work (1e-10)")
def _train_rkl_identity():
    rng = np.random.default_rng(37)
    crystal = _random_crystal_stack(seed=38)
    model = targets.default_toy_crystal()
    n_mol = crystal.n_mol()
    x0 = value_of(crystal.base.sites) + 0.05 * rng.standard_normal((16, n_mol, 3))
    q = geom.random_unit_quaternion(rng, (16, n_mol))
    state = cp.FlowState(x0=x0, q=q)
    u_base = lambda s: ad.mul(targets.crystal_energy_xq(s.x0, s.q, model), 1.0 / 2.5)
    u_target = lambda s: ad.mul(targets.crystal_energy_xq(s.x0, s.q, model), 1.0 / 1.0)
    log_p0 = -value_of(u_base(state))
    loss = float(value_of(train.rkl_loss(crystal, state, u_target, log_p0)))
    works = train.crystal_work(crystal, x0, q, u_base, u_target)
    _require(abs(loss - float(np.mean(works))) < 1e-10, "loss is not the mean work")


def run_checks(quiet=False, names=None):
    """Run every registered invariant; returns (results, failures).

    `results` is a list of (name, seconds, error-or-None); `failures` the
    subset with errors. `names` filters by substring when given.
    """
    results = []
    for name, fn in _REGISTRY:
        if names and not any(s in name for s in names):
            continue
        t0 = time.time()
        err = None
        try:
            fn()
        except Exception as exc:  # checks communicate through exceptions
            err = f"{type(exc).__name__}: {exc}"
        dt = time.time() - t0
        results.append((name, dt, err))
        if not quiet:
            mark = "pass" if err is None else "FAIL"
            print(f"{mark}  {name}  ({dt:.1f}s)", flush=True)
            if err is not None:
                print(f"      {err}", flush=True)
    failures = [r for r in results if r[2] is not None]
    return results, failures
