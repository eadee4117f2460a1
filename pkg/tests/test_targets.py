import itertools

import numpy as np
import pytest

from rigidflows import autodiff as ad
from rigidflows import targets
from rigidflows.errors import ValidationError
from rigidflows.geom import PoseSet, pose_apply, quat_to_rotmat, random_unit_quaternion, rotate_point


def crystal_energy_oracle(x0, q, model):
    # deliberately independent route: rotation matrices + scalar double loops
    n, k = model.n, model.template.n_beads
    beads = []
    for i in range(n):
        r = quat_to_rotmat(q[i])
        beads.append([x0[i] + r @ model.template.beads[a] for a in range(k)])
    sc = model.sigma**2 / (model.cutoff**2 + model.softening**2)
    e = 0.0
    for i in range(n):
        d = x0[i] - model.sites[i]
        e += model.tether_k * float(d @ d)
    for i in range(n):
        for j in range(i + 1, n):
            for a in range(k):
                for b in range(k):
                    diff = beads[i][a] - beads[j][b]
                    r2 = float(diff @ diff)
                    if r2 >= model.cutoff**2:
                        continue
                    s = model.sigma**2 / (r2 + model.softening**2)
                    lj = 4.0 * model.eps * (s**6 - s**3)
                    lj_c = 4.0 * model.eps * (sc**6 - sc**3)
                    qq = model.charges[a] * model.charges[b]
                    coul = qq / np.sqrt(r2 + model.softening**2)
                    coul_c = qq / np.sqrt(model.cutoff**2 + model.softening**2)
                    e += lj + coul - lj_c - coul_c
    return e


def signed_permutation_rotations():
    """All det(+1) signed permutation matrices preserving the alternated-cube vertex set."""
    verts = {(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)}
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product([1, -1], repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            if abs(np.linalg.det(m) - 1.0) > 1e-12:
                continue
            if {tuple(int(x) for x in m @ np.array(v)) for v in verts} == verts:
                mats.append(m)
    return mats


class TestTetra:
    def test_zero_at_field_center(self):
        field = targets.default_tetra_field()
        body = np.tile(field.center, (5, 1))
        assert targets.tetra_energy(body, field) == 0.0

    def test_single_unit_displacement_gives_coupling(self):
        field = targets.default_tetra_field()
        body = np.tile(field.center, (5, 1))
        body[2] += np.array([1.0, 0.0, 0.0])
        assert targets.tetra_energy(body, field) == pytest.approx(136.98630, abs=1e-12)

    def test_quartic_homogeneity(self):
        rng = np.random.default_rng(3)
        field = targets.default_tetra_field()
        disp = rng.normal(size=(5, 3))
        u1 = targets.tetra_energy(field.center + disp, field)
        u2 = targets.tetra_energy(field.center + 2.0 * disp, field)
        assert u2 == pytest.approx(16.0 * u1, rel=1e-12)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(4)
        field = targets.default_tetra_field()
        bodies = rng.normal(scale=0.1, size=(7, 5, 3))
        batched = targets.tetra_energy(bodies, field)
        singles = np.array([targets.tetra_energy(b, field) for b in bodies])
        np.testing.assert_allclose(batched, singles, rtol=1e-14)

    def test_energy_of_default_pose_is_small(self):
        # the satellites sit within reach of the attraction point, so the
        # orientation landscape varies by order one
        rng = np.random.default_rng(5)
        tpl = targets.tetra_template()
        q = random_unit_quaternion(rng, (256,))
        us = np.array(
            [targets.tetra_energy(pose_apply(np.zeros(3), qi, tpl)) for qi in q]
        )
        assert us.min() > 0.0
        assert 0.1 < us.max() - us.min() < 10.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        tpl = targets.tetra_template()
        q0 = random_unit_quaternion(rng)

        def f(qv):
            beads = rotate_point(ad.reshape(qv, (1, 4)), tpl.beads)
            return targets.tetra_energy(beads)

        rel = ad.finite_diff_check(f, [q0])
        assert rel < 1e-7

    def test_axis_symmetry_control(self):
        # the regular body posed arbitrarily: its symmetry rotations, applied in
        # the lab frame, permute the satellites; the energy follows suit only
        # for a centered field
        rng = np.random.default_rng(7)
        tpl = targets.regular_tetra_template()
        body = pose_apply(np.zeros(3), random_unit_quaternion(rng), tpl)
        centered = targets.TetraField(center=np.zeros(3), coupling=136.98630)
        offset = targets.default_tetra_field()
        mats = signed_permutation_rotations()
        assert len(mats) == 12
        u_cen = targets.tetra_energy(body, centered)
        changes = []
        for m in mats:
            rotated = body @ m.T
            assert targets.tetra_energy(rotated, centered) == pytest.approx(u_cen, rel=1e-12)
            changes.append(abs(targets.tetra_energy(rotated, offset) - targets.tetra_energy(body, offset)))
        assert max(changes) > 1e-3

    def test_field_validation(self):
        with pytest.raises(ValidationError):
            targets.TetraField(center=np.zeros(3), coupling=0.0)
        with pytest.raises(ValidationError):
            targets.TetraField(center=np.zeros(2), coupling=1.0)


class TestToyCrystal:
    def test_rest_state_of_sparse_lattice_is_zero(self):
        model = targets.ToyCrystal(sites=targets.sc_lattice(2, 12.0), template=targets.bent_template())
        q = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (model.n, 1))
        poses = PoseSet(model.sites.copy(), q)
        assert targets.crystal_energy(poses, model) == 0.0

    def test_matches_scalar_oracle_on_random_poses(self):
        rng = np.random.default_rng(11)
        model = targets.default_toy_crystal()
        for _ in range(5):
            x0 = model.sites + rng.normal(scale=0.4, size=(model.n, 3))
            q = random_unit_quaternion(rng, (model.n,))
            got = targets.crystal_energy(PoseSet(x0, q), model)
            want = crystal_energy_oracle(x0, q, model)
            assert got == pytest.approx(want, rel=1e-12)

    def test_two_molecule_translation_matches_oracle(self):
        model = targets.ToyCrystal(
            sites=np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]),
            template=targets.bent_template(),
        )
        q = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (2, 1))
        for d in np.linspace(-0.8, 0.8, 9):
            x0 = model.sites.copy()
            x0[1, 0] += d
            got = targets.crystal_energy(PoseSet(x0, q), model)
            want = crystal_energy_oracle(x0, q, model)
            assert got == pytest.approx(want, rel=1e-12)
            if d != 0.0:
                assert got != 0.0

    def test_quaternion_flip_invariance_is_exact(self):
        rng = np.random.default_rng(12)
        model = targets.default_toy_crystal()
        x0 = model.sites + rng.normal(scale=0.3, size=(model.n, 3))
        q = random_unit_quaternion(rng, (model.n,))
        e = targets.crystal_energy(PoseSet(x0, q), model)
        for _ in range(8):
            flips = np.where(rng.random(model.n) < 0.5, -1.0, 1.0)
            assert targets.crystal_energy(PoseSet(x0, q * flips[:, None]), model) == e

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(13)
        model = targets.default_toy_crystal()
        x0 = model.sites + rng.normal(scale=0.3, size=(model.n, 3))
        q = random_unit_quaternion(rng, (model.n,))
        e = targets.crystal_energy(PoseSet(x0, q), model)
        perm = rng.permutation(model.n)
        relabeled = targets.ToyCrystal(sites=model.sites[perm], template=model.template)
        e_perm = targets.crystal_energy(PoseSet(x0[perm], q[perm]), relabeled)
        assert e_perm == pytest.approx(e, rel=1e-12)

    def test_pair_term_continuous_at_cutoff(self):
        model = targets.ToyCrystal(
            sites=np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]),
            template=targets.bent_template(),
        )
        q = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (2, 1))
        # move the second molecule so the closest bead pair straddles the cutoff
        energies = []
        for gap in (model.cutoff - 1e-7, model.cutoff + 1e-7):
            x0 = np.array([[0.0, 50.0, 0.0], [gap, 50.0, 0.0]])
            # tether energy dominates here; subtract it to isolate pair terms
            teth = sum(
                model.tether_k * float((x0[i] - model.sites[i]) @ (x0[i] - model.sites[i]))
                for i in range(2)
            )
            energies.append(targets.crystal_energy(PoseSet(x0, q), model) - teth)
        assert abs(energies[0] - energies[1]) < 1e-6

    def test_batched_matches_single(self):
        rng = np.random.default_rng(14)
        model = targets.default_toy_crystal()
        x0 = model.sites + rng.normal(scale=0.3, size=(4, model.n, 3))
        q = random_unit_quaternion(rng, (4, model.n))
        batched = targets.crystal_energy_xq(x0, q, model)
        singles = np.array(
            [targets.crystal_energy(PoseSet(x0[i], q[i]), model) for i in range(4)]
        )
        np.testing.assert_allclose(batched, singles, rtol=1e-13)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        model = targets.default_toy_crystal()
        x0 = model.sites + rng.normal(scale=0.2, size=(model.n, 3))
        q = random_unit_quaternion(rng, (model.n,))

        def f(xv, qv):
            return targets.crystal_energy_xq(xv, qv, model)

        rel = ad.finite_diff_check(f, [x0, q])
        assert rel < 1e-6

    def test_validation(self):
        with pytest.raises(ValidationError):
            targets.ToyCrystal(sites=np.zeros((1, 3)), template=targets.bent_template())
        with pytest.raises(ValidationError):
            targets.ToyCrystal(
                sites=targets.sc_lattice(2, 3.0),
                template=targets.bent_template(),
                cutoff=4.5,
            )
        with pytest.raises(ValidationError):
            targets.ToyCrystal(
                sites=targets.sc_lattice(2, 3.0),
                template=targets.bent_template(),
                charges=(-0.8, 0.4),
            )

    def test_soft_core_keeps_coincident_beads_finite(self):
        model = targets.ToyCrystal(
            sites=np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]),
            template=targets.bent_template(),
        )
        q = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (2, 1))
        x0 = np.zeros((2, 3))  # both molecules stacked on the origin
        assert np.isfinite(targets.crystal_energy(PoseSet(x0, q), model))


class TestEnsemble:
    def test_reduced_units(self):
        ens = targets.EnergyEnsemble(energy=lambda x: 10.0, temperatures=(1.0, 0.5))
        assert targets.ensemble_u(ens, None, 0) == 10.0
        assert targets.ensemble_u(ens, None, 1) == 20.0

    def test_product_with_temperature_is_rung_independent(self):
        rng = np.random.default_rng(16)
        model = targets.default_toy_crystal()
        temps = targets.temperature_ladder(2.5, 1.0, 5)
        ens = targets.EnergyEnsemble(
            energy=lambda p: targets.crystal_energy(p, model), temperatures=temps
        )
        poses = PoseSet(
            model.sites + rng.normal(scale=0.2, size=(model.n, 3)),
            random_unit_quaternion(rng, (model.n,)),
        )
        vals = [targets.ensemble_u(ens, poses, a) * temps[a] for a in range(len(temps))]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12)

    def test_geometric_ladder(self):
        temps = targets.temperature_ladder(2.5, 1.0, 5)
        assert temps[0] == 2.5
        assert temps[-1] == pytest.approx(1.0, rel=1e-15)
        ratios = [temps[i + 1] / temps[i] for i in range(4)]
        np.testing.assert_allclose(ratios, (1.0 / 2.5) ** 0.25, rtol=1e-12)

    def test_validation(self):
        with pytest.raises(ValidationError):
            targets.EnergyEnsemble(energy=lambda x: 0.0, temperatures=(1.0, -1.0))
        with pytest.raises(ValidationError):
            targets.temperature_ladder(2.5, 1.0, 1)
