"""Metropolis sampler statistics and the dataset file format."""

import numpy as np
import pytest
from scipy.stats import ks_2samp

from rigidflows import s3flows
from rigidflows import sampling as sp
from rigidflows import targets
from rigidflows.errors import (
    DatasetHeaderError,
    DatasetQuaternionError,
    DatasetRecordError,
    ValidationError,
)
from rigidflows.geom import PoseSet


def identity_poses(n_mol, sites=None):
    q = np.zeros((n_mol, 4))
    q[:, 3] = 1.0
    x0 = np.zeros((n_mol, 3)) if sites is None else np.array(sites, dtype=np.float64)
    return PoseSet(x0=x0, q=q)


def crystal_setup():
    model = targets.default_toy_crystal()
    init = identity_poses(model.sites.shape[0], model.sites)
    return model, init


class TestMetropolis:
    def test_zero_potential_accepts_every_move(self):
        init = identity_poses(3)
        cfg = sp.McmcConfig(n_frames=40, sweeps_per_frame=2, seed=0)
        res = sp.mcmc_run(lambda x0, q: 0.0, init, cfg)
        assert res.acceptance_rate == 1.0
        assert res.x0.shape == (40, 3, 3)
        assert res.q.shape == (40, 3, 4)
        assert np.abs(np.linalg.norm(res.q, axis=-1) - 1.0).max() < 1e-12

    def test_harmonic_well_variance_within_mc_error(self):
        init = identity_poses(1)
        cfg = sp.McmcConfig(n_frames=100000, sweeps_per_frame=1, dt=1.0, dr=0.65, seed=3)
        res = sp.mcmc_run(lambda x0, q: 0.5 * float(np.sum(x0**2)), init, cfg)
        series = (res.x0[:, 0, :] ** 2).mean(axis=1)
        est = float(series.mean())
        # blocking over 50 blocks absorbs the chain autocorrelation
        blocks = series[: (series.size // 50) * 50].reshape(50, -1).mean(axis=1)
        sigma = float(blocks.std(ddof=1) / np.sqrt(blocks.size))
        assert sigma < 0.05
        assert abs(est - 1.0) < 3.0 * sigma

    def test_same_seed_reruns_are_bit_identical(self):
        model, init = crystal_setup()
        u = sp.boltzmann_potential(lambda p: targets.crystal_energy(p, model), 1.5)
        cfg = sp.McmcConfig(n_frames=20, sweeps_per_frame=2, seed=11)
        a = sp.mcmc_run(u, init, cfg)
        b = sp.mcmc_run(u, init, cfg)
        assert np.array_equal(a.x0, b.x0)
        assert np.array_equal(a.q, b.q)
        assert a.acceptance_rate == b.acceptance_rate

    def test_default_widths_give_moderate_crystal_acceptance(self):
        model, init = crystal_setup()
        energy = lambda p: targets.crystal_energy(p, model)
        for temperature in (1.0, 2.5):
            u = sp.boltzmann_potential(energy, temperature)
            cfg = sp.McmcConfig(n_frames=80, sweeps_per_frame=2, seed=1)
            res = sp.mcmc_run(u, init, cfg)
            assert 0.2 <= res.acceptance_rate <= 0.6, temperature

    def test_orientation_chain_matches_direct_vmf_sampler(self):
        mu = np.array([0.3, -0.5, 0.8, 0.1])
        mu /= np.linalg.norm(mu)
        kappa = 4.0
        params = s3flows.SymVMFParams(mu=mu, kappa=kappa)
        # the symmetrized density is proportional to cosh(kappa <q, mu>), so
        # this reduced energy makes the chain target exactly that law
        f = lambda q: -np.log(np.cosh(kappa * (q @ mu)))
        u = sp.orientation_potential(f)
        cfg = sp.McmcConfig(
            n_frames=20000, sweeps_per_frame=5, dr=0.65, seed=7, freeze_translation=True
        )
        res = sp.mcmc_run(u, identity_poses(1), cfg)
        t_chain = res.q[:, 0, :] @ mu
        draws = s3flows.svmf_sample(params, np.random.default_rng(8), 20000)
        t_direct = draws @ mu
        assert ks_2samp(t_chain, t_direct).pvalue > 1e-3

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            sp.McmcConfig(n_frames=0)
        with pytest.raises(ValidationError):
            sp.McmcConfig(n_frames=5, dt=0.0)
        with pytest.raises(ValidationError):
            sp.McmcConfig(n_frames=5, dr=-1.0)
        with pytest.raises(ValidationError):
            sp.McmcConfig(n_frames=5, burn_in=-1)
        # a frozen-translation run never consumes dt
        cfg = sp.McmcConfig(n_frames=5, dt=0.0, freeze_translation=True)
        assert cfg.resolved_burn_in() == 0
        with pytest.raises(ValidationError):
            sp.mcmc_run(lambda x0, q: 0.0, np.zeros((3, 7)), cfg)
        with pytest.raises(ValidationError):
            sp.boltzmann_potential(lambda p: 0.0, 0.0)


def small_dataset(seed=5, n_frames=12):
    model, init = crystal_setup()
    u = sp.boltzmann_potential(lambda p: targets.crystal_energy(p, model), 2.0)
    cfg = sp.McmcConfig(n_frames=n_frames, sweeps_per_frame=1, seed=seed)
    res = sp.mcmc_run(u, init, cfg)
    return sp.dataset_from_result(res, model.template, temperature=2.0)


class TestDatasetFormat:
    def test_write_read_round_trip_is_exact(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "frames.txt"
        sp.dataset_write(ds, path)
        back = sp.dataset_read(path)
        assert np.array_equal(back.x0, ds.x0)
        assert np.array_equal(back.q, ds.q)
        assert back.meta["n_frames"] == ds.n_frames
        assert back.meta["n_mol"] == ds.n_mol
        assert back.meta["temperature"] == 2.0
        assert np.array_equal(np.array(back.meta["template"]), ds.meta["template"])
        path2 = tmp_path / "again.txt"
        sp.dataset_write(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_frame_accessors(self):
        ds = small_dataset()
        frame = ds.frame(3)
        assert isinstance(frame, PoseSet)
        assert np.array_equal(frame.x0, ds.x0[3])
        model = targets.default_toy_crystal()
        beads = ds.bodies(model.template)
        assert beads.shape == (ds.n_frames, ds.n_mol, model.template.n_beads, 3)

    def test_header_errors_are_named(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        with pytest.raises(DatasetHeaderError):
            sp.dataset_read(empty)
        garbage = tmp_path / "garbage.txt"
        garbage.write_text("{ broken json\n")
        with pytest.raises(DatasetHeaderError, match="malformed"):
            sp.dataset_read(garbage)
        foreign = tmp_path / "foreign.txt"
        foreign.write_text('{"format": "other", "version": 1}\n')
        with pytest.raises(DatasetHeaderError):
            sp.dataset_read(foreign)
        wrong_version = tmp_path / "version.txt"
        wrong_version.write_text('{"format": "rigidflows-dataset", "version": 99}\n')
        with pytest.raises(DatasetHeaderError, match="version"):
            sp.dataset_read(wrong_version)

    def test_record_length_errors_name_the_record(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "frames.txt"
        sp.dataset_write(ds, path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3] + " 0.5"
        bad = tmp_path / "extra_field.txt"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetRecordError, match="record 2"):
            sp.dataset_read(bad)
        short = tmp_path / "missing_line.txt"
        short.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetRecordError):
            sp.dataset_read(short)

    def test_unparsable_number_is_a_record_error(self, tmp_path):
        ds = small_dataset()
        path = tmp_path / "frames.txt"
        sp.dataset_write(ds, path)
        lines = path.read_text().splitlines()
        tokens = lines[1].split()
        tokens[0] = "abc"
        lines[1] = " ".join(tokens)
        bad = tmp_path / "notnum.txt"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetRecordError, match="record 0"):
            sp.dataset_read(bad)

    def test_non_unit_quaternion_names_record_and_molecule(self, tmp_path):
        ds = small_dataset()
        ds.q[4, 2] *= 1.0 + 1e-6
        path = tmp_path / "frames.txt"
        sp.dataset_write(ds, path)
        with pytest.raises(DatasetQuaternionError, match="record 4.*molecule 2"):
            sp.dataset_read(path)

    def test_unit_tolerance_boundary(self, tmp_path):
        ds = small_dataset()
        # a perturbation below the tolerance must pass
        ds.q[0, 0] *= 1.0 + 5e-10
        path = tmp_path / "frames.txt"
        sp.dataset_write(ds, path)
        back = sp.dataset_read(path)
        assert back.n_frames == ds.n_frames

    def test_split_is_disjoint_and_covers(self):
        ds = small_dataset()
        head, tail = sp.dataset_split(ds, 0.5)
        assert head.n_frames + tail.n_frames == ds.n_frames
        assert np.array_equal(np.vstack([head.x0, tail.x0]), ds.x0)
        assert head.meta["n_frames"] == head.n_frames
        with pytest.raises(ValidationError):
            sp.dataset_split(ds, 0.0)
        with pytest.raises(ValidationError):
            sp.dataset_split(ds, 1.0)
