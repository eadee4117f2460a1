"""Schema resolution: defaults, overrides, and rejection with dotted key paths."""

import json

import pytest

import rigidflows.config as cfg
from rigidflows.errors import ValidationError


class TestDefaults:
    def test_empty_document_resolves_to_full_defaults(self):
        out = cfg.default_config()
        assert out["version"] == 1
        assert out["experiment"] == "tetra"
        assert out["tetra"]["train"] == {"steps": 5000, "batch_size": 32, "lr": 5e-4}
        assert out["crystal"]["train"]["epochs"] == 10
        assert out["crystal"]["target"]["charges"] == [-0.8, 0.4, 0.4]
        assert out["tetra"]["sampler"]["burn_in"] is None

    def test_overrides_are_echoed_and_defaults_filled_around_them(self):
        out = cfg.resolve_config({"experiment": "crystal", "tetra": {"train": {"steps": 50_000}}})
        assert out["experiment"] == "crystal"
        assert out["tetra"]["train"]["steps"] == 50_000
        assert out["tetra"]["train"]["lr"] == 5e-4
        assert out["crystal"]["sampler"]["dt"] == 0.4

    def test_resolved_lists_are_private_copies(self):
        first = cfg.default_config()
        first["crystal"]["target"]["charges"].append(9.0)
        assert cfg.default_config()["crystal"]["target"]["charges"] == [-0.8, 0.4, 0.4]

    def test_integer_is_accepted_where_a_float_is_expected(self):
        out = cfg.resolve_config({"tetra": {"target": {"temperature": 1}}})
        assert out["tetra"]["target"]["temperature"] == 1.0
        assert isinstance(out["tetra"]["target"]["temperature"], float)


class TestRejection:
    def test_unknown_key_reports_its_dotted_path(self):
        with pytest.raises(ValidationError, match=r"tetra\.sampler\.dq"):
            cfg.resolve_config({"tetra": {"sampler": {"dq": 0.1}}})

    def test_unknown_top_level_key(self):
        with pytest.raises(ValidationError, match="unknown config key"):
            cfg.resolve_config({"experiments": "tetra"})

    def test_group_must_be_an_object(self):
        with pytest.raises(ValidationError, match="tetra.sampler"):
            cfg.resolve_config({"tetra": {"sampler": 5}})

    def test_wrong_types_are_rejected_with_paths(self):
        for doc, path in [
            ({"seed": 1.5}, "seed"),
            ({"seed": True}, "seed"),
            ({"tetra": {"train": {"lr": "fast"}}}, r"tetra\.train\.lr"),
            ({"crystal": {"target": {"charges": [0.1, "x"]}}}, r"crystal\.target\.charges"),
            ({"experiment": 3}, "experiment"),
        ]:
            with pytest.raises(ValidationError, match=path):
                cfg.resolve_config(doc)

    def test_choices_and_bounds(self):
        with pytest.raises(ValidationError, match="must be one of"):
            cfg.resolve_config({"experiment": "ice"})
        with pytest.raises(ValidationError, match="must be one of"):
            cfg.resolve_config({"tetra": {"flow": {"rotation": "spline"}}})
        with pytest.raises(ValidationError, match="at least"):
            cfg.resolve_config({"seed": -1})
        with pytest.raises(ValidationError, match="at least"):
            cfg.resolve_config({"crystal": {"target": {"ladder_rungs": 1}}})

    def test_null_only_where_optional(self):
        out = cfg.resolve_config({"tetra": {"sampler": {"burn_in": None}}})
        assert out["tetra"]["sampler"]["burn_in"] is None
        with pytest.raises(ValidationError, match="null"):
            cfg.resolve_config({"tetra": {"train": {"steps": None}}})

    def test_version_must_match(self):
        with pytest.raises(ValidationError, match="version"):
            cfg.resolve_config({"version": 2})


class TestFiles:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 7, "tetra": {"flow": {"rotation": "moebius"}}}))
        out = cfg.load_config(path)
        assert out["seed"] == 7
        assert out["tetra"]["flow"]["rotation"] == "moebius"

    def test_unreadable_and_malformed_files(self, tmp_path):
        with pytest.raises(ValidationError, match="cannot read"):
            cfg.load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            cfg.load_config(bad)
        arr = tmp_path / "arr.json"
        arr.write_text("[1, 2]")
        with pytest.raises(ValidationError, match="top level"):
            cfg.load_config(arr)

    def test_canonical_dump_is_deterministic_and_loads_back(self):
        resolved = cfg.resolve_config({"seed": 3})
        text = cfg.dumps_config(resolved)
        assert text == cfg.dumps_config(cfg.resolve_config({"seed": 3}))
        assert json.loads(text) == resolved
        assert text.endswith("\n")
