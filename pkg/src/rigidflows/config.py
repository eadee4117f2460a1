"""Versioned run-configuration schema for the command-line interface.

A configuration is one JSON document. Every field has a typed default in
the schema below; resolving a user document fills all defaults in, so the
dictionary echoed into run metadata always shows the complete effective
configuration. Unknown keys are rejected with their dotted path. Semantic
validation beyond types and simple bounds (for example proposal widths or
cutoff geometry) stays with the constructors that consume the values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ValidationError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class Field:
    """One typed leaf: a default value plus the checks applied to overrides."""

    default: object
    kind: str  # int | float | bool | str | floats | opt_int | opt_float
    choices: tuple = ()
    minimum: float | None = None


SCHEMA = {
    "version": Field(CONFIG_VERSION, "int"),
    "experiment": Field("tetra", "str", choices=("tetra", "crystal")),
    "seed": Field(0, "int", minimum=0),
    "out": Field("run-out", "str"),
    "tetra": {
        "target": {
            "center": Field([0.09, -0.073, 0.0], "floats"),
            "coupling": Field(136.98630, "float", minimum=0.0),
            "temperature": Field(0.0125, "float", minimum=0.0),
        },
        "sampler": {
            "n_frames": Field(10_000, "int", minimum=1),
            "sweeps_per_frame": Field(5, "int", minimum=1),
            "dr": Field(0.25, "float", minimum=0.0),
            "burn_in": Field(None, "opt_int", minimum=0),
        },
        "flow": {
            "rotation": Field("cg", "str", choices=("moebius", "cg", "affine")),
            "cg_hidden": Field(128, "int", minimum=1),
            "n_reps": Field(2, "int", minimum=1),
            "aux_dim": Field(2, "int", minimum=1),
            "embed_dim": Field(64, "int", minimum=1),
            "hidden": Field(128, "int", minimum=1),
            "rot_bias_scale": Field(None, "opt_float", minimum=0.0),
        },
        "train": {
            "steps": Field(5_000, "int", minimum=1),
            "batch_size": Field(32, "int", minimum=1),
            "lr": Field(5e-4, "float", minimum=0.0),
        },
    },
    "crystal": {
        "target": {
            "n_side": Field(2, "int", minimum=1),
            "spacing": Field(3.0, "float", minimum=0.0),
            "bond": Field(1.0, "float", minimum=0.0),
            "angle_deg": Field(104.5, "float", minimum=0.0),
            "tether_k": Field(5.0, "float", minimum=0.0),
            "eps": Field(0.25, "float", minimum=0.0),
            "sigma": Field(1.0, "float", minimum=0.0),
            "cutoff": Field(4.0, "float", minimum=0.0),
            "softening": Field(0.2, "float", minimum=0.0),
            "charges": Field([-0.8, 0.4, 0.4], "floats"),
            "t_base": Field(2.5, "float", minimum=0.0),
            "t_target": Field(1.0, "float", minimum=0.0),
            "ladder_rungs": Field(5, "int", minimum=2),
        },
        "sampler": {
            "n_frames": Field(2_000, "int", minimum=1),
            "sweeps_per_frame": Field(5, "int", minimum=1),
            "dt": Field(0.4, "float", minimum=0.0),
            "dr": Field(0.65, "float", minimum=0.0),
            "burn_in": Field(None, "opt_int", minimum=0),
        },
        "flow": {
            "n_reps": Field(4, "int", minimum=1),
            "n_blocks": Field(2, "int", minimum=1),
            "base_sigma": Field(0.3, "float", minimum=0.0),
            "disp_scale": Field(1.0, "float", minimum=0.0),
        },
        "train": {
            "epochs": Field(10, "int", minimum=1),
            "steps_per_epoch": Field(1_000, "int", minimum=1),
            "batch_size": Field(32, "int", minimum=1),
            "lr_start": Field(1e-3, "float", minimum=0.0),
            "lr_end": Field(1e-5, "float", minimum=0.0),
        },
        "estimator": {
            "bootstrap": Field(10, "int", minimum=2),
        },
    },
}


def _check_leaf(field: Field, value, path: str):
    kind = field.kind
    if value is None:
        if kind in ("opt_int", "opt_float"):
            return None
        raise ValidationError(f"config key {path}: null is not allowed")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ValidationError(f"config key {path}: expected a boolean")
        return value
    if isinstance(value, bool):  # bool is an int subclass; reject it for numbers
        raise ValidationError(f"config key {path}: expected a number, got a boolean")
    if kind in ("int", "opt_int"):
        if not isinstance(value, int):
            raise ValidationError(f"config key {path}: expected an integer")
        out = value
    elif kind in ("float", "opt_float"):
        if not isinstance(value, (int, float)):
            raise ValidationError(f"config key {path}: expected a number")
        out = float(value)
    elif kind == "str":
        if not isinstance(value, str):
            raise ValidationError(f"config key {path}: expected a string")
        out = value
    elif kind == "floats":
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ValidationError(f"config key {path}: expected a list of numbers")
        out = [float(v) for v in value]
    else:  # pragma: no cover - schema authoring error
        raise AssertionError(f"unknown field kind {kind}")
    if field.choices and out not in field.choices:
        allowed = ", ".join(map(str, field.choices))
        raise ValidationError(f"config key {path}: must be one of {allowed}")
    if field.minimum is not None and not isinstance(out, (str, list)) and out < field.minimum:
        raise ValidationError(f"config key {path}: must be at least {field.minimum}")
    return out


def _resolve_node(schema: dict, user, path: str) -> dict:
    if not isinstance(user, dict):
        raise ValidationError(f"config key {path or '<root>'}: expected an object")
    unknown = sorted(set(user) - set(schema))
    if unknown:
        dotted = ", ".join(f"{path}{k}" if path else k for k in unknown)
        raise ValidationError(f"unknown config key(s): {dotted}")
    out = {}
    for key, node in schema.items():
        child_path = f"{path}{key}" if path else key
        if isinstance(node, dict):
            out[key] = _resolve_node(node, user.get(key, {}), child_path + ".")
        elif key in user:
            out[key] = _check_leaf(node, user[key], child_path)
        else:
            out[key] = node.default if not isinstance(node.default, list) else list(node.default)
    return out


def resolve_config(user: dict | None) -> dict:
    """Validate a user document against the schema and fill in all defaults."""
    resolved = _resolve_node(SCHEMA, user or {}, "")
    if resolved["version"] != CONFIG_VERSION:
        raise ValidationError(f"config key version: this build reads version {CONFIG_VERSION}")
    return resolved


def default_config() -> dict:
    return resolve_config({})


def load_config(path) -> dict:
    """Read and resolve a JSON configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path}: top level must be an object")
    return resolve_config(raw)


def dumps_config(resolved: dict) -> str:
    """Canonical serialization used when echoing the configuration into artifacts."""
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"
