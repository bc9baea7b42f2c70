"""Run configuration: JSON schema with defaults, validation and scene builders."""
from __future__ import annotations

import copy
import json

import jsonschema

from .errors import ConfigError
from .geometry import FermiGrid, MetricField
from .solver import DIRECT_LIMIT, SolverConfig

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


def _d(schema, default):
    out = dict(schema)
    out["default"] = default
    return out


SCHEMA = _obj({
    "seed": _d(_int, 7),
    "stages": _d({"type": "array", "items": {"enum": ["scene", "admissibility", "basis", "solve",
                                                        "measure", "linearize", "spectrum",
                                                        "invert", "sweep"]}},
                 ["scene", "admissibility", "basis", "solve", "measure"]),
    "scene": _d(_obj({
        "n": _d({"type": "integer", "minimum": 1}, 2),
        "base_extent": _d({"oneOf": [_pos, {"type": "array", "items": _pos}]}, 0.5),
        "nodes_per_axis": _d({"oneOf": [{"type": "integer", "minimum": 3},
                                        {"type": "array", "items": {"type": "integer", "minimum": 3}}]}, 33),
        "tube_half_width": _d(_pos, 0.5),
        "t_nodes": _d({"type": "integer", "minimum": 3}, 9),
        "region_radius": _d(_pos, 0.2),
        "metric": _d(_obj({
            "preset": _d({"enum": ["euclidean", "warped", "conformal-bump"]}, "euclidean"),
            "params": _d({"type": "object"}, {}),
        }), {}),
    }), {}),
    "solver": _d(_obj({
        "tol_newton": _d(_pos, 1e-10),
        "max_iter": _d({"type": "integer", "minimum": 1}, 30),
        "min_step": _d(_pos, 2.0**-20),
        "armijo": _d(_pos, 1e-4),
        "tol_lin": _d(_pos, 1e-10),
        "direct_limit": _d({"type": "integer", "minimum": 1}, DIRECT_LIMIT),
    }), {}),
    "admissibility": _d(_obj({
        "margin": _d(_pos, 1e-2),
        "shrink_factor": _d({"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}, 0.95),
        "track": _d({"type": "integer", "minimum": 1}, 3),
        "max_steps": _d({"type": "integer", "minimum": 0}, 200),
    }), {}),
    "basis": _d(_obj({
        "seed": _d({"type": ["integer", "null"]}, None),
        "pool_size": _d({"type": "integer", "minimum": 1}, 24),
        "delta_fraction": _d(_pos, 0.05),
        "separation_factor": _d(_pos, 2.0),
        "exhaustive_separation_nodes": _d({"type": "integer", "minimum": 1}, 10_000),
    }), {}),
    "boundary": _d(_obj({
        "z": _d({"type": ["array", "null"], "items": _num}, None),
    }), {}),
    "sampling": _d(_obj({
        "count": _d({"type": ["integer", "null"], "minimum": 1}, None),
        "oversampling": _d(_pos, 4),
        "seed": _d({"type": ["integer", "null"]}, None),
        "include_origin": _d({"type": "boolean"}, True),
    }), {}),
    "perturbation": _d(_obj({
        "center": _d({"type": "array", "items": _num}, [0.05, -0.05, 0.01]),
        "amplitude": _d(_num, 1.0),
        "width": _d(_pos, 0.15),
    }), {}),
    "family": _d(_obj({
        "region_center": _d({"type": "array", "items": _num}, [0.0, 0.0, 0.0]),
        "region_radius": _d(_pos, 0.3),
        "orientations": _d({"enum": ["orthogonal", "icosahedral"]}, "icosahedral"),
        "offsets": _d({"type": "integer", "minimum": 1}, 5),
        "offset_span": _d(_pos, 0.8),
        "base_half_width": _d(_pos, 0.5),
        "nodes_per_axis": _d({"type": "integer", "minimum": 3}, 33),
        "tube_half_width": _d(_pos, 0.5),
        "t_nodes": _d({"type": "integer", "minimum": 3}, 9),
        "delta_fraction": _d(_pos, 0.6),
        "samples_per_surface": _d({"type": ["integer", "null"], "minimum": 1}, None),
        "oversampling": _d(_pos, 4),
        "pool_size": _d({"type": "integer", "minimum": 1}, 24),
        "theta_cov_deg": _d(_pos, 45.0),
        "dist_cov": _d({"type": ["number", "null"]}, None),
    }), {}),
    "unknown": _d(_obj({
        "per_axis": _d({"type": "integer", "minimum": 1}, 5),
        "width_factor": _d(_pos, 1.5),
        "margin": _d(_num, 0.02),
    }), {}),
    "inversion": _d(_obj({
        "truth_index": _d({"type": ["integer", "null"]}, None),
        "truth_amplitude": _d(_num, 0.02),
        "lam_rel": _d(_pos, 1e-8),
        "noise_level": _d({"type": ["number", "null"]}, None),
        "max_iter": _d({"type": "integer", "minimum": 1}, 10),
        "tol_gn": _d(_pos, 1e-7),
        "min_step": _d(_pos, 2.0**-8),
        "alpha_min": _d(_pos, 0.1),
    }), {}),
    "sweep": _d(_obj({
        "amplitudes": _d({"type": "array", "items": _num, "minItems": 2}, [0.02, 0.01, 0.005, 0.0025]),
    }), {}),
    "spectrum": _d(_obj({"k": _d({"type": "integer", "minimum": 1}, 6)}), {}),
})


def _fill(schema, value):
    if schema.get("type") == "object" and isinstance(value, dict):
        out = dict(value)
        for key, sub in schema.get("properties", {}).items():
            if key not in out and "default" in sub:
                out[key] = copy.deepcopy(sub["default"])
            if key in out:
                out[key] = _fill(sub, out[key])
        return out
    return value


def defaults():
    return _fill(SCHEMA, {})


def validate(cfg):
    """Schema-check ``cfg`` and return it with every default filled in.

    Raises :class:`ConfigError` naming the offending field.
    """
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}", path) from None
    cfg = _fill(SCHEMA, cfg)
    try:
        grid_from(cfg)
        metric_from(cfg)
    except ConfigError as exc:
        field = exc.field or "scene"
        field = field if field.startswith("scene") else f"scene.{field}"
        raise ConfigError(f"{field}: {exc}", field) from None
    return cfg


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "<root>") from None
    return validate(raw)


def grid_from(cfg) -> FermiGrid:
    s = cfg["scene"]
    return FermiGrid(s["n"], s["base_extent"], s["nodes_per_axis"], s["tube_half_width"], s["t_nodes"])


def metric_from(cfg) -> MetricField:
    s = cfg["scene"]
    return MetricField(s["n"], s["metric"]["preset"], dict(s["metric"]["params"]))


def solver_from(cfg) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(tol_newton=s["tol_newton"], max_iter=s["max_iter"], min_step=s["min_step"],
                        armijo=s["armijo"], tol_lin=s["tol_lin"], direct_limit=s["direct_limit"])


def region_from(cfg):
    """Ball ``M`` in Fermi coordinates, centred at the base origin."""
    n = cfg["scene"]["n"]
    return {"center": [0.0] * (n + 1), "radius": cfg["scene"]["region_radius"]}


def family_from(cfg):
    """Keyword dict for :func:`minsurf.inversion.build_family`."""
    fam = dict(cfg["family"])
    fam["n"] = cfg["scene"]["n"]
    fam["seed"] = cfg["seed"]
    adm = cfg["admissibility"]
    fam["admissibility_margin"] = adm["margin"]
    fam["shrink_factor"] = adm["shrink_factor"]
    return fam
