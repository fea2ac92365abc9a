"""YAML run configuration: schema, defaults and object construction."""
from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError

_NUM = {"type": "number"}
_NODE_FN = {
    "oneOf": [
        _NUM,
        {
            "type": "object",
            "properties": {k: _NUM for k in ("const", "state", "state2", "time")},
            "additionalProperties": False,
        },
    ]
}
_POWER = {"type": "number", "exclusiveMaximum": 1, "not": {"const": 0}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["market", "utility"],
    "additionalProperties": False,
    "properties": {
        "market": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["binomial", "trinomial", "json"]},
                "steps": {"type": "integer", "minimum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "lambda": _NODE_FN,
                "nu": _NODE_FN,
                "path": {"type": "string"},
                "node_cap": {"type": "integer", "minimum": 1},
            },
            "if": {"properties": {"kind": {"const": "json"}}, "required": ["kind"]},
            "then": {"required": ["path"]},
            "else": {"required": ["steps", "dt", "sigma"]},
        },
        "utility": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["power", "log", "mixed_power"]},
                "p": _POWER,
                "powers": {"type": "array", "items": _POWER, "minItems": 1},
                "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            },
            "required": ["kind"],
            "allOf": [
                {"if": {"properties": {"kind": {"const": "power"}}}, "then": {"required": ["p"]}},
                {"if": {"properties": {"kind": {"const": "mixed_power"}}}, "then": {"required": ["powers"]}},
            ],
        },
        "perturbation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "number", "exclusiveMinimum": 0},
                "dx": _NUM,
                "delta": _NUM,
                "eps": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "probe": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rays": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
                "r0": {"type": "number", "exclusiveMinimum": 0},
                "exponents": {"type": "array", "items": {"type": "integer"}, "minItems": 3},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "fd_step_mixed": {"type": "number", "exclusiveMinimum": 0},
                "c_grid": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer", "minimum": 2},
                "n_steps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "stream_id": {"type": "integer", "minimum": 0},
                "chunk_size": {"type": "integer", "minimum": 2},
                "antithetic": {"type": "boolean"},
                "p": _POWER,
                "lambda": _NUM,
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "nu": _NODE_FN,
                "tree_steps": {"type": "integer", "minimum": 1},
            },
        },
        "counterexample": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "K": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "n_paths": {"type": "integer", "minimum": 2},
                "n_steps": {"type": "integer", "minimum": 1},
                "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "comparator": {"type": "boolean"},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": {"type": "number"},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS = {
    "market": {"kind": "binomial", "lambda": 0.0, "nu": 0.0, "node_cap": 1_000_000},
    "perturbation": {"x": 1.0, "dx": 0.02, "delta": 0.02, "eps": None},
    "probe": {
        "rays": [[1, 0], [0, 1], [1, 1], [1, -1]],
        "r0": 0.05,
        "exponents": [2, 3, 4, 5, 6],
        "fd_step": 1e-4,
        "fd_step_mixed": 1e-2,
        "c_grid": [0.5, 1.0, 2.0],
    },
    "mc": {
        "n_paths": 100_000, "n_steps": 256, "seed": 20240601, "stream_id": 0, "chunk_size": 16384,
        "antithetic": False, "p": 0.5, "lambda": 2.0, "sigma": 0.2, "T": 1.0, "nu": 1.0, "tree_steps": 12,
    },
    "counterexample": {"c": [1.0], "K": [1e2, 1e4, 1e6], "n_paths": 1_000_000, "n_steps": 256, "p": 0.5,
                       "comparator": True},
    "tolerances": {
        "duality": 1e-9,
        "foc": 1e-12,
        "axx_byy": 1e-10,
        "identity": 1e-8,
        "key_gap": 1e-8,
        "pointwise": 1e-9,
        "martingale": 1e-10,
        "normal_equations": 1e-10,
        "orthogonality": 1e-12,
        "kw_hessian": 1e-8,
        "kw_reconstruction": 1e-10,
        "kw_orthogonality": 1e-10,
        "r0": 1e-9,
        "first_order_rel": 1e-6,
        "gamma_reconstruction": 1e-9,
        "deficit_floor": 1e-12,
        "slope": 2.5,
        "optimizer_factor": 1.5,
        "mc_sigmas": 3.0,
        "counterexample_growth": 2.0,
    },
    "output": {"dir": "out"},
}

# tolerances that are thresholds on a shape, not error sizes, and so are not scaled
UNSCALED = {"slope", "optimizer_factor", "mc_sigmas", "counterexample_growth"}


def _format_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (-len(e.absolute_path), e.path))
    if errors:
        err = jsonschema.exceptions.best_match(errors, key=jsonschema.exceptions.relevance)
        deepest = max(errors, key=lambda e: len(e.absolute_path))
        if len(deepest.absolute_path) > len(err.absolute_path):
            err = deepest
        raise ConfigError(err.message, _format_path(err))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def with_defaults(cfg: dict) -> dict:
    validate(cfg)
    return _merge(DEFAULTS, cfg)


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return with_defaults(cfg)


def tolerances(cfg: dict, scale: float = 1.0) -> dict:
    return {k: (v if k in UNSCALED else v * scale) for k, v in cfg["tolerances"].items()}


def build_market(cfg: dict):
    from . import market

    mk = cfg["market"]
    kind = mk.get("kind", "binomial")
    if kind == "json":
        base = Path(mk["path"])
        return market.from_json(base.read_text())
    build = market.build_binomial if kind == "binomial" else market.build_trinomial
    return build(mk["steps"], mk["dt"], mk["sigma"], mk["lambda"], mk["nu"], node_cap=mk["node_cap"])


def build_utility(cfg: dict):
    from .preferences import from_config

    return from_config(cfg["utility"])
