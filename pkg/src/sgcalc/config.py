"""Experiment configuration: YAML with a strict schema.

Unknown keys and wrong types are errors that name the field path and the
source line.  The parsed config is a plain nested dict with every default
filled in, so echoing it as JSON and parsing the echo reproduces the run.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from .errors import ConfigError

NUM = (int, float)
INF_TOKENS = {"inf", "infinity", ".inf"}


def _field(types, default=None, choices=None, required=False, items=None):
    return {"types": types, "default": default, "choices": choices, "required": required, "items": items}


FIELDS = _field(dict, {"family": "white", "count": 8, "mean_zero": True}, items={
    "family": _field(str, "white", ["white", "sign", "uniform", "constant", "eigenvector", "ramp"]),
    "count": _field(int, 8),
    "mean_zero": _field(bool, True),
    "value": _field(NUM, 1.0),
    "mode": _field(int, 1),
})

WEIGHT = _field(dict, {"family": "constant"}, items={
    "family": _field(str, "constant", ["constant", "power", "checkerboard"]),
    "c": _field(NUM, 1.0),
    "alpha": _field(NUM, 0.0),
    "x0": _field((int, type(None)), None),
    "a": _field(NUM, 1.0),
    "b": _field(NUM, 1.0),
})

SCHEMA = {
    "seed": _field(int, 0),
    "output": _field((str, type(None)), None),
    "suites": _field(list, ["geometry", "semigroup"]),
    "levels": _field((list, type(None)), None),
    "space": _field(dict, required=True, items={
        "family": _field(str, "path", ["path", "cycle", "grid2d", "file"]),
        "n": _field(int, 16),
        "nx": _field(int, 16),
        "ny": _field(int, 16),
        "length": _field(NUM, 1.0),
        "mass": _field(NUM, 1.0),
        "file": _field((str, type(None)), None),
    }),
    "generator": _field(dict, {}, items={
        "kind": _field(str, "combinatorial", ["combinatorial", "divergence"]),
        "coefficients": _field(dict, {}, items={
            "family": _field(str, "constant", ["constant", "random"]),
            "value": _field(NUM, 1.0),
            "low": _field(NUM, 0.5),
            "high": _field(NUM, 2.0),
        }),
        "m": _field(NUM, 2.0),
        "dense_cap": _field(int, 4096),
    }),
    "grid": _field(dict, {}, items={
        "rho": _field(NUM, 2 ** 0.25),
        "alpha": _field(NUM, 1e-4),
        "beta": _field(NUM, 1e4),
    }),
    "semigroup": _field(dict, {}, items={
        "t": _field(list, [0.34657359027997264, 1.0]),
        "probe_vertex": _field(int, 0),
        "fields": FIELDS,
    }),
    "bmo": _field(dict, {}, items={
        "fields": FIELDS,
        "classical": _field(bool, True),
    }),
    "carleson": _field(dict, {}, items={
        "k": _field(list, [1, 2]),
        "fields": FIELDS,
    }),
    "paraproduct": _field(dict, {}, items={
        "which": _field(list, [1]),
        "triples": _field(list, [["inf", 2, 2], [4, 4, 2], [2, "inf", 2]]),
        "restarts": _field(int, 4),
        "bump_scales": _field(list, [0.5, 2.0, 8.0, 32.0]),
        "max_iter": _field(int, 20),
        "weight": WEIGHT,
        "N": _field((int, type(None)), None),
        "fields": FIELDS,
    }),
    "weights": _field(dict, {}, items={
        "weight": WEIGHT,
        "p": _field(list, [2, 4]),
        "q": _field(list, [1, 2]),
    }),
    "t1": _field(dict, {}, items={
        "kernel": _field(dict, {}, items={
            "profile": _field(str, "riesz", ["riesz", "sign", "zero"]),
            "gamma": _field((int, float, type(None)), None),
            "axis": _field(int, 0),
            "diagonal": _field(str, "cancel", ["cancel", "zero"]),
            "truncation": _field((int, float, type(None)), None),
            "kappa": _field(int, 1),
        }),
        "thresholds": _field(dict, {}, items={
            "decay_margin": _field(NUM, 1.0),
            "near_ratio_factor": _field(NUM, 10.0),
            "bmo_max": _field((int, float, type(None)), None),
            "interior_margin": _field(NUM, 0.125),
            "min_separation": _field(NUM, 16.0),
        }),
    }),
    "sweep": _field(dict, {}, items={
        "suite": _field(str, "geometry", ["geometry", "semigroup", "bmo", "carleson", "paraproduct",
                                           "weights", "t1-check"]),
        "drift": _field(NUM, 0.25),
    }),
}

SUITES = ["geometry", "semigroup", "bmo", "carleson", "paraproduct", "weights", "t1-check", "sweep"]


def _line(node) -> str:
    return f"line {node.start_mark.line + 1}" if node is not None else "line ?"


def _node_child(node, key):
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            if k.value == key:
                return k, v
    return None, None


def _typename(types):
    types = types if isinstance(types, tuple) else (types,)
    return "/".join("null" if t is type(None) else t.__name__ for t in types)


def _check(value, spec, path, node):
    types = spec["types"]
    tt = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in tt:
        raise ConfigError(f"{path}: expected {_typename(types)}, got bool ({_line(node)})")
    if float in tt and isinstance(value, str):
        # YAML 1.1 reads "1e-4" (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if not isinstance(value, tt):
        raise ConfigError(f"{path}: expected {_typename(types)}, got {type(value).__name__} ({_line(node)})")
    if spec["choices"] is not None and value not in spec["choices"]:
        raise ConfigError(f"{path}: {value!r} not one of {spec['choices']} ({_line(node)})")
    if spec["items"] is not None:
        return _validate(value, spec["items"], path, node)
    return value


def _validate(data, schema, path, node):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping ({_line(node)})")
    out = {}
    for key, value in data.items():
        knode, vnode = _node_child(node, key)
        if key not in schema:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key ({_line(knode)})")
        out[key] = _check(value, schema[key], f"{path + '.' if path else ''}{key}", vnode)
    for key, spec in schema.items():
        if key in out:
            continue
        if spec["required"]:
            raise ConfigError(f"{path + '.' if path else ''}{key}: required field missing ({_line(node)})")
        default = copy.deepcopy(spec["default"])
        if spec["items"] is not None:
            default = _validate(default or {}, spec["items"], f"{path + '.' if path else ''}{key}", None)
        out[key] = default
    return out


def _post(cfg: dict) -> dict:
    for s in cfg["suites"]:
        if s not in SUITES:
            raise ConfigError(f"suites: {s!r} not one of {SUITES}")
    if cfg["space"]["family"] == "file" and not cfg["space"]["file"]:
        raise ConfigError("space.file: required when space.family is 'file'")
    for i, tr in enumerate(cfg["paraproduct"]["triples"]):
        if not (isinstance(tr, list) and len(tr) == 3):
            raise ConfigError(f"paraproduct.triples[{i}]: expected [p, q, r']")
        for x in tr:
            if not (isinstance(x, (int, float)) and not isinstance(x, bool)
                    or (isinstance(x, str) and x.lower() in INF_TOKENS)):
                raise ConfigError(f"paraproduct.triples[{i}]: {x!r} is not an exponent")
    for i, x in enumerate(cfg["paraproduct"]["bump_scales"]):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not x > 0:
            raise ConfigError(f"paraproduct.bump_scales[{i}]: expected a positive number, got {x!r}")
    if cfg["levels"] is not None and (len(cfg["levels"]) < 1 or not all(isinstance(v, int) for v in cfg["levels"])):
        raise ConfigError("levels: expected a list of integers")
    return cfg


def parse_config(text: str) -> dict:
    """Parse and validate YAML (JSON is accepted as a YAML subset)."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if data is None:
        data = {}
    return _post(_validate(data, SCHEMA, "", node))


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def exponent(x) -> float:
    """Config exponent to float (``"inf"`` accepted)."""
    if isinstance(x, str):
        return math.inf
    return float(x)
