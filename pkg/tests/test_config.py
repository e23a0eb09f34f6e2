import json

import pytest

from sgcalc.cli import _clean
from sgcalc.config import exponent, parse_config
from sgcalc.errors import ConfigError
from sgcalc.rng import random_fields, substream
from sgcalc.space import path


def test_defaults_filled():
    cfg = parse_config("space: {family: path, n: 8}\n")
    assert cfg["seed"] == 0 and cfg["grid"]["alpha"] == 1e-4
    assert cfg["paraproduct"]["triples"][0] == ["inf", 2, 2]


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"space\.famly: unknown key \(line 3\)"):
        parse_config("seed: 1\nspace:\n  famly: path\n")


def test_wrong_type_names_path():
    with pytest.raises(ConfigError, match=r"grid\.rho: expected"):
        parse_config("space: {family: path}\ngrid: {rho: fast}\n")
    with pytest.raises(ConfigError, match="not one of"):
        parse_config("space: {family: torus}\n")
    with pytest.raises(ConfigError, match="required"):
        parse_config("seed: 3\n")


def test_scientific_notation_without_dot():
    cfg = parse_config("space: {family: path}\ngrid: {alpha: 1e-3}\n")
    assert cfg["grid"]["alpha"] == 1e-3


def test_bad_triple():
    with pytest.raises(ConfigError, match="triples"):
        parse_config("space: {family: path}\nparaproduct: {triples: [[2, 2]]}\n")


def test_echo_round_trips():
    cfg = parse_config(open("configs/acceptance.yaml").read())
    echo = json.dumps(_clean(cfg), sort_keys=True)
    assert parse_config(echo) == cfg


def test_exponent():
    assert exponent("inf") == float("inf")
    assert exponent(4) == 4.0


def test_substreams_deterministic_and_independent():
    a = substream(5, "bmo/fields").standard_normal(4)
    b = substream(5, "bmo/fields").standard_normal(4)
    c = substream(5, "carleson/fields").standard_normal(4)
    assert (a == b).all() and not (a == c).all()


def test_random_fields_mean_zero():
    sp = path(10, mass=2.0)
    F = random_fields(sp, substream(0, "x"), 3, "sign", mean_zero=True)
    assert abs((sp.measure @ F)).max() < 1e-12
    with pytest.raises(ValueError):
        random_fields(sp, substream(0, "x"), 1, "pink")


def test_bump_scales_default_and_validation():
    base = "space: {family: path, n: 4}\n"
    assert parse_config(base)["paraproduct"]["bump_scales"] == [0.5, 2.0, 8.0, 32.0]
    assert parse_config(base + "paraproduct: {bump_scales: []}\n")["paraproduct"]["bump_scales"] == []
    with pytest.raises(ConfigError, match="bump_scales"):
        parse_config(base + "paraproduct: {bump_scales: [1, -2]}\n")
