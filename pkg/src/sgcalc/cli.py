"""Command-line driver: single suites, multi-suite runs and refinement sweeps.

Every subcommand reads a YAML config (``--config``), runs on the configured
space and writes ``report.json`` (deterministic, with the config echoed),
``tables/<suite>.csv``, ``summary.csv`` and ``meta.json`` (timestamps) to
``--out``.  Exit code 0 on success, 2 when a verdict is flagged, 1 on error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bmo import bmo_classical_norm, bmo_l_norms, carleson_norms
from .config import SUITES, ConfigError, exponent, load_config
from .errors import SgcalcError
from .paraproducts import (
    CalculusPair,
    Paraproduct,
    default_N,
    heat_bump_starts,
    mixed_norm_estimate,
    paraproduct_pi1,
    product_decomposition,
    reproducing_residual,
)
from .rng import random_fields, substream
from .space import check_metric, cycle, grid2d, measure_doubling, path, read_graph
from .spectral import (
    Generator,
    assemble_generator,
    chebyshev_apply,
    heat,
    inner,
    l2norm,
    make_grid,
    semigroup,
)
from .t1 import make_cz_operator, t1_report
from .weights import ap_characteristic, make_weight, rh_characteristic

SUITE_NAMES = [s for s in SUITES if s != "sweep"]


# ----------------------------------------------------------------- builders


def build_space(cfg: dict, level: int | None = None):
    sc = cfg["space"]
    fam = sc["family"]
    if fam == "path":
        return path(level or sc["n"], sc["length"], sc["mass"])
    if fam == "cycle":
        return cycle(level or sc["n"])
    if fam == "grid2d":
        return grid2d(level or sc["nx"], level or sc["ny"])
    if level is not None:
        raise ConfigError("space.family 'file' cannot be swept over levels")
    return read_graph(sc["file"])


def build_generator(cfg: dict, space, seed: int) -> Generator:
    gc = cfg["generator"]
    A = None
    if gc["kind"] == "divergence":
        cc = gc["coefficients"]
        if cc["family"] == "constant":
            A = np.full(len(space.edges), float(cc["value"]))
        else:
            A = substream(seed, "generator/coefficients").uniform(cc["low"], cc["high"], len(space.edges))
    return assemble_generator(space, gc["kind"], A, m=gc["m"], dense_cap=gc["dense_cap"])


def build_grid(cfg: dict, gen: Generator):
    g = cfg["grid"]
    return make_grid(gen, g["rho"], g["alpha"], g["beta"])


def build_fields(fc: dict, gen: Generator, rng) -> np.ndarray:
    space = gen.space
    fam, k = fc["family"], fc["count"]
    if fam == "constant":
        return np.full((space.n, k), float(fc["value"]))
    if fam == "ramp":
        x = space.coords[:, 0] if space.coords is not None else np.arange(space.n, dtype=float)
        return np.repeat(x[:, None], k, axis=1)
    if fam == "eigenvector":
        basis = gen.basis
        lam = basis.eigenvalues
        order = np.argsort(lam, kind="stable")
        idx = order[min(fc["mode"], len(order) - 1)]
        C = np.zeros((space.n, 1))
        C[idx] = 1.0
        return np.repeat(basis.inverse(C), k, axis=1)
    return random_fields(space, rng, k, fam, fc["mean_zero"])


# ------------------------------------------------------------------- suites


class SuiteResult:
    def __init__(self):
        self.result = {}
        self.rows = []  # table rows
        self.summary = {}  # scale-free quantities used by sweeps
        self.flagged = False


def suite_geometry(cfg, space, gen, grid, seed):
    out = SuiteResult()
    rep = measure_doubling(space)
    out.result = {"n": space.n, "diameter": space.diameter, "metric_violation": check_metric(space),
                  "doubling": rep.to_dict()}
    out.summary = {"C0": rep.C0, "d_hom": rep.d_hom}
    out.rows = [{"quantity": k, "value": v} for k, v in out.summary.items()]
    return out


def suite_semigroup(cfg, space, gen, grid, seed):
    out = SuiteResult()
    sc = cfg["semigroup"]
    v = min(sc["probe_vertex"], space.n - 1)
    delta = np.zeros(space.n)
    delta[v] = 1.0
    F = build_fields(sc["fields"], gen, substream(seed, "semigroup/fields"))
    one = np.ones(space.n)
    probes, law, cons, sa, pos, orc = [], 0.0, 0.0, 0.0, 0.0, 0.0
    for t in sc["t"]:
        t = float(t)
        p = semigroup(gen, t, delta)
        probes.append({"t": t, "values": p.tolist() if space.n <= 64 else None,
                       "mass": float(p @ space.measure)})
        cons = max(cons, float(np.abs(semigroup(gen, t, one) - 1).max()))
        for j in range(F.shape[1]):
            f, g = F[:, j], F[:, (j + 1) % F.shape[1]]
            a = semigroup(gen, t, semigroup(gen, 0.5 * t, f))
            b = semigroup(gen, 1.5 * t, f)
            law = max(law, l2norm(space, a - b) / max(l2norm(space, f), 1e-300))
            x, y = inner(space, semigroup(gen, t, f), g), inner(space, f, semigroup(gen, t, g))
            sa = max(sa, abs(x - y) / max(abs(x), abs(y), 1e-300))
            pos = max(pos, float(-semigroup(gen, t, np.abs(f)).min()))
            if space.n <= gen.dense_cap:
                c = chebyshev_apply(gen, heat(), t, f)
                orc = max(orc, l2norm(space, c - semigroup(gen, t, f)) / max(l2norm(space, f), 1e-300))
    checks = {"semigroup_law": law, "conservation": cons, "self_adjointness": sa,
              "positivity_violation": max(pos, 0.0), "oracle_difference": orc}
    limits = {"semigroup_law": 1e-9, "conservation": 1e-9, "self_adjointness": 1e-10,
              "positivity_violation": 1e-10, "oracle_difference": 1e-8}
    out.flagged = any(checks[k] > limits[k] for k in checks)
    out.result = {"probes": probes, "checks": checks, "limits": limits}
    out.rows = [{"quantity": k, "value": v, "limit": limits[k]} for k, v in checks.items()]
    return out


def suite_bmo(cfg, space, gen, grid, seed):
    out = SuiteResult()
    bc = cfg["bmo"]
    F = build_fields(bc["fields"], gen, substream(seed, "bmo/fields"))
    reps = bmo_l_norms(gen, F, grid)
    rows = []
    for j, rep in enumerate(reps):
        row = {"field": j, "bmo_l": rep.norm, "center": rep.witness["center"] if rep.witness else None}
        if bc["classical"]:
            row["bmo_classical"] = bmo_classical_norm(space, F[:, j])
        rows.append(row)
    out.rows = rows
    out.result = {"norms": [r["bmo_l"] for r in rows], "reports": [rep.to_dict() for rep in reps[:1]]}
    out.summary = {"bmo_l_max": max(r["bmo_l"] for r in rows)}
    if bc["classical"]:
        ratios = [r["bmo_l"] / r["bmo_classical"] for r in rows if r["bmo_classical"] > 0]
        out.result["classical"] = [r["bmo_classical"] for r in rows]
        if ratios:
            out.summary["bmo_l_over_classical_max"] = max(ratios)
    return out


def suite_carleson(cfg, space, gen, grid, seed):
    out = SuiteResult()
    cc = cfg["carleson"]
    F = build_fields(cc["fields"], gen, substream(seed, "carleson/fields"))
    bmo = [r.norm for r in bmo_l_norms(gen, F, grid)]
    for k in cc["k"]:
        reps = carleson_norms(gen, F, int(k), grid)
        ratios = []
        for j, rep in enumerate(reps):
            ratio = rep.norm / bmo[j] ** 2 if bmo[j] > 0 else None
            ratios.append(ratio)
            out.rows.append({"k": int(k), "field": j, "carleson": rep.norm, "bmo_l": bmo[j], "ratio": ratio})
        finite = [r for r in ratios if r is not None]
        if finite:
            out.summary[f"ratio_max_k{k}"] = max(finite)
    out.result = {"rows": out.rows}
    return out


def suite_paraproduct(cfg, space, gen, grid, seed):
    out = SuiteResult()
    pc = cfg["paraproduct"]
    N = pc["N"] or default_N(measure_doubling(space).d_hom, gen.m)
    pair = CalculusPair.default(N)
    F = build_fields(pc["fields"], gen, substream(seed, "paraproduct/fields"))
    # anchor: Pi_1(1, v) = Gamma(N)(2^-N - 3^-N) v for an eigenvector v
    basis = gen.basis
    idx = np.argsort(basis.eigenvalues, kind="stable")[1]
    C = np.zeros((space.n, 1))
    C[idx] = 1.0
    v = basis.inverse(C)[:, 0]
    pi = paraproduct_pi1(gen, np.ones(space.n), v, grid, pair)
    expected = math.gamma(N) * (2.0**-N - 3.0**-N)
    anchor = float(inner(space, pi, v) / inner(space, v, v))
    resid = [reproducing_residual(gen, F[:, j], grid) for j in range(F.shape[1])]
    dec = product_decomposition(gen, F[:, 0], F[:, -1], grid)
    w = make_weight(space, pc["weight"])
    # localized starts first, then pc["restarts"] white-noise restarts
    starts = heat_bump_starts(gen, [float(x) for x in pc["bump_scales"]])
    estimates = []
    for which in pc["which"]:
        op = Paraproduct(gen, int(which), grid, pair)
        for tr in pc["triples"]:
            p, q, r = (exponent(x) for x in tr)
            est = mixed_norm_estimate(op, p, q, r, weight=w.values, restarts=len(starts) + pc["restarts"],
                                      max_iter=pc["max_iter"], starts=starts,
                                      seed=int(substream(seed, f"pp/{which}/{tr}").integers(2**31)))
            key = f"pi{which}({tr[0]},{tr[1]},{tr[2]})"
            row = {"quantity": key, "which": int(which), "p": tr[0], "q": tr[1], "r_prime": tr[2],
                   "estimate": est.value,
                   "restarts": est.restarts, "converged": est.converged, "grid_ratio": grid.ratio,
                   "n": space.n, "graph": space.name, "weight": w.name}
            estimates.append(row)
            out.summary[key] = est.value
    out.rows = estimates
    out.result = {"N": N, "pi1_anchor": anchor, "pi1_anchor_expected": expected,
                  "reproducing_residual_max": max(resid), "product_residual": dec.residual_norm,
                  "estimates": estimates}
    return out


def suite_weights(cfg, space, gen, grid, seed):
    out = SuiteResult()
    wc = cfg["weights"]
    w = make_weight(space, wc["weight"])
    for p in wc["p"]:
        val = ap_characteristic(space, w, float(p))
        out.rows.append({"kind": "A_p", "exponent": p, "value": val})
        out.summary[f"A_{p}"] = val
    for q in wc["q"]:
        val = rh_characteristic(space, w, float(q))
        out.rows.append({"kind": "RH_q", "exponent": q, "value": val})
        out.summary[f"RH_{q}"] = val
    out.result = {"weight": w.name, "rows": out.rows}
    return out


def suite_t1(cfg, space, gen, grid, seed):
    out = SuiteResult()
    tc = cfg["t1"]
    spec = {k: v for k, v in tc["kernel"].items() if v is not None}
    T = make_cz_operator(space, spec)
    rep = t1_report(T, gen, grid, thresholds=tc["thresholds"])
    out.result = rep.to_dict()
    out.rows = [dict(r) for r in rep.off_diag_table]
    out.summary = {"t1_bmo": rep.t1_bmo.norm, "t1star_bmo": rep.t1star_bmo.norm,
                   "l2_norm": rep.l2_norm_estimate.value}
    if rep.fitted.get("min") is not None:
        out.summary["decay_min_exponent"] = rep.fitted["min"]
    out.flagged = not rep.verdict["hypotheses_pass"]
    return out


SUITE_FUNCS = {
    "geometry": suite_geometry,
    "semigroup": suite_semigroup,
    "bmo": suite_bmo,
    "carleson": suite_carleson,
    "paraproduct": suite_paraproduct,
    "weights": suite_weights,
    "t1-check": suite_t1,
}


def run_suite(cfg: dict, name: str, level: int | None = None) -> SuiteResult:
    space = build_space(cfg, level)
    gen = build_generator(cfg, space, cfg["seed"])
    grid = build_grid(cfg, gen)
    return SUITE_FUNCS[name](cfg, space, gen, grid, cfg["seed"])


def sweep(cfg: dict, levels, suite: str | None = None):
    """Run one suite per level; stability ratio max/min per summary quantity."""
    if len(levels) < 2:
        raise ConfigError("sweep needs at least two levels")
    suite = suite or cfg["sweep"]["suite"]
    per_level = {lv: run_suite(cfg, suite, lv) for lv in levels}
    keys = sorted(set().union(*(r.summary for r in per_level.values())))
    rows, flagged = [], False
    for key in keys:
        vals = [per_level[lv].summary.get(key) for lv in levels]
        row = {"quantity": key, **{f"level_{lv}": v for lv, v in zip(levels, vals)}}
        finite = [abs(v) for v in vals if v is not None and np.isfinite(v)]
        if len(finite) == len(vals) and min(finite) > 0:
            ratio = max(finite) / min(finite)
        elif finite and max(finite) == 0:
            ratio = 1.0
        else:
            ratio = None
        row["stability_ratio"] = ratio
        row["flagged"] = ratio is None or ratio - 1.0 > cfg["sweep"]["drift"]
        flagged |= row["flagged"]
        rows.append(row)
    ratios = {row["quantity"]: row["stability_ratio"] for row in rows}
    detail = []
    for lv in levels:
        for r in per_level[lv].rows:
            d = {"level": lv, **r}
            if "quantity" in r:
                d["stability_ratio"] = ratios.get(r["quantity"])
            detail.append(d)
    result = {"suite": suite, "levels": list(levels), "rows": rows,
              "per_level": {str(lv): r.summary for lv, r in per_level.items()}}
    return result, rows, detail, flagged


# ------------------------------------------------------------------ output


def _clean(x):
    """JSON-safe, deterministic structure (numpy scalars, non-finite floats)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _write_csv(path: Path, rows):
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _clean(r.get(k)) for k in cols})


def write_outputs(out_dir: Path, cfg: dict, results: dict, tables: dict, summary: list, flagged: bool,
                  started: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tables").mkdir(exist_ok=True)
    report = {"config": cfg, "results": results, "flagged": flagged, "version": __version__}
    text = json.dumps(_clean(report), sort_keys=True, indent=1)
    (out_dir / "report.json").write_text(text + "\n", encoding="utf-8")
    for name, rows in tables.items():
        _write_csv(out_dir / "tables" / f"{name}.csv", rows)
    _write_csv(out_dir / "summary.csv", summary)
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "elapsed_seconds": time.time() - started, "python": platform.python_version(),
            "numpy": np.__version__}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def execute(cfg: dict, command: str, levels=None) -> tuple[dict, dict, list, bool]:
    results, tables, summary, flagged = {}, {}, [], False
    if command == "run":
        names = cfg["suites"]
    else:
        names = [command]
    for name in names:
        if name == "sweep":
            lv = levels or cfg["levels"]
            if not lv:
                raise ConfigError("sweep needs levels (config 'levels' or --levels)")
            res, rows, detail, fl = sweep(cfg, lv)
            results["sweep"] = res
            tables["sweep"] = rows
            tables["sweep_levels"] = detail
            for r in rows:
                summary.append({"suite": "sweep", "quantity": r["quantity"], "value": r["stability_ratio"]})
        else:
            sr = run_suite(cfg, name)
            res, rows, fl = sr.result, sr.rows, sr.flagged
            results[name] = res
            tables[name] = rows
            for k, v in sr.summary.items():
                summary.append({"suite": name, "quantity": k, "value": v})
        flagged |= fl
    return results, tables, summary, flagged


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sgcalc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUITE_NAMES + ["sweep", "run"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output directory (default: config 'output' or ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--levels", default=None, help="comma-separated refinement levels, e.g. 16,32,64")
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        levels = None
        if args.levels:
            try:
                levels = [int(x) for x in args.levels.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"--levels: cannot parse {args.levels!r}") from None
            cfg["levels"] = levels
        out_dir = Path(args.out or cfg["output"] or "out")
        results, tables, summary, flagged = execute(cfg, args.command, levels)
        write_outputs(out_dir, cfg, results, tables, summary, flagged, started)
    except (SgcalcError, ValueError, OSError) as exc:
        print(f"sgcalc: error: {exc}", file=sys.stderr)
        return 1
    print(f"sgcalc: wrote {out_dir / 'report.json'}{' (flagged)' if flagged else ''}")
    return 2 if flagged else 0


if __name__ == "__main__":
    sys.exit(main())
