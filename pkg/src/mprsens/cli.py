"""Command line front end: ``mprsens <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .errors import ConfigError, SensitivityError, ToleranceFailure
from .sensitivity import SCHEMA_VERSION, config_hash

SUBCOMMANDS = ("solve", "expand", "strategies", "verify", "mc", "counterexample")


class Checks:
    """Named tolerance checks collected during a run."""

    def __init__(self):
        self.items: dict[str, dict] = {}

    def upper(self, name, value, tol):
        self.items[name] = {"value": _num(value), "limit": tol, "kind": "<=", "ok": bool(value <= tol)}

    def lower(self, name, value, tol):
        self.items[name] = {"value": _num(value), "limit": tol, "kind": ">=", "ok": bool(value >= tol)}

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.items.items() if not v["ok"]]


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else str(v)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _setup(cfg):
    m = C.build_market(cfg)
    util = C.build_utility(cfg)
    return m, util, float(cfg["perturbation"]["x"])


def run_solve(cfg, tol, out: Path, checks: Checks) -> dict:
    from .solver import deflator_residual, solve_unperturbed

    m, util, x = _setup(cfg)
    pair = solve_unperturbed(m, util, x)
    m.to_json(out / "market.json")
    gap = abs(pair.u0 - pair.v0 - x * pair.y)
    checks.upper("duality_gap", gap, tol["duality"])
    checks.upper("foc_residual", pair.foc_residual, tol["foc"])
    checks.upper("deflator_residual", deflator_residual(pair), tol["foc"])
    return {
        "x": x, "y": pair.y, "u0": pair.u0, "v0": pair.v0, "pi_root": float(pair.pi_hat[0]),
        "iterations": pair.iterations, "n_nodes": m.n_nodes, "complete": m.is_complete(),
        "risk_tolerance": {"exists": pair.rt.exists, "r0": pair.rt.r0, "residual": pair.rt.residual},
    }


def _identity_checks(res: dict, tol: dict, checks: Checks, prefix=""):
    checks.upper(prefix + "identity_matrix", res["identity_matrix"], tol["identity"])
    checks.upper(prefix + "key_gap", res["key_gap"], tol["key_gap"])
    checks.upper(prefix + "pointwise_optimizer", max(res["pointwise_optimizer"], res["pointwise_optimizer_dual"]), tol["pointwise"])
    checks.upper(prefix + "axx_byy", res["axx_byy"], tol["axx_byy"])
    checks.upper(prefix + "product_martingales", res["product_martingale_max"], tol["martingale"])
    checks.upper(prefix + "normal_equations",
                 max(res["normal_axx"], res["normal_add"], res["normal_byy"], res["normal_bdd"]),
                 tol["normal_equations"])
    checks.upper(prefix + "orthogonality", res["orthogonality"], tol["orthogonality"])
    checks.upper(prefix + "dimension_gap", abs(res["dimension_gap"]), 0)


def _kw_checks(kw: dict | None, tol: dict, checks: Checks):
    if kw is None:
        return
    checks.upper("kw_hessian", kw["hessian_mismatch"], tol["kw_hessian"])
    checks.upper("kw_reconstruction", kw["reconstruction_residual"], tol["kw_reconstruction"])
    checks.upper("kw_orthogonality", kw["orthogonality_residual"], tol["kw_orthogonality"])
    checks.upper("kw_r0", kw["r0_vs_x_over_axx"], tol["r0"])


def run_expand(cfg, tol, out: Path, checks: Checks, digest: str):
    from .sensitivity import analyze, integrability_probe

    m, util, x = _setup(cfg)
    pair, space, report = analyze(m, util, x)
    report.residuals["duality_gap"] = abs(pair.u0 - pair.v0 - x * pair.y)
    checks.upper("duality_gap", report.residuals["duality_gap"], tol["duality"])
    _identity_checks(report.residuals, tol, checks)
    _kw_checks(report.kw, tol, checks)
    doc = report.to_dict(digest)
    doc["integrability"] = integrability_probe(m, pair, cfg["probe"]["c_grid"])
    doc["space"] = {"attainable_dim": space.dim, "complement_dim": space.complement_dim}
    return doc, (m, util, pair, report)


def run_strategies(cfg, tol, out: Path, checks: Checks, digest: str):
    from .oracle import deficit_check
    from .strategies import corrected_strategy, corrected_wealth, derive_gammas

    doc, ctx = run_expand(cfg, tol, out, checks, digest)
    m, util, pair, report = ctx
    pert = cfg["perturbation"]
    cs = corrected_strategy(pair, report, pert["dx"], pert["delta"], pert["eps"])
    cs.to_csv(out / "strategy.csv", m)
    wealth = corrected_wealth(cs, m)
    _, _, gres = derive_gammas(pair, report, m)
    checks.upper("gamma_reconstruction", gres, tol["gamma_reconstruction"])
    probe = cfg["probe"]
    dc = deficit_check(m, util, pair, report, rays=[tuple(r) for r in probe["rays"]], r0=probe["r0"],
                       exponents=probe["exponents"])
    dc.to_csv(out / "deficit.csv")
    min_deficit = min(row[4] for row in dc.rows)
    checks.lower("deficit_nonnegative", min_deficit, -tol["deficit_floor"])
    for ray, slope in dc.slopes.items():
        checks.lower(f"deficit_slope{ray}", slope, tol["slope"])
    doc["strategy"] = {
        "dx": cs.dx, "delta": cs.delta, "eps": cs.eps, "expected_utility": m.expect(util.u(wealth)),
        "deficit_slopes": dc.slopes, "min_deficit": min_deficit,
    }
    return doc, ctx


def run_verify(cfg, tol, out: Path, checks: Checks, digest: str):
    from .oracle import expansion_check, fd_u_delta, fd_u_xdelta, optimizer_check
    from .preferences import check_growth_inequalities, log_grid_pairs

    doc, (m, util, pair, report) = run_strategies(cfg, tol, out, checks, digest)
    x = pair.x
    probe = cfg["probe"]
    ec = expansion_check(m, util, pair, report, rays=[tuple(r) for r in probe["rays"]], r0=probe["r0"],
                         exponents=probe["exponents"])
    ec.to_csv(out / "residuals.csv")
    for ray, slope in ec.slopes.items():
        checks.lower(f"expansion_slope{ray}", slope, tol["slope"])
    fd = fd_u_delta(m, util, x, probe["fd_step"])
    rel = abs(fd - report.u_delta) / max(abs(report.u_delta), 1e-300) if report.u_delta else abs(fd)
    checks.upper("first_order_fd", rel, tol["first_order_rel"])
    oc = optimizer_check(m, util, pair, report, r0=probe["r0"], exponents=probe["exponents"])
    checks.lower("optimizer_factor", min(oc["factors"]), tol["optimizer_factor"])
    growth = check_growth_inequalities(util, log_grid_pairs())
    checks.upper("growth_violations", len(growth["violations"]), 0)
    doc["verify"] = {
        "expansion_slopes": ec.slopes,
        "u_delta": report.u_delta,
        "u_delta_fd": fd,
        "u_xdelta": float(report.Hu[0, 1]),
        "u_xdelta_fd": fd_u_xdelta(m, util, x, probe["fd_step_mixed"]),
        "optimizer": oc,
        "growth_checked": growth["n_checked"],
    }
    return doc


def run_mc(cfg, tol, out: Path, checks: Checks):
    from .mc import PathEnsemble, estimate_first_order, merton_baseline, tree_convergence_study, tree_first_order

    mc = cfg["mc"]
    model = merton_baseline(mc["p"], mc["lambda"], mc["sigma"], 1.0, mc["T"])
    ens = PathEnsemble(mc["n_paths"], mc["n_steps"], mc["T"], mc["seed"], mc["stream_id"], mc["chunk_size"],
                       mc["antithetic"], mc.get("threads", 1))
    est = estimate_first_order(ens, model, mc["nu"])
    nu = mc["nu"]
    tree = tree_first_order(model, mc["tree_steps"], nu) if isinstance(nu, (int, float)) else None
    with open(out / "mc.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["estimate", "stderr", "n_paths", "seed"])
        wr.writerow([repr(est.estimate), repr(est.stderr), est.n_paths, est.seed])
    if tree is not None:
        z = abs(est.estimate - tree) / est.stderr if est.stderr > 0 else (0.0 if est.estimate == tree else math.inf)
        checks.upper("mc_vs_tree_sigmas", z, tol["mc_sigmas"])
    if est.weight_stderr > 0:
        checks.upper("weight_mean_sigmas", abs(est.weight_mean - 1.0) / est.weight_stderr, 5.0)
    return {
        "merton": model.to_dict(),
        "u_delta_closed_form": model.u_delta(nu) if isinstance(nu, (int, float)) else None,
        "estimate": est.estimate, "stderr": est.stderr, "n_paths": est.n_paths, "seed": est.seed,
        "weight_mean": est.weight_mean, "tree_u_delta": tree, "tree_steps": mc["tree_steps"],
        "tree_study": tree_convergence_study(model),
    }


def run_counterexample(cfg, tol, out: Path, checks: Checks):
    from .mc import PathEnsemble, counterexample_probe

    ce = cfg["counterexample"]
    mc = cfg["mc"]
    ens = PathEnsemble(ce["n_paths"], ce["n_steps"], 1.0, mc["seed"], mc["stream_id"], mc["chunk_size"],
                       False, mc.get("threads", 1))
    rows = []
    for c in ce["c"]:
        table = counterexample_probe(c, ce["K"], ens, ce["p"])
        rows += table
        if c >= 1:
            growth = min(b["moment"] / a["moment"] for a, b in zip(table[:-1], table[1:]))
            checks.lower(f"growth_c{c:g}", growth, tol["counterexample_growth"])
    if ce["comparator"]:
        comp = counterexample_probe(1.0, ce["K"], ens, ce["p"], nu_spec=0.0)
        for r in comp:
            r["comparator"] = True
        rows += comp
        # within 1% of one, or within the sampling band when the ensemble is small
        dev = max(abs(r["moment"] - 1.0) / max(0.01, tol["mc_sigmas"] * r["stderr"]) for r in comp)
        checks.upper("comparator_flat", dev, 1.0)
    with open(out / "counterexample.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["c", "K", "moment", "stderr", "nu"])
        for r in rows:
            wr.writerow([r["c"], r["K"], repr(r["moment"]), repr(r["stderr"]), "0" if r.get("comparator") else "3B^2"])
    return {"table": rows}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mprsens", description="Sensitivity of utility maximisation to the market price of risk.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out-dir", default=None, help="output directory (overrides output.dir)")
    ap.add_argument("--seed", type=int, default=None, help="Monte Carlo seed (overrides mc.seed)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo chunks")
    ap.add_argument("--tolerance-scale", type=float, default=1.0, help="multiply every error tolerance")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if not args.tolerance_scale > 0:
            raise ConfigError("must be positive", "--tolerance-scale")
        cfg = C.load(args.config)
        if args.seed is not None:
            cfg["mc"]["seed"] = args.seed
        cfg["mc"]["threads"] = max(1, args.threads)
        out = Path(args.out_dir or cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        digest = config_hash({k: v for k, v in cfg.items() if k != "output"})
        tol = C.tolerances(cfg, args.tolerance_scale)
        checks = Checks()
        t0 = time.perf_counter()
        sub = args.subcommand
        if sub == "solve":
            body = run_solve(cfg, tol, out, checks)
        elif sub == "expand":
            body, _ = run_expand(cfg, tol, out, checks, digest)
        elif sub == "strategies":
            body, _ = run_strategies(cfg, tol, out, checks, digest)
        elif sub == "verify":
            body = run_verify(cfg, tol, out, checks, digest)
        elif sub == "mc":
            body = run_mc(cfg, tol, out, checks)
        else:
            body = run_counterexample(cfg, tol, out, checks)
        elapsed = time.perf_counter() - t0
        doc = {"schema_version": SCHEMA_VERSION, "config_hash": digest, "subcommand": sub}
        doc.update(body)
        doc["checks"] = checks.items
        (out / "report.json").write_text(json.dumps(_clean(doc), indent=2))
        for name, c in checks.items.items():
            print(f"{'PASS' if c['ok'] else 'FAIL'}  {name}: {c['value']} {c['kind']} {c['limit']}")
        print(f"{sub}: {len(checks.items) - len(checks.failed)}/{len(checks.items)} checks passed in {elapsed:.2f}s; "
              f"report at {out / 'report.json'}")
        if checks.failed:
            raise ToleranceFailure(checks.failed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ToleranceFailure as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SensitivityError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


def _clean(o):
    """Plain JSON types; non-finite floats become strings such as ``"inf"``."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer, int)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    return o


def main():
    sys.exit(run())
