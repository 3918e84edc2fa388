"""Command-line front end: JSON config ingestion, command dispatch and
artifact serialization.

Commands: solve (value function, thresholds, Bayes-risk curve), simulate
(Monte Carlo risk of given alarm thresholds), asymptotics (cost sweep
against the closed-form expansion), selftest (oracle suite).

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 numerical
diagnostic (details land in summary.json).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .chain import (
    GridSpec,
    InconsistencyError,
    MCConfig,
    discounted_running_cost,
    hitting_laplace,
    suggest_h,
)
from .fundamental import DivisionInstabilityError, build as build_fs
from .marks import GridFunction, MarkModel, apply_K
from .model import PoissonSource, ReducedModel, SourceSpec, reduce_sources
from .reference import bt_expansion, remark32_oracles, wiener_risk, wiener_threshold
from .simulate import ScenarioConfig, evaluate_policy
from .solver import MonotonicityError, ThresholdError, solve

SCHEMA_VERSION = 1

__all__ = ["main", "load_config", "ConfigError"]


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


_NUMERICAL_ERRORS = (
    InconsistencyError,
    DivisionInstabilityError,
    ThresholdError,
    MonotonicityError,
)


def _require_keys(section: dict, allowed: set, required: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(section)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _parse_marks(d: dict) -> MarkModel:
    _require_keys(d, {"kind", "atoms", "nu0", "nu1"}, {"kind"}, "marks")
    try:
        if d["kind"] == "simple":
            return MarkModel.simple()
        return MarkModel.discrete(d["atoms"], d["nu0"], d["nu1"])
    except (ValueError, KeyError) as e:
        raise ConfigError(f"marks: {e}") from e


def _parse_problem(d: dict) -> ReducedModel:
    _require_keys(
        d,
        {"wiener_drifts", "poisson_sources", "disorder_rate", "prior", "delay_cost"},
        {"wiener_drifts", "poisson_sources", "disorder_rate", "prior", "delay_cost"},
        "problem",
    )
    try:
        sources = []
        for s in d["poisson_sources"]:
            _require_keys(s, {"lam0", "lam1", "marks"}, {"lam0", "lam1"}, "poisson_sources[]")
            sources.append(
                PoissonSource(
                    lam0=float(s["lam0"]),
                    lam1=float(s["lam1"]),
                    marks=_parse_marks(s.get("marks", {"kind": "simple"})),
                )
            )
        spec = SourceSpec(
            wiener_drifts=tuple(float(x) for x in d["wiener_drifts"]),
            poisson_sources=tuple(sources),
            disorder_rate=float(d["disorder_rate"]),
            prior=float(d["prior"]),
            delay_cost=float(d["delay_cost"]),
        )
        return reduce_sources(spec)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"problem: {e}") from e


def _parse_mc(d: dict) -> MCConfig:
    _require_keys(
        d,
        {"n_paths", "master_seed", "max_steps_per_path", "target_rel_stderr"},
        {"n_paths", "master_seed"},
        "numerics.mc",
    )
    try:
        return MCConfig(
            n_paths=int(d["n_paths"]),
            master_seed=int(d["master_seed"]),
            max_steps_per_path=d.get("max_steps_per_path"),
            target_rel_stderr=d.get("target_rel_stderr"),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"numerics.mc: {e}") from e


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys(
        raw,
        {"schema_version", "problem", "numerics", "simulation", "output", "fault_injection"},
        {"schema_version", "problem"},
        "config",
    )
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {raw['schema_version']} (expected {SCHEMA_VERSION})"
        )
    return raw


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _csv_header(raw: dict, seed: int) -> str:
    return f"# config_hash={config_hash(raw)} master_seed={seed}\n"


def _write_csv(path: Path, header_line: str, columns: str, rows):
    with open(path, "w") as fh:
        fh.write(header_line)
        fh.write(columns + "\n")
        for row in rows:
            fh.write(",".join(f"{x:.12g}" if isinstance(x, float) else str(x) for x in row))
            fh.write("\n")


def _maybe_gnuplot(path: Path, enabled: bool):
    """Mirror a CSV as a whitespace-separated .dat file for gnuplot."""
    if not enabled:
        return
    lines = path.read_text().splitlines()
    out = path.with_suffix(".dat")
    with open(out, "w") as fh:
        for line in lines:
            if line.startswith("#"):
                fh.write(line + "\n")
            else:
                fh.write(line.replace(",", " ") + "\n")


def _numerics(raw: dict):
    d = raw.get("numerics", {})
    _require_keys(
        d,
        {"h", "eps", "grid_margin", "mode", "mc"},
        {"mc"},
        "numerics",
    )
    mc = _parse_mc(d["mc"])
    eps = float(d.get("eps", 1e-3))
    if eps <= 0:
        raise ConfigError("numerics.eps must be positive")
    mode = d.get("mode", "quadrature")
    if mode not in ("quadrature", "mc"):
        raise ConfigError(f"numerics.mode must be 'quadrature' or 'mc', got {mode!r}")
    h = d.get("h")
    margin = float(d.get("grid_margin", 2.0))
    return mc, eps, mode, (float(h) if h is not None else None), margin


def _simulation(raw: dict, model: ReducedModel, need_thresholds: bool):
    d = raw.get("simulation", {})
    _require_keys(
        d,
        {"dt_sim", "n_paths", "max_alarm_steps", "master_seed", "thresholds"},
        {"n_paths", "master_seed"},
        "simulation",
    )
    thresholds = d.get("thresholds", [])
    if need_thresholds and not thresholds:
        raise ConfigError("simulation.thresholds must be a nonempty list")
    try:
        cfg = ScenarioConfig.for_model(
            model,
            n_paths=int(d["n_paths"]),
            master_seed=int(d["master_seed"]),
            dt_sim=d.get("dt_sim"),
            max_alarm_steps=int(d.get("max_alarm_steps", 1_000_000)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"simulation: {e}") from e
    return cfg, [float(t) for t in thresholds]


def _output_opts(raw: dict):
    d = raw.get("output", {})
    _require_keys(d, {"formats", "gnuplot"}, set(), "output")
    gnuplot = bool(d.get("gnuplot", False))
    return gnuplot


def _check_grid_step(h: float | None, model: ReducedModel):
    if h is not None and h > suggest_h(model) * (1.0 + 1e-12):
        raise ConfigError(
            f"numerics.h={h} violates the near-zero no-exit rule; "
            f"largest admissible step is {suggest_h(model):.3g}"
        )


def cmd_solve(raw: dict, out_dir: Path) -> int:
    model = _parse_problem(raw["problem"])
    mc, eps, mode, h, margin = _numerics(raw)
    _check_grid_step(h, model)
    gnuplot = _output_opts(raw)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _csv_header(raw, mc.master_seed)
    t0 = time.perf_counter()
    try:
        sol = solve(model, eps, mc, mode=mode, h=h, grid_margin=margin)
    except _NUMERICAL_ERRORS as e:
        _write_summary(out_dir, raw, {"status": "error", "diagnostic": str(e)})
        print(f"numerical diagnostic: {e}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0
    # wall time goes to stdout, not summary.json: output files must be
    # byte-for-byte reproducible under the same config
    print(f"solve finished in {wall:.1f}s")

    v = sol.v
    _write_csv(
        out_dir / "value.csv", header, "node,v,error",
        zip(v.nodes.tolist(), v.values.tolist(),
            (v.stderr if v.stderr is not None else np.zeros_like(v.values)).tolist()),
    )
    _write_csv(
        out_dir / "thresholds.csv", header, "n,phi_n,sup_diff,bound",
        ((r["n"], float(r["phi_n"]), float(r["sup_diff"]), float(r["bound"]))
         for r in sol.trace),
    )
    _write_csv(
        out_dir / "risk.csv", header, "pi,U",
        zip(sol.pi_grid.tolist(), sol.risk.tolist()),
    )
    summary = {
        "status": "ok",
        "phi_inf": sol.phi_inf,
        "phi_bracket": list(sol.phi_bracket),
        "certificates": sol.certificates,
        "master_seed": mc.master_seed,
        "config_hash": config_hash(raw),
        "grid": {"h": sol.fs.grid.h, "n_points": sol.fs.grid.n_points},
    }
    _write_summary(out_dir, raw, summary)
    for name in ("value.csv", "thresholds.csv", "risk.csv"):
        _maybe_gnuplot(out_dir / name, gnuplot)
    return 0


def _write_summary(out_dir: Path, raw: dict, payload: dict):
    payload = dict(payload)
    payload.setdefault("config_hash", config_hash(raw))
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_simulate(raw: dict, out_dir: Path) -> int:
    model = _parse_problem(raw["problem"])
    cfg, thresholds = _simulation(raw, model, need_thresholds=True)
    gnuplot = _output_opts(raw)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _csv_header(raw, cfg.master_seed)
    rows = []
    for phi_star in thresholds:
        if phi_star < 0:
            raise ConfigError(f"thresholds must be nonnegative, got {phi_star}")
        est = evaluate_policy(model, phi_star, cfg)
        rows.append((phi_star, est.mean, est.stderr, est.censored_count))
    _write_csv(out_dir / "risk.csv", header, "threshold,mean,stderr,censored_count", rows)
    _write_summary(out_dir, raw, {"status": "ok", "n_paths": cfg.n_paths})
    _maybe_gnuplot(out_dir / "risk.csv", gnuplot)
    return 0


def cmd_asymptotics(raw: dict, costs, out_dir: Path) -> int:
    if not costs:
        raise ConfigError("asymptotics needs a nonempty cost list")
    if any(c <= 0 for c in costs):
        raise ConfigError("costs must all be positive")
    base = raw["problem"]
    mc, eps, mode, h, margin = _numerics(raw)
    _check_grid_step(h, _parse_problem(base))
    gnuplot = _output_opts(raw)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _csv_header(raw, mc.master_seed)
    rows = []
    probe_pis = (0.0, 0.5, 0.8)
    fs = None
    try:
        for c in sorted(costs):
            prob = dict(base)
            prob["delay_cost"] = c
            model = _parse_problem(prob)
            sol = solve(model, eps, mc, mode=mode, h=h, grid_margin=margin, fs=fs)
            fs = sol.fs  # psi/eta do not depend on c; reuse across the sweep
            pair = bt_expansion(c, model)
            odds = np.array([p / (1 - p) for p in probe_pis])
            vals = np.asarray(sol.v(odds))
            u = [1 - p + c * (1 - p) * v for p, v in zip(probe_pis, vals)]
            rows.append((c, pair.phi_c, pair.f_c, sol.phi_inf, u[0], u[1], u[2]))
    except _NUMERICAL_ERRORS as e:
        _write_summary(out_dir, raw, {"status": "error", "diagnostic": str(e)})
        print(f"numerical diagnostic: {e}", file=sys.stderr)
        return 3
    _write_csv(
        out_dir / "asymptotics.csv", header,
        "c,bt_phi,bt_f,phi_inf,U_pi0,U_pi05,U_pi08", rows,
    )
    _write_summary(out_dir, raw, {"status": "ok", "n_costs": len(rows)})
    _maybe_gnuplot(out_dir / "asymptotics.csv", gnuplot)
    return 0


def _selftest_checks(raw: dict | None):
    """Yield (name, measured, expected, tolerance) tuples; tolerance is absolute."""
    fault = (raw or {}).get("fault_injection")
    seed = 20260826

    # K operator identity: simple marks reduce K to a rescaling
    model = ReducedModel(mu=1.0, lam0=6.0, lam1=1.0, lam=1.0, c=1.0,
                         prior=0.0, marks=MarkModel.simple())
    nodes = np.linspace(0.0, 10.0, 101)
    w = GridFunction(nodes, -np.exp(-nodes), threshold=np.inf)
    phi_test = 3.0
    yield (
        "K identity (simple marks)",
        float(apply_K(w, phi_test, model)),
        float(w(phi_test * model.lam1 / model.lam0)),
        1e-12,
    )

    # closed-form expansion internal consistency
    pair = bt_expansion(0.02, model)
    yield ("asymptotic f_c = -log(c)/phi_c", pair.f_c, -math.log(0.02) / pair.phi_c, 1e-12)

    # chain-engine cross check: int_0^tau e^(-beta t) dt == (1 - E e^(-beta tau))/beta
    grid = GridSpec(h=5e-3, n_points=800)
    mc = MCConfig(n_paths=2000, master_seed=seed)
    ones = np.ones_like(grid.nodes)
    est = discounted_running_cost(1.0, grid.z_max, ones, model.beta, mc, model, grid)
    lap = hitting_laplace(1.0, grid.z_max, model.beta, mc.with_seed(seed + 7), model, grid)
    yield (
        "chain resolvent vs hitting Laplace factor",
        est.mean,
        (1.0 - lap.mean) / model.beta,
        3.0 * (est.stderr + lap.stderr / model.beta) + 1e-4,
    )

    # printed and integrated resolvent formulas coincide at unit disorder rate
    first, second = remark32_oracles(model, 1.0)
    yield (
        "resolvent formulas (printed vs integrated, unit rate)",
        second,
        1.0 / model.lam1 * (1.0 + model.lam / (model.lam + model.lam0)),
        1e-12,
    )

    # linear-cost resolvent has the exact closed form phi/lam1 + lam/(lam1 beta);
    # a mean-reverting variant (lam1 > lam + lam0) keeps the far boundary
    # unreachable so the absorbing truncation costs nothing measurable
    rev = ReducedModel(mu=1.0, lam0=1.0, lam1=6.0, lam=1.0, c=1.0,
                       prior=0.0, marks=MarkModel.simple())
    rg = GridSpec(h=2e-3, n_points=3000)
    rmc = MCConfig(n_paths=2000, master_seed=seed + 3)
    lin = discounted_running_cost(1.0, rg.z_max, rg.nodes.copy(), rev.beta, rmc, rev, rg)
    yield (
        "linear-cost resolvent (mean-reverting chain)",
        lin.mean,
        1.0 / rev.lam1 + rev.lam / (rev.lam1 * rev.beta),
        3.0 * lin.stderr + 1e-3,
    )

    # fundamental solutions at a reduced budget, checked against frozen
    # values from a stiff adaptive integrator of the resolvent equation
    # (lam=2, lam0=lam1=mu=1: psi(1)/psi(2) = 0.55573449, psi(0.5)/psi(2)
    # = 0.36387121 at relative tolerance 1e-12)
    poly_model = ReducedModel(mu=1.0, lam0=1.0, lam1=1.0, lam=2.0, c=1.0,
                              prior=0.0, marks=MarkModel.simple())
    pg = GridSpec(h=2e-3, n_points=1500)
    pmc = MCConfig(n_paths=2048, master_seed=seed + 1, target_rel_stderr=5e-3)
    fs = build_fs(pg, poly_model, pmc)
    if fault == "corrupt_psi":
        lp = fs.log_psi.copy()
        lp[pg.n_points // 2 :] += 0.5  # inject a kink; Wronskian constancy breaks
        from dataclasses import replace as _replace
        from .fundamental import wronskian_ref
        fs = _replace(fs, log_psi=lp)
        _, disp = wronskian_ref(fs)
        yield ("Wronskian dispersion (fault injected)", disp, 0.0, 0.2)
    else:
        yield ("Wronskian dispersion", fs.b_dispersion, 0.0, 0.2)
        i1, i2, ih = pg.index_of(1.0), pg.index_of(2.0), pg.index_of(0.5)
        r12 = math.exp(fs.log_psi[i1] - fs.log_psi[i2])
        rh2 = math.exp(fs.log_psi[ih] - fs.log_psi[i2])
        yield ("psi(1)/psi(2) vs integrator oracle", r12, 0.55573449, 0.02)
        yield ("psi(0.5)/psi(2) vs integrator oracle", rh2, 0.36387121, 0.02)

    # full-pipeline equivalence with the Wiener closed form at a reduced
    # Monte Carlo budget (loose per-edge target, coarse certificates)
    wmodel = ReducedModel(mu=1.0, lam0=1.0, lam1=1.0, lam=1.0, c=1.0,
                          prior=0.0, marks=MarkModel.simple())
    wmc = MCConfig(n_paths=1024, master_seed=seed + 5, target_rel_stderr=3e-3)
    wsol = solve(wmodel, 1e-3, wmc)
    yield ("Wiener threshold (reduced budget)", wsol.phi_inf, wiener_threshold(1.0), 0.01)
    yield ("Wiener risk at pi=0.5 (reduced budget)", float(wsol.risk[50]),
           wiener_risk(0.5, 1.0), 0.005)

    # Wiener closed form: threshold root recomputed by a Riemann sum
    r_star = wiener_threshold(1.0)
    zs = np.linspace(1e-6, r_star * 1.5, 400_000)
    f = (zs - 1.0) * (1.0 + zs) * np.exp(-2.0 / zs)
    cum = np.cumsum(f) * (zs[1] - zs[0])
    i = np.searchsorted(cum > 0, True)
    yield ("Wiener threshold vs Riemann oracle", r_star, float(zs[i]), 1e-3)
    yield ("Wiener risk below 1 - pi", wiener_risk(0.5, 1.0), 0.5, 0.51)


def cmd_selftest(raw: dict | None) -> int:
    failures = 0
    for name, measured, expected, tol in _selftest_checks(raw):
        ok = abs(measured - expected) <= tol
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: measured={measured:.6g} expected={expected:.6g} tol={tol:.3g}")
        if not ok:
            failures += 1
    if failures:
        print(f"{failures} selftest check(s) failed", file=sys.stderr)
        return 1
    print("all selftest checks passed")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdetect", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("solve", "simulate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
    sa = sub.add_parser("asymptotics")
    sa.add_argument("--config", required=True)
    sa.add_argument("--out", required=True)
    sa.add_argument("--costs", required=True,
                    help="comma-separated delay-cost rates, e.g. 0.02,0.04,0.1")
    st = sub.add_parser("selftest")
    st.add_argument("--config", default=None)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            raw = load_config(args.config) if args.config else None
            return cmd_selftest(raw)
        raw = load_config(args.config)
        out_dir = Path(args.out)
        if args.command == "solve":
            return cmd_solve(raw, out_dir)
        if args.command == "simulate":
            return cmd_simulate(raw, out_dir)
        if args.command == "asymptotics":
            costs = [float(x) for x in args.costs.split(",") if x.strip()]
            return cmd_asymptotics(raw, costs, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as e:
        print(f"numerical diagnostic: {e}", file=sys.stderr)
        return 3
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
