"""Command-line entry point: solve, simulate, sweep, oracle and validate.

Configuration is a sectioned key-value file (INI syntax) mirroring the model
blocks; any preset can serve as a base and individual keys can be overridden
from the command line with repeated ``--set section.key=value`` flags.

Sections and keys (units: rates per year, horizon in years):

    [model]       n (int)
    [factor]      kind=ou, u0, kappa (mu0(y) = u0 - kappa y), sigma0 (comma list,
                  one loading per driver), rho, domain (lo, hi)
    [credit]      kind=exp_affine|zero; for exp_affine: a_<i>_<bits>, b_<i>_<bits>,
                  c_<i>_<bits> per 1-based name i and state bitstring (states
                  omitted inherit the all-alive parameters of the name)
    [market]      mu (comma list), sigma (comma list of diagonal volatilities),
                  sigma_kind=const|scott|stein (scott/stein take sigma_eps and
                  sigma_gamma lists), sigma_scale, r
    [preference]  p, k1, k2, horizon
    [grid]        y_lo, y_hi, n_y, n_t, clamp (bool)
    [mc]          n_paths, n_steps, seed, y0, x0, state (bitstring)

Exit codes: 0 ok, 2 validation/configuration failure, 3 solver failure,
4 statistical-test failure.  The environment variable CREDITFOLIO_THREADS
bounds the number of worker threads used for same-generation default states.

All artifacts are CSV with a header row and floats at 17 significant digits,
so files round-trip exactly and identical (config, seed) reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from . import oracle as oracle_mod
from . import sim
from .fields import GridSpec, PolicyField, SolutionField, SolveResult
from .model import (CreditSpec, DefaultState, FactorSpec, MarketSpec, ModelSpec,
                    PreferenceSpec, PRESET_NAMES, all_states, states_by_cardinality,
                    validate_spec)
from .pde import solve_recursive_system
from .strategy import SolverError

__all__ = ["main", "build_model", "preset_config", "load_solution"]

_FMT = "%.17g"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_STATISTICAL = 4


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def preset_config(name: str) -> dict:
    """Config-dict rendering of a named preset (the CLI's canonical model form)."""
    if name == "benchmark_s5":
        return {
            "model": {"n": "2"},
            "factor": {"kind": "ou", "u0": "0.5", "kappa": "1.2", "sigma0": "0.6, 0.4",
                       "rho": "0.0", "domain": "-1.25, 1.25"},
            "credit": {"kind": "exp_affine",
                       "a_1_00": "0.6", "b_1_00": "0.4", "c_1_00": "0.1",
                       "a_2_00": "0.5", "b_2_00": "0.3", "c_2_00": "0.1",
                       "a_1_01": "0.8", "b_1_01": "0.6", "c_1_01": "0.1",
                       "a_2_10": "0.8", "b_2_10": "0.6", "c_2_10": "0.1"},
            "market": {"mu": "0.2, 0.2", "sigma": "0.8, 0.8", "r": "0.2"},
            "preference": {"p": "0.8", "k1": "1.0", "k2": "1.0", "horizon": "1.0"},
        }
    if name == "merton_nodefault":
        return {
            "model": {"n": "2"},
            "factor": {"kind": "ou", "u0": "0.5", "kappa": "1.0", "sigma0": "0.25, 0.25",
                       "rho": "0.0", "domain": "-1.25, 1.25"},
            "credit": {"kind": "zero"},
            "market": {"mu": "0.25, 0.25", "sigma": "0.2, 0.2", "r": "0.2"},
            "preference": {"p": "0.5", "k1": "1.0", "k2": "1.0", "horizon": "1.0"},
        }
    if name in ("scott_example22", "stein_stein_example22"):
        kind = "scott" if name == "scott_example22" else "stein"
        return {
            "model": {"n": "2"},
            "factor": {"kind": "ou", "u0": "0.2", "kappa": "1.0", "sigma0": "0.3, 0.2",
                       "rho": "0.3", "domain": "-1.25, 1.25"},
            "credit": {"kind": "exp_affine",
                       "a_1_00": "0.5", "b_1_00": "0.3", "c_1_00": "0.2",
                       "a_2_00": "0.4", "b_2_00": "0.2", "c_2_00": "0.2",
                       "a_1_01": "0.7", "b_1_01": "0.4", "c_1_01": "0.2",
                       "a_2_10": "0.6", "b_2_10": "0.4", "c_2_10": "0.2"},
            "market": {"mu": "0.25, 0.24", "sigma_kind": kind,
                       "sigma_eps": "0.25, 0.16", "sigma_gamma": "0.5, 0.4", "r": "0.2"},
            "preference": {"p": "0.5", "k1": "1.0", "k2": "1.0", "horizon": "1.0"},
        }
    raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()]


def read_config(path: str) -> dict:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


def apply_overrides(config: dict, pairs: list[str]) -> dict:
    out = {sec: dict(kv) for sec, kv in config.items()}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {pair!r}")
        dotted, value = pair.split("=", 1)
        sec, key = dotted.split(".", 1)
        out.setdefault(sec, {})[key.strip()] = value.strip()
    return out


def build_model(config: dict) -> ModelSpec:
    """ModelSpec from a config dict; raises ValueError on malformed input."""
    try:
        n = int(config["model"]["n"])
        fac = config["factor"]
        if fac.get("kind", "ou") != "ou":
            raise ValueError("only the mean-reverting (ou) factor kind is configurable")
        u0, kappa = float(fac["u0"]), float(fac["kappa"])
        sigma0 = np.array(_floats(fac["sigma0"]))
        lo, hi = _floats(fac["domain"])
        factor = FactorSpec(mu0=lambda y, u0=u0, kappa=kappa: u0 - kappa * np.asarray(y, dtype=float),
                            sigma0=sigma0, rho=float(fac.get("rho", "0")),
                            domain_lo=lo, domain_hi=hi)

        cred = config["credit"]
        if cred.get("kind", "exp_affine") == "zero":
            credit = CreditSpec.zero(n)
        else:
            table = {}
            for key, val in cred.items():
                if key == "kind":
                    continue
                coef, name_s, bits_s = key.split("_")
                i = int(name_s) - 1
                entry = table.setdefault((i, bits_s), [0.0, 0.0, 0.0])
                entry["abc".index(coef)] = float(val)
            credit = CreditSpec.exp_affine(n, {k: tuple(v) for k, v in table.items()})

        mkt = config["market"]
        mu = _floats(mkt["mu"])
        scale = float(mkt.get("sigma_scale", "1.0"))
        kind = mkt.get("sigma_kind", "const")
        if kind == "const":
            sigma = scale * np.array(_floats(mkt["sigma"]))
        elif kind in ("scott", "stein"):
            eps = np.array(_floats(mkt["sigma_eps"]))
            gam = np.array(_floats(mkt["sigma_gamma"]))
            if kind == "scott":
                sigma = lambda y, e=eps, g=gam, s=scale: s * np.sqrt(e + np.exp(g * np.asarray(y, dtype=float)[..., None]))
            else:
                sigma = lambda y, e=eps, g=gam, s=scale: s * np.sqrt(e + g * np.asarray(y, dtype=float)[..., None] ** 2)
        else:
            raise ValueError(f"unknown sigma_kind {kind!r}")
        market = MarketSpec(mu=mu, sigma=sigma, r=float(mkt["r"]))

        pref_c = config["preference"]
        pref = PreferenceSpec(p=float(pref_c["p"]), K1=float(pref_c["k1"]),
                              K2=float(pref_c["k2"]), T=float(pref_c["horizon"]))
        return ModelSpec(n=n, factor=factor, credit=credit, market=market, pref=pref)
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"bad model configuration: {exc}") from exc


def build_grid(config: dict, args) -> GridSpec:
    g = config.get("grid", {})
    return GridSpec(
        y_lo=float(g.get("y_lo", "-1.0")), y_hi=float(g.get("y_hi", "1.0")),
        n_y=args.ny or int(g.get("n_y", "401")), n_t=args.nt or int(g.get("n_t", "400")),
        clamp_enabled=not args.no_clamp and g.get("clamp", "true").lower() != "false")


def _mc_params(config: dict, args) -> dict:
    mc = config.get("mc", {})
    return {
        "n_paths": args.paths or int(mc.get("n_paths", "100000")),
        "n_steps": args.steps or int(mc.get("n_steps", "400")),
        "seed": args.seed if args.seed is not None else int(mc.get("seed", "42")),
        "y0": float(mc.get("y0", "0.0")),
        "x0": float(mc.get("x0", "1.0")),
        "z0": DefaultState.from_bitstring(mc.get("state", "0" * int(config["model"]["n"]))),
    }


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_FMT % v if isinstance(v, float) else v for v in row])


def dump_solution(result: SolveResult, out_dir: Path, spec: ModelSpec) -> None:
    n = spec.n
    for bits, fld in result.fields.items():
        y = fld.grid.y_nodes()
        rows = []
        for k, t in enumerate(fld.t_nodes):
            g_row = fld.f[k] ** fld.beta
            for j in range(fld.grid.n_y):
                rows.append((float(t), float(y[j]), float(fld.f[k, j]),
                             float(g_row[j]), float(fld.df[k, j])))
        _write_csv(out_dir / f"f_state_{bits}.csv", ["t", "y", "f", "g", "df_dy"], rows)
    for bits, pol in result.policies.items():
        y = pol.grid.y_nodes()
        header = (["t", "y"] + [f"hhat_{i+1}" for i in range(n)]
                  + [f"ahat_{i+1}" for i in range(n)] + [f"pi_{i+1}" for i in range(n)]
                  + ["c_mult"])
        rows = []
        for k, t in enumerate(pol.t_nodes):
            for j in range(pol.grid.n_y):
                rows.append((float(t), float(y[j]),
                             *map(float, pol.hhat[k, j]), *map(float, pol.ahat[k, j]),
                             *map(float, pol.pi[k, j]), float(pol.c_mult[k, j])))
        _write_csv(out_dir / f"policy_state_{bits}.csv", header, rows)
    _write_csv(out_dir / "bounds.csv",
               ["state", "k_under", "k_bar_T", "theta_rate", "m_lo", "m_hi",
                "m_lo_norms", "m_hi_norms"],
               [(bits, b.k_under, b.k_bar_final, b.theta_rate, b.m_lo, b.m_hi,
                 b.m_lo_norms, b.m_hi_norms) for bits, b in result.bounds.items()])
    _write_csv(out_dir / "solve_report.csv",
               ["state", "elapsed", "resid_max", "policy_resid_max", "newton_iters_max",
                "clamp_hits", "bound_margin_lo", "bound_margin_hi"],
               [(bits, row["elapsed"], row["resid_max"], row.get("policy_resid_max", 0.0),
                 float(row["newton_iters_max"]), float(row["clamp_hits"]),
                 row["bound_margin_lo"], row["bound_margin_hi"])
                for bits, row in result.report.items()])


def load_solution(out_dir: Path, spec: ModelSpec) -> SolveResult:
    """Rebuild fields and policies from a previous solve's CSV artifacts."""
    out_dir = Path(out_dir)
    fields: dict[str, SolutionField] = {}
    policies: dict[str, PolicyField] = {}
    beta = spec.beta
    for path in sorted(out_dir.glob("f_state_*.csv")):
        bits = path.stem.replace("f_state_", "")
        data = np.genfromtxt(path, delimiter=",", names=True)
        t_nodes = np.unique(data["t"])
        y_nodes = np.unique(data["y"])
        n_t, n_y = len(t_nodes) - 1, len(y_nodes)
        grid = GridSpec(float(y_nodes[0]), float(y_nodes[-1]), n_y, n_t)
        f = data["f"].reshape(n_t + 1, n_y)
        df = data["df_dy"].reshape(n_t + 1, n_y)
        fields[bits] = SolutionField(state=DefaultState.from_bitstring(bits), grid=grid,
                                     t_nodes=t_nodes, f=f, df=df, beta=beta)
    if not fields:
        raise FileNotFoundError(f"no f_state_*.csv artifacts under {out_dir}")
    n = spec.n
    for path in sorted(out_dir.glob("policy_state_*.csv")):
        bits = path.stem.replace("policy_state_", "")
        fld = fields[bits]
        grid = fld.grid
        raw = np.loadtxt(path, delimiter=",", skiprows=1)
        shaped = raw.reshape(grid.n_t + 1, grid.n_y, -1)
        pol = PolicyField(
            state=fld.state, grid=grid, t_nodes=fld.t_nodes,
            hhat=shaped[..., 2:2 + n], ahat=shaped[..., 2 + n:2 + 2 * n],
            theta=np.zeros_like(shaped[..., 2:2 + n]),
            pi=shaped[..., 2 + 2 * n:2 + 3 * n], c_mult=shaped[..., 2 + 3 * n])
        # theta is not dumped; rebuild it from hhat through the admissibility tie
        y_nodes = grid.y_nodes()
        sig_diag = spec.market.sigma_diag_grid(y_nodes)
        lam = (spec.intensity(y_nodes, fld.state) * (1.0 - fld.state.indicator()))
        if sig_diag is not None:
            xi = (spec.market.mu - spec.market.r) / sig_diag
            pol.theta[:] = xi[None] - lam[None] * pol.hhat / sig_diag[None]
        else:
            from .dual import theta_from_h

            for k in range(grid.n_t + 1):
                for j in range(grid.n_y):
                    pol.theta[k, j] = theta_from_h(pol.hhat[k, j], float(y_nodes[j]),
                                                   fld.state, spec)
        policies[bits] = pol
    return SolveResult(fields=fields, policies=policies, bounds={}, report={})


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _resolve_config(args) -> dict:
    if args.config:
        config = read_config(args.config)
    elif args.preset:
        config = preset_config(args.preset)
    else:
        raise ValueError("supply --preset or --config")
    return apply_overrides(config, args.set or [])


def cmd_validate(args) -> int:
    config = _resolve_config(args)
    spec = build_model(config)
    grid = build_grid(config, args)
    report = validate_spec(spec, grid.y_nodes())
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "validation.csv", ["check", "passed", "detail", "where"],
                   [(c.name, int(c.passed), c.detail,
                     "" if c.where is None else _FMT % c.where) for c in report.checks])
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_solve(args) -> int:
    config = _resolve_config(args)
    spec = build_model(config)
    grid = build_grid(config, args)
    report = validate_spec(spec, grid.y_nodes())
    if not report.ok:
        print(report, file=sys.stderr)
        return EXIT_VALIDATION
    result = solve_recursive_system(spec, grid, validate=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_solution(result, out, spec)
    for bits, row in sorted(result.report.items()):
        print(f"state {bits}: solved in {row['elapsed']:.2f}s, control residual "
              f"{max(row['resid_max'], row.get('policy_resid_max', 0.0)):.2e}, "
              f"clamp hits {row['clamp_hits']}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _resolve_config(args)
    spec = build_model(config)
    grid = build_grid(config, args)
    mc = _mc_params(config, args)
    report = validate_spec(spec, grid.y_nodes())
    if not report.ok:
        print(report, file=sys.stderr)
        return EXIT_VALIDATION
    if args.solution:
        result = load_solution(Path(args.solution), spec)
    else:
        result = solve_recursive_system(spec, grid, validate=False)

    probes = (0.25 * spec.pref.T, 0.5 * spec.pref.T, spec.pref.T)
    reports: list[sim.McReport] = []
    bundle = sim.simulate_market(spec, mc["n_paths"], mc["n_steps"], mc["seed"],
                                 y0=mc["y0"], z0=mc["z0"], comp_probe_times=probes, keep=0)
    for t_probe, samples in sorted(bundle.compensator.items()):
        for i in range(spec.n):
            est = float(np.mean(samples[:, i]))
            se = float(np.std(samples[:, i], ddof=1) / np.sqrt(len(samples)))
            reports.append(sim.McReport(name=f"compensator name={i+1} t={t_probe:g}",
                                        estimate=est, target=0.0, se=se,
                                        n_paths=mc["n_paths"]))
    reports.extend(sim.check_G_martingale(spec, result, mc["n_paths"], mc["n_steps"],
                                          mc["seed"] + 1, probes=probes, y0=mc["y0"],
                                          z0=mc["z0"]))
    for state in states_by_cardinality(spec.n):
        for t_probe in (0.5 * spec.pref.T, spec.pref.T):
            reports.append(sim.mc_feynman_kac(spec, result, state, (t_probe, mc["y0"]),
                                              mc["n_paths"], seed=mc["seed"] + 2))
    reports.append(sim.duality_gap(spec, result, mc["x0"], mc["n_paths"], mc["n_steps"],
                                   mc["seed"] + 3, y0=mc["y0"], z0=mc["z0"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dump_paths:
        pb = sim.simulate_market(spec, mc["n_paths"], mc["n_steps"], mc["seed"] + 3,
                                 y0=mc["y0"], z0=mc["z0"], keep=args.dump_paths)
        sim.simulate_wealth(pb, result, mc["x0"])
        rows = []
        n_kept = pb.kept["Y"].shape[0]
        for path_i in range(n_kept):
            for kk, t in enumerate(pb.t_mesh):
                rows.append((path_i, float(t), float(pb.kept["Y"][path_i, kk]),
                             format(int(pb.kept["H_bits"][path_i, kk]), f"0{spec.n}b")[::-1],
                             float(pb.kept["X"][path_i, kk]), float(pb.kept["c"][path_i, kk]),
                             float(pb.kept["Gamma"][path_i, kk])))
        _write_csv(out / "paths.csv", ["path", "t", "Y", "H_bits", "X", "c", "Gamma"], rows)
    _write_csv(out / "mc_report.csv",
               ["test", "estimate", "target", "se", "tolerance", "n_paths", "pass"],
               [(r.name, r.estimate, r.target, r.se, r.tolerance, r.n_paths,
                 int(r.passed)) for r in reports])
    n_fail = sum(not r.passed for r in reports)
    for r in reports:
        print(r)
    return EXIT_OK if n_fail == 0 else EXIT_STATISTICAL


_SWEEPS = {
    "fig1": {"axis": "t", "values": (0.0, 0.3, 0.6), "p": 0.8},
    "fig2": {"axis": "p", "values": (0.1, 0.5, 0.8), "t": 0.6},
    "fig3": {"axis": "sigma_scale", "values": (1.0, 1.25, 1.5), "t": 0.0, "p": 0.1},
}


def cmd_sweep(args) -> int:
    config = _resolve_config(args)
    plan = _SWEEPS[args.sweep]
    rows = []

    def emit(result, spec, grid, axis_value, t_clock):
        u = spec.pref.T - t_clock
        y_nodes = grid.y_nodes()
        for state in all_states(spec.n):
            pol = result.policy(state)
            pi_slice = pol.channels_at(np.full(grid.n_y, u), y_nodes)["pi"]
            for i in state.alive:
                for j in range(grid.n_y):
                    rows.append((float(axis_value), float(y_nodes[j]), state.bitstring,
                                 i + 1, float(pi_slice[j, i])))

    solve_values = [None] if plan["axis"] == "t" else plan["values"]
    for value in solve_values:
        cfg = {sec: dict(kv) for sec, kv in config.items()}
        if plan["axis"] == "p":
            cfg["preference"]["p"] = repr(value)
        elif plan["axis"] == "sigma_scale":
            cfg.setdefault("market", {})["sigma_scale"] = repr(value)
        if "p" in plan:
            cfg["preference"]["p"] = repr(plan["p"])
        spec = build_model(cfg)
        grid = build_grid(cfg, args)
        report = validate_spec(spec, grid.y_nodes())
        if not report.ok:
            print(report, file=sys.stderr)
            return EXIT_VALIDATION
        result = solve_recursive_system(spec, grid, validate=False)
        if plan["axis"] == "t":
            for t_clock in plan["values"]:
                emit(result, spec, grid, t_clock, t_clock)
        else:
            emit(result, spec, grid, value, plan["t"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"sweep_{args.sweep}.csv",
               ["axis_value", "y", "state", "name", "pi_hat"], rows)
    print(f"wrote sweep_{args.sweep}.csv with {len(rows)} rows")
    return EXIT_OK


def cmd_oracle(args) -> int:
    m = oracle_mod.ScalarModel(lambda0=args.lambda0, sigma=args.sigma_s, xi=args.xi,
                               r=args.r, q=args.q, K1=args.k1, K2=args.k2, T=args.horizon)
    rows = []
    for t in np.linspace(0.0, m.T, 9):
        rows.append(("all_defaulted_f", float(t), float(oracle_mod.all_defaulted_closed_form(t, m))))
    if m.q == 0.0 and m.lambda0 > 0:
        try:
            fp = oracle_mod.picard_fixed_point(m)
            resid = oracle_mod.fixed_point_residual(fp, m)
            for u in np.linspace(0.0, m.T, 9):
                rows.append(("loading_fixed_point_x", float(u), float(fp(u))))
            rows.append(("fixed_point_residual", m.T, float(resid)))
            rows.append(("contraction_sup", m.T, float(fp.contraction_sup)))
        except ValueError as exc:
            print(f"fixed point unavailable: {exc}", file=sys.stderr)
    rows.append(("merton_fraction", 0.0,
                 oracle_mod.merton_fraction(args.mu, args.r, args.sigma_s, args.p)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "oracle.csv", ["quantity", "t", "value"], rows)
    for name, t, v in rows:
        print(f"{name}(t={t:g}) = {v:.12g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="creditfolio",
        description="Optimal investment/consumption with defaultable stocks: "
                    "solve the default-state PDE system, extract policies, validate by simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mc=False):
        p.add_argument("--preset", choices=PRESET_NAMES, help="named model preset")
        p.add_argument("--config", help="INI model configuration file")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", default="out", help="output directory for CSV artifacts")
        p.add_argument("--ny", type=int, help="spatial nodes (odd)")
        p.add_argument("--nt", type=int, help="time steps")
        p.add_argument("--no-clamp", action="store_true",
                       help="disable the a-priori clamp on the nonlinear source")
        p.add_argument("--seed", type=int, help="Monte Carlo seed")
        if with_mc:
            p.add_argument("--paths", type=int, help="Monte Carlo paths")
            p.add_argument("--steps", type=int, help="Monte Carlo time steps")

    p_solve = sub.add_parser("solve", help="solve the PDE system and dump fields/policies")
    common(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_sim = sub.add_parser("simulate", help="run the Monte Carlo validation suite")
    common(p_sim, with_mc=True)
    p_sim.add_argument("--solution", help="directory with a prior solve's CSV artifacts")
    p_sim.add_argument("--dump-paths", type=int, default=0, metavar="N",
                       help="also write the first N simulated trajectories to paths.csv")
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="policy sweeps behind the sensitivity figures")
    common(p_sweep)
    p_sweep.add_argument("--sweep", choices=sorted(_SWEEPS), required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="check model assumptions on the grid")
    common(p_val)
    p_val.set_defaults(func=cmd_validate)

    p_or = sub.add_parser("oracle", help="closed-form single-name ground truths")
    p_or.add_argument("--out", default="out")
    p_or.add_argument("--lambda0", type=float, default=0.5)
    p_or.add_argument("--sigma", dest="sigma_s", type=float, default=0.8)
    p_or.add_argument("--xi", type=float, default=0.25)
    p_or.add_argument("--r", type=float, default=0.1)
    p_or.add_argument("--q", type=float, default=0.0)
    p_or.add_argument("--k1", type=float, default=1.0)
    p_or.add_argument("--k2", type=float, default=1.0)
    p_or.add_argument("--horizon", type=float, default=1.0)
    p_or.add_argument("--mu", type=float, default=0.25)
    p_or.add_argument("--p", type=float, default=0.5)
    p_or.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
