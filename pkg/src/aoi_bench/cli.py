"""``aoi-bench`` command line: sweeps, verification suites, oracle and trace export.

Exit codes: 0 success, 1 verification failure, 2 bad configuration,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .engine import AGE, metric_key, run, run_coupled
from .metrics.checks import sorted_dominance_check
from .metrics.oracle import BUILTIN_INSTANCES, ORACLE_PENALTIES, OracleInstance, discrete_optimality_oracle
from .metrics.penalty import PenaltySpec
from .model import ConfigError, ScenarioConfig, TraceError, validate_scenario
from .policies import parse_policy
from .presets import (
    SUITES,
    SWEEP_PRESETS,
    SweepRow,
    parse_rho,
    rows_to_csv,
    run_scenario,
    run_sweep,
)
from .traceio import emit_trace

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class IOFailure(Exception):
    pass


def _load_scenario(path: str) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read scenario {path}: {exc.strerror or exc}") from None
    return ScenarioConfig.loads(text)


def _check(cfg: ScenarioConfig) -> ScenarioConfig:
    rep = validate_scenario(cfg)
    if not rep.ok:
        raise ConfigError("invalid scenario: " + "; ".join(rep.problems))
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def _policies(arg) -> list:
    if not arg:
        return []
    names = [p.strip() for p in arg.split(",") if p.strip()]
    for p in names:
        parse_policy(p)
    return names


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    if args.preset and args.scenario:
        raise ConfigError("use either --preset or --scenario")
    if args.preset in SUITES and args.preset not in SWEEP_PRESETS:
        return cmd_verify(args, suite=args.preset)
    if args.preset:
        if args.preset not in SWEEP_PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from "
                              f"{', '.join(sorted(set(SWEEP_PRESETS) | set(SUITES)))}")
        preset = SWEEP_PRESETS[args.preset]()
        rho = parse_rho(args.rho) if args.rho else None
        pols = _policies(args.policy) or None
        rows = run_sweep(preset, rho=rho, reps=args.reps, seed=args.seed, horizon=args.horizon, policies=pols)
        text = rows_to_csv(rows)
        resolved = preset.to_dict()
        resolved.update({
            "rho": list(rho if rho is not None else preset.rho),
            "reps": args.reps or preset.reps,
            "seed": args.seed,
            "horizon": args.horizon if args.horizon is not None else preset.base.horizon,
            "policies": pols or list(preset.policies),
            "lambda_rule": "lambda = rho * M / (N * E[X])",
        })
        return _emit_csv(args, preset.name, text, resolved)
    if not args.scenario:
        raise ConfigError("run needs --preset or --scenario")
    cfg = _load_scenario(args.scenario)
    if args.horizon is not None:
        cfg = cfg.replace(horizon=float(args.horizon))
    pols = _policies(args.policy) or [cfg.policy_spec]
    cfg = _check(cfg.replace(policy_spec=pols[0]))
    for p in pols[1:]:
        _check(cfg.replace(policy_spec=p))
    metric = PenaltySpec.parse(args.metric)
    if args.couple:
        return _run_coupled(args, cfg, pols, metric)
    rows = []
    for p in pols:
        rows += run_scenario(cfg, p, args.reps or 1, args.seed, metric)
    resolved = {"scenario": cfg.to_dict(), "policies": pols, "reps": args.reps or 1, "seed": args.seed,
                "metric": metric.label}
    stem = Path(args.scenario).stem
    return _emit_csv(args, stem, rows_to_csv(rows), resolved)


def _run_coupled(args, cfg, pols, metric) -> int:
    if len(pols) < 2:
        raise ConfigError("--couple needs at least two policies")
    seed = args.seed if args.seed else cfg.seed
    c = run_coupled(cfg.replace(seed=seed), pols, metrics=((AGE, metric),))
    key = metric_key(AGE, metric)
    rows = []
    lam = cfg.arrival_spec.gen_rate
    rho = lam * cfg.n_flows * cfg.service_dist.mean / cfg.n_servers
    for name, res in c.results.items():
        rows.append(SweepRow(name, rho, lam, seed, 1, key, res.penalties[key], 0.0))
    text = rows_to_csv(rows)
    ref = c.traces[0]
    dom = ["reference,policy,holds,first_violation,violations"]
    ok = True
    for tr in c.traces[1:]:
        rep = sorted_dominance_check(ref, tr)
        ok &= rep.holds
        fv = "" if rep.first_violation is None else repr(rep.first_violation[0])
        dom.append(f"{ref.policy},{tr.policy},{int(rep.holds)},{fv},{rep.n_violations}")
    resolved = {"scenario": cfg.replace(seed=seed).to_dict(), "policies": pols, "coupled": True,
                "flagged_epochs": len(c.flagged), "idle_epochs": len(c.idle_epochs)}
    code = _emit_csv(args, Path(args.scenario).stem + "-coupled", text, resolved)
    if args.output:
        out = _outdir(args.output)
        _write(out / "dominance.csv", "\n".join(dom) + "\n")
        ext = "jsonl" if args.format == "jsonl" else "csv"
        for name, res in c.results.items():
            try:
                emit_trace(res, out / f"trace-{name}.{ext}", ext)
            except OSError as exc:
                raise IOFailure(f"cannot write trace: {exc.strerror or exc}") from None
    else:
        print("\n".join(dom))
    if c.flagged:
        print(f"warning: {len(c.flagged)} flagged idle-position epochs", file=sys.stderr)
    return code if ok else EXIT_VERIFY


def _emit_csv(args, stem: str, text: str, resolved: dict) -> int:
    if args.output:
        out = _outdir(args.output)
        _write(out / f"{stem}.csv", text)
        _write(out / f"{stem}.config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / oracle


def _suite_kwargs(name: str, args) -> dict:
    kw = {}
    seeds = None
    if getattr(args, "reps", None):
        seeds = range(args.seed + 1, args.seed + args.reps + 1)
    if name in ("verify-discrete", "discrete", "verify-continuous", "continuous"):
        if seeds is not None:
            kw["seeds"] = seeds
        if args.horizon is not None:
            kw["horizon"] = args.horizon
    elif name in ("verify-gap", "gap"):
        if args.reps:
            kw["reps"] = args.reps
        kw["seed"] = args.seed
        if args.horizon is not None:
            kw["horizon"] = args.horizon
        if args.rho:
            kw["rhos"] = tuple(parse_rho(args.rho))
    elif name == "invariants":
        if seeds is not None:
            kw["seeds"] = seeds
        if args.horizon is not None:
            kw["horizon"] = args.horizon
    return kw


def cmd_verify(args, suite=None) -> int:
    name = suite or args.suite or args.preset
    if not name:
        raise ConfigError("verify needs --suite")
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(sorted(SUITES))}")
    res = SUITES[name](**_suite_kwargs(name, args))
    failed = [r for r in res.rows if not r[3]]
    print(f"{res.name}: {'PASS' if res.passed else 'FAIL'} ({len(res.rows)} cases, "
          f"{len(failed)} failing, {res.seconds:.1f}s)")
    for case, seed, pol, _, detail in failed[:20]:
        print(f"  {case} seed={seed} policy={pol}: {detail}")
    if res.summary:
        print("  " + json.dumps(res.summary, sort_keys=True, default=str))
    if args.output:
        out = _outdir(args.output)
        _write(out / f"{res.name}.csv", res.to_csv())
        _write(out / f"{res.name}.config.json",
               json.dumps({"suite": res.name, "overrides": _suite_kwargs(name, args)}, indent=2,
                          sort_keys=True, default=list) + "\n")
    return EXIT_OK if res.passed else EXIT_VERIFY


def cmd_oracle(args) -> int:
    if args.scenario:
        cfg = _check(_load_scenario(args.scenario).replace(policy_spec="dt-maf-lgfs"))
        instances = [cfg]
    else:
        instances = list(BUILTIN_INSTANCES)
    pens = [PenaltySpec.parse(args.metric)] if args.metric_given else list(ORACLE_PENALTIES)
    lines = ["instance,penalty,optimum,dt_maf_lgfs,match,states"]
    ok = True
    for inst in instances:
        for p in pens:
            rep = discrete_optimality_oracle(inst, p)
            ok &= rep.match
            name = inst.name if isinstance(inst, OracleInstance) else "scenario"
            lines.append(f"{name},{p.label},{rep.optimal_value},{rep.dt_maf_lgfs_value},"
                         f"{int(rep.match)},{rep.n_states}")
    text = "\n".join(lines) + "\n"
    if args.output:
        out = _outdir(args.output)
        _write(out / "oracle.csv", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# emit


def cmd_emit(args) -> int:
    if not args.scenario:
        raise ConfigError("emit needs --scenario")
    if not args.output:
        raise ConfigError("emit needs -o/--output")
    fmt = args.format or "csv"
    if fmt not in ("csv", "jsonl"):
        raise ConfigError("trace format must be csv or jsonl")
    cfg = _load_scenario(args.scenario)
    if args.horizon is not None:
        cfg = cfg.replace(horizon=float(args.horizon))
    if args.seed:
        cfg = cfg.replace(seed=args.seed)
    pols = _policies(args.policy) or [cfg.policy_spec]
    for p in pols:
        _check(cfg.replace(policy_spec=p))
    out = Path(args.output)
    try:
        if len(pols) == 1 and not args.couple:
            if out.suffix == "":
                out = _outdir(out) / f"trace-{parse_policy(pols[0]).name}.{fmt}"
            emit_trace(run(cfg, pols[0]), out, fmt)
            print(out)
            return EXIT_OK
        out = _outdir(out)
        c = run_coupled(cfg, pols, metrics=())
        for name, res in c.results.items():
            path = out / f"trace-{name}.{fmt}"
            emit_trace(res, path, fmt)
            print(path)
    except OSError as exc:
        raise IOFailure(f"cannot write trace: {exc.strerror or exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aoi-bench", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", help="fig4, fig5, verify-continuous, verify-discrete, verify-gap, oracle")
        p.add_argument("--scenario", help="scenario config (JSON)")
        p.add_argument("--policy", help="policy name or comma-separated list")
        p.add_argument("--rho", help="start:stop:step (inclusive) or comma list")
        p.add_argument("--reps", type=int, help="replications (seeds seed+1..seed+reps)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--horizon", type=float)
        p.add_argument("--couple", action="store_true", help="run the listed policies on shared randomness")
        p.add_argument("-o", "--output", help="output directory (file for a single emitted trace)")
        p.add_argument("--format", choices=("csv", "jsonl"), default=None)
        p.add_argument("--metric", default="avg", help="penalty for scenario runs: avg, max, ms, lnorm<l>")

    for name, hlp in (("run", "run a preset sweep or a scenario"),
                      ("verify", "run a verification suite"),
                      ("oracle", "compare DT-MAF-LGFS with the brute-force optimum"),
                      ("emit", "export an event trace")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        if name == "verify":
            p.add_argument("--suite", help=", ".join(sorted(SUITES)))
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    args.metric_given = any(a == "--metric" or a.startswith("--metric=") for a in (argv or sys.argv[1:]))
    if args.reps is not None and args.reps < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        return cmd_emit(args)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
