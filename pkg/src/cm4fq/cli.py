"""Command-line interface: run scenarios, query the fluid oracle, compare with miDRR.

Exit codes: 0 when every requested check passes, 2 for invalid input, 3 when
a bound or the fairness verifier fails.  Log verbosity is read from the
``CM4FQ_LOG_LEVEL`` environment variable (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path


from .fluid import compute_foc, fair_rates, verify_cm4_fairness, witness_allocation
from .metrics import evaluate_checks, steady_state_reports
from .midrr import MiDrr
from .model import INFINITE, ConfigError
from .scenario_io import bundled_names, dump_scenario, resolve_scenario
from .scheduler import Variant
from .sim import POST, PRE, fluid_approx, make_state, run

EXIT_OK, EXIT_CONFIG, EXIT_BOUND = 0, 2, 3

log = logging.getLogger("cm4fq")


def fmt(x) -> str:
    """Decimal rendering at 12 significant digits; ``inf`` for an infinite level."""
    if x is INFINITE:
        return "inf"
    return f"{float(x):.12g}"


def _exact(x):
    if x is INFINITE:
        return ["inf", ""]
    return [str(x.numerator), str(x.denominator)]


# -- output files ---------------------------------------------------------------

def trace_header(sc) -> list:
    cols = ["time", "time_num", "time_den", "event", "server", "user", "length"]
    for u in sc.user_names:
        cols += [f"F_{u}", f"F_{u}_num", f"F_{u}_den"]
    cols += [f"D_{u}" for u in sc.user_names]
    for s in sc.server_names:
        cols += [f"V_{s}", f"V_{s}_num", f"V_{s}_den"]
    cols += [f"DS_{s}" for s in sc.server_names]
    cols += [f"W_{u}" for u in sc.user_names]
    return cols


def trace_rows(trace, dispatches: bool = True):
    """Rows of trace.csv in time order: pre-state, dispatches, then post/sampled states."""
    sc = trace.scenario
    n = sc.matrix.n_users
    rank = {PRE: 0, POST: 2}
    items = [((s.time, rank[s.phase], idx), "state", s) for idx, s in enumerate(trace.snapshots)]
    if dispatches:
        items += [((r.time, 1, idx), "dispatch", r) for idx, r in enumerate(trace.dispatches)]
    items.sort(key=lambda item: item[0])
    for _, kind, obj in items:
        if kind == "state":
            row = [fmt(obj.time), *_exact(obj.time), f"state_{obj.phase}", "", "", ""]
            for i in range(n):
                row += [fmt(obj.tags[i]), *_exact(obj.tags[i])]
            row += [fmt(d) for d in obj.bonuses]
            for v in obj.levels:
                row += [fmt(v), *_exact(v)]
            row += [fmt(d) for d in obj.server_bonuses]
            row += [fmt(w) for w in obj.work]
        else:
            row = [fmt(obj.time), *_exact(obj.time), "dispatch", sc.server_names[obj.server],
                   sc.user_names[obj.user], fmt(obj.packet.length)]
            for i in range(n):
                row += [fmt(obj.tag_after), *_exact(obj.tag_after)] if i == obj.user else ["", "", ""]
            row += [""] * n
            for v in obj.levels_after:
                row += [fmt(v), *_exact(v)]
            row += [fmt(d) for d in obj.server_bonus_after]
            row += [""] * n
        yield row


def write_trace_csv(trace, path, dispatches: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trace_header(trace.scenario))
        writer.writerows(trace_rows(trace, dispatches))


REPORT_COLUMNS = ["bound", "t0", "t1", "scope", "lhs", "relation", "rhs", "slack", "passed"]


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r.bound, fmt(r.t0), fmt(r.t1), r.scope, fmt(r.lhs), r.relation,
                             fmt(r.rhs), fmt(r.slack), "pass" if r.passed else "fail"])


def summary_text(trace, reports) -> str:
    sc = trace.scenario
    lines = [
        f"scenario: {sc.name}",
        f"variant: {sc.variant.value}  delta: {fmt(sc.effective_delta)}  horizon: {fmt(sc.horizon)}  seed: {sc.seed}",
        f"dispatches: {len(trace.dispatches)}  max work-level gap: {fmt(trace.max_gap())}",
        "",
        "steady intervals (rates in work units per second):",
    ]
    for t0, t1, backlog in trace.steady_intervals():
        names = ",".join(sc.user_names[i] for i in sorted(backlog)) or "-"
        lines.append(f"  [{fmt(t0)}, {fmt(t1)})  backlogged {{{names}}}")
        if not backlog:
            continue
        fair = fair_rates(compute_foc(sc.matrix, sc.rates, sc.weights, backlog), sc.weights)
        lines.append(f"    {'user':<8} {'measured':>16} {'fair':>16}")
        for i in range(sc.matrix.n_users):
            measured = trace.work(i, t0, t1) / (t1 - t0)
            lines.append(f"    {sc.user_names[i]:<8} {fmt(measured):>16} {fmt(fair[i]):>16}")
    failed = [r for r in reports if not r.passed]
    lines += ["", f"checks: {len(reports) - len(failed)} passed, {len(failed)} failed"]
    lines += ["  " + r.describe() for r in failed]
    return "\n".join(lines) + "\n"


# -- commands -----------------------------------------------------------------------

def _simulated(sc):
    return fluid_approx(sc, sc.fluid_packet_length) if sc.fluid_packet_length is not None else sc


def cmd_run(args) -> int:
    sc = resolve_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    if args.variant is not None:
        sc = replace(sc, variant=Variant.parse(args.variant))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s (%s) to horizon %s", sc.name, sc.variant.value, sc.horizon)
    trace = run(_simulated(sc))
    reports = evaluate_checks(trace, sc.checks)
    write_trace_csv(trace, out / "trace.csv", dispatches=not args.no_dispatches)
    write_reports_csv(reports, out / "reports.csv")
    text = summary_text(trace, reports)
    (out / "summary.txt").write_text(text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_BOUND


def _parse_ids(sc, text):
    if text is None:
        return None
    items = [x.strip() for x in text.split(",") if x.strip()]
    return [sc.user_index(x) for x in items]


def cmd_oracle(args) -> int:
    sc = resolve_scenario(args.scenario)
    chosen = _parse_ids(sc, args.backlogged)
    if chosen is None:
        chosen = [sc.user_index(u) for u in sc.backlogged] if sc.backlogged is not None else range(sc.matrix.n_users)
    backlog = frozenset(chosen)
    foc = compute_foc(sc.matrix, sc.rates, sc.weights, backlog)
    rates = fair_rates(foc, sc.weights)
    alloc = witness_allocation(foc, sc.matrix, sc.rates, sc.weights)
    report = verify_cm4_fairness(sc.matrix, sc.rates, sc.weights, backlog, alloc)
    users = lambda ids: ",".join(sc.user_names[i] for i in sorted(ids))
    servers = lambda ids: ",".join(sc.server_names[k] for k in sorted(ids))
    print(f"backlogged: {{{users(backlog)}}}")
    print("clusters (increasing normalized rate):")
    for c in foc.clusters:
        print(f"  users {{{users(c.users)}}}  servers {{{servers(c.servers)}}}  rate {fmt(c.rate)} ({c.rate})")
    print("fair rates:")
    for i, name in enumerate(sc.user_names):
        print(f"  {name:<8} {fmt(rates[i])}")
    print("witness allocation (rows users, columns servers):")
    print("  " + " ".join(f"{s:>14}" for s in ["user"] + list(sc.server_names)))
    for i, name in enumerate(sc.user_names):
        print("  " + " ".join(f"{x:>14}" for x in [name] + [fmt(v) for v in alloc[i]]))
    verdict = "accepted" if report.ok else "rejected"
    print(f"fairness verifier: {verdict}")
    for msg in report.invariant_violations + report.fairness_violations:
        print(f"  {msg}")
    return EXIT_OK if report.ok else EXIT_BOUND


def cmd_compare(args) -> int:
    sc = resolve_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    sc = replace(sc, variant=Variant.FULL)
    base = _simulated(sc)
    quanta = base.quanta if base.quanta is not None else [base.l_max] * base.matrix.n_users
    cm4 = run(base)
    drr = run(base, MiDrr(make_state(base), quanta))
    span = sc.horizon
    fair = fair_rates(compute_foc(sc.matrix, sc.rates, sc.weights, range(sc.matrix.n_users)), sc.weights)
    reports = evaluate_checks(cm4, sc.checks) if sc.checks else steady_state_reports(cm4)
    rows = []
    for i, name in enumerate(sc.user_names):
        rows.append([name, fmt(sc.weights[i]), fmt(fair[i]),
                     fmt(cm4.work(i, 0, span) / span), fmt(drr.work(i, 0, span) / span)])
    header = ["user", "weight", "fair_all_backlogged", "cm4fq", "midrr"]
    lines = [" ".join(f"{h:>20}" for h in header)]
    lines += [" ".join(f"{x:>20}" for x in row) for row in rows]
    failed = [r for r in reports if not r.passed]
    lines.append(f"cm4fq checks: {len(reports) - len(failed)} passed, {len(failed)} failed")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        write_reports_csv(reports, out / "reports.csv")
        (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if not failed else EXIT_BOUND


def cmd_scenarios(args) -> int:
    for name in bundled_names():
        print(name)
    return EXIT_OK


def cmd_show(args) -> int:
    sys.stdout.write(dump_scenario(resolve_scenario(args.scenario)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cm4fq", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and evaluate its checks")
    p.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--no-dispatches", action="store_true", help="omit per-dispatch rows from trace.csv")
    p.add_argument("--quiet", action="store_true", help="do not print the summary")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="fair clustering and witness allocation for a backlogged set")
    p.add_argument("scenario")
    p.add_argument("--backlogged", help="comma-separated user names or indices (default: scenario or all)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="run the scheduler and miDRR on identical arrivals")
    p.add_argument("scenario")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("show", help="print a scenario in canonical form")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_show)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("CM4FQ_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
