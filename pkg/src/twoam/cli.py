"""Command-line front end.

    twoam simulate --protocol 2AM --replicas 5 --clients 5 --rate 50 --async-ms 50 --out run/
    twoam theory --out theory.csv
    twoam check run/trace.csv
    twoam compare theory.csv run/report.csv
    twoam latency run2am/trace.csv runabd/trace.csv

Exit codes: 0 success, 1 a verification failed, 2 bad configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import sys
from pathlib import Path

from . import analytics, checker
from .proto import Protocol
from .simnet import (
    Composite,
    ConfigError,
    Deterministic,
    Exponential,
    FaultPlan,
    UniformAsync,
)
from .workload import WorkloadConfig, run_abstract, run_experiment

logger = logging.getLogger("twoam")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
METRICS = ("p_cp", "p_rwp_given_cp", "p_oni")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling


def read_config_file(path: str) -> dict[str, str | list[str]]:
    """Flat ``key = value`` file. Keys are flag names without dashes; '#' starts a comment.

    A key given more than once (e.g. ``crash``) accumulates.
    """
    out: dict[str, str | list[str]] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        k = k.lstrip("-").replace("-", "_")
        if k in out:
            prev = out[k]
            out[k] = (prev if isinstance(prev, list) else [prev]) + [v]
        else:
            out[k] = v
    return out


def config_hash(items: dict) -> str:
    blob = "\n".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(cfg: dict, seed) -> str:
    return f"config_hash={config_hash(cfg)} seed={seed}"


def _write_rows(path: str | None, header: list[str], rows: list[list], comment: str) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _read_csv(path: str) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# simulate


def _delay_model(a):
    parts = []
    if a.async_ms is not None:
        parts.append(UniformAsync(a.async_ms))
    if a.delay_rate_read is not None or a.delay_rate_write is not None:
        if a.delay_rate_read is None or a.delay_rate_write is None:
            raise ConfigError("give both --delay-rate-read and --delay-rate-write")
        parts.append(Exponential(a.delay_rate_read, a.delay_rate_write))
    if a.delay_ms is not None:
        parts.append(Deterministic(a.delay_ms / 1000.0))
    if not parts:
        raise ConfigError("no delay model: give --async-ms, --delay-rate-*, or --delay-ms")
    return parts[0] if len(parts) == 1 else Composite(tuple(parts))


def _fault_plan(specs: list[str] | None) -> FaultPlan | None:
    if not specs:
        return None
    crashes = {}
    for spec in specs:
        rid, sep, at = spec.partition("@")
        if not sep:
            raise ConfigError(f"--crash expects REPLICA@SECONDS, got {spec!r}")
        try:
            crashes[rid.strip()] = float(at)
        except ValueError as exc:
            raise ConfigError(f"bad crash time in {spec!r}") from exc
    return FaultPlan(crashes)


def _sim_config(a) -> dict:
    keys = (
        "mode protocol replicas clients rate async_ms delay_rate_read delay_rate_write "
        "delay_ms ops keys seed crash rtt_mode service_rate horizon"
    ).split()
    return {k: getattr(a, k) for k in keys}


def report_rows(trace: checker.Trace, cfg: dict) -> list[list]:
    """One (metric, value) row per quantity. Shared by simulate and check."""
    rep = checker.pattern_stats(trace)
    rows = [
        ["protocol", trace.protocol or ""],
        ["N", trace.N if trace.N is not None else ""],
        ["n", trace.n if trace.n is not None else ""],
    ]
    rows += [[k, _fmt(v)] for k, v in rep.as_rows()]
    lat = checker.latency_stats(trace)
    for kind, s in lat.items():
        for f in ("count", "p25", "p50", "p75", "mean"):
            rows.append([f"{kind}_latency_{f}", _fmt(getattr(s, f))])
    for k, v in sorted(cfg.items()):
        if k not in ("protocol",):
            rows.append([f"config.{k}", "" if v is None else v])
    return rows


def _verify(trace: checker.Trace, protocol: str | None) -> tuple[bool, list[list]]:
    rows = []
    two = checker.verify_2atomicity(trace)
    hist = checker.staleness_histogram(trace)
    rows.append(["two_atomic", int(two.ok)])
    rows.append(["violations", len(two.violations)])
    for k in sorted(hist):
        rows.append([f"staleness_{k}", hist[k]])
    atom = checker.verify_atomicity(trace)
    rows.append(["atomic", int(atom.ok)])
    rows.append(["stale_reads", atom.stale_reads])
    ok = two.ok
    if protocol == Protocol.ABD.value:
        ok = ok and atom.ok
    for v in two.violations[:20]:
        logger.error("violation: op %d key %d %s: %s", v.op_id, v.key, v.reason, v.detail)
    return ok, rows


def cmd_simulate(a) -> int:
    cfg = _sim_config(a)
    workload = WorkloadConfig(
        clients=a.clients,
        rate=a.rate,
        ops_per_client=a.ops,
        keys=a.keys,
        service_rate=a.service_rate,
        horizon=a.horizon,
    )
    if a.mode == "abstract":
        trace = run_abstract(workload, seed=a.seed)
        trace.n = a.replicas
    else:
        trace = run_experiment(
            workload,
            _delay_model(a),
            a.protocol,
            a.replicas,
            faults=_fault_plan(a.crash),
            seed=a.seed,
            rtt_mode=a.rtt_mode,
        )
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    comment = provenance(cfg, a.seed)
    with open(out / "trace.csv", "w", newline="") as fh:
        checker.write_trace_csv(trace, fh, comment)
    rows = report_rows(trace, cfg)
    ok, vrows = _verify(trace, trace.protocol)
    rows += vrows
    rows.append(["rejected_arrivals", sum(trace.meta.get("rejected", []))])
    rows.append(["incomplete_ops", trace.meta.get("incomplete", 0)])
    _write_rows(str(out / "report.csv"), ["metric", "value"], rows, comment)
    if a.figures:
        from . import plotting

        lat = trace.response - trace.invoke
        plotting.latency_boxplot({trace.protocol: lat[~trace.is_write].tolist()}, Path(a.figures))
        plotting.staleness_bars(dict(checker.staleness_histogram(trace)), Path(a.figures))
    logger.info("wrote %s and %s", out / "trace.csv", out / "report.csv")
    return EXIT_OK if ok else EXIT_VERIFY


# --------------------------------------------------------------------------
# theory


def cmd_theory(a) -> int:
    if a.replicas is not None:
        ns = [a.replicas]
    else:
        ns = list(range(a.n_min, a.n_max + 1))
    if any(n < 2 for n in ns):
        raise ConfigError("replica counts must be >= 2")
    quad = analytics.QuadratureSpec(abs_tol=a.tol)
    rows = []
    for n in ns:
        N = a.clients if a.clients is not None else n
        params = analytics.ModelParams(
            N, n, a.rate, a.service_rate, a.delay_rate_read, a.delay_rate_write
        )
        rows.append(analytics.table_row(params, quad, force=a.force))
    header = list(rows[0])
    cfg = {k: getattr(a, k) for k in ("clients", "rate", "service_rate", "delay_rate_read",
                                      "delay_rate_write", "tol", "force")}
    cfg["grid"] = ",".join(map(str, ns))
    _write_rows(a.out, header, [[_fmt(r[h]) for h in header] for r in rows], provenance(cfg, "-"))
    if a.figures:
        from . import plotting

        plotting.theory_curves(rows, Path(a.figures))
    return EXIT_OK


# --------------------------------------------------------------------------
# check


def cmd_check(a) -> int:
    with open(a.trace) as fh:
        trace = checker.read_trace_csv(fh, protocol=a.protocol)
    trace.validate()
    cfg = {"trace": Path(a.trace).name, "protocol": a.protocol}
    rows = report_rows(trace, {})
    ok, vrows = _verify(trace, a.protocol)
    rows += vrows
    _write_rows(a.out, ["metric", "value"], rows, provenance(cfg, "-"))
    return EXIT_OK if ok else EXIT_VERIFY


# --------------------------------------------------------------------------
# compare


def _as_float(s: str, what: str) -> float:
    try:
        return float(s)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{what}: not a number: {s!r}") from exc


def compare_rows(theory: list[dict], reports: list[dict[str, str]], metrics=METRICS) -> list[dict]:
    """Match each report to the theory row with the same (N, n)."""
    by_point = {}
    for row in theory:
        try:
            by_point[(int(row["N"]), int(row["n"]))] = row
        except (KeyError, ValueError) as exc:
            raise UsageError("theory CSV needs integer N and n columns") from exc
    out = []
    for rep in reports:
        try:
            point = (int(rep["N"]), int(rep["n"]))
        except (KeyError, ValueError) as exc:
            raise UsageError("report is missing N or n") from exc
        th = by_point.get(point)
        if th is None:
            raise UsageError(f"no theory row for N={point[0]} n={point[1]}")
        for m in metrics:
            if m not in th:
                raise UsageError(f"theory CSV has no column {m!r}")
            if m not in rep:
                raise UsageError(f"report has no metric {m!r}")
            t = _as_float(th[m], m)
            e = _as_float(rep[m], m)
            d = e - t
            rel = d / t if t != 0 else (0.0 if d == 0 else math.inf)
            out.append({"N": point[0], "n": point[1], "metric": m, "theory": t,
                        "empirical": e, "abs_delta": d, "rel_delta": rel})
    return out


def cmd_compare(a) -> int:
    theory = _read_csv(a.theory)
    reports = []
    for path in a.reports:
        metrics = {}
        for row in _read_csv(path):
            if "metric" not in row or "value" not in row:
                raise UsageError(f"{path}: expected metric,value columns")
            metrics[row["metric"]] = row["value"]
        reports.append(metrics)
    rows = compare_rows(theory, reports)
    header = ["N", "n", "metric", "theory", "empirical", "abs_delta", "rel_delta"]
    cfg = {"theory": Path(a.theory).name, "reports": ",".join(Path(p).name for p in a.reports)}
    _write_rows(a.out, header, [[_fmt(r[h]) for h in header] for r in rows], provenance(cfg, "-"))
    if a.figures and rows:
        from . import plotting

        plotting.compare_bars([r for r in rows if r["theory"] > 0 and r["empirical"] > 0],
                              Path(a.figures))
    return EXIT_OK


# --------------------------------------------------------------------------
# latency


def cmd_latency(a) -> int:
    rows = []
    samples = {}
    for path in a.traces:
        with open(path) as fh:
            trace = checker.read_trace_csv(fh)
        label = Path(path).parent.name or Path(path).stem
        for kind, s in checker.latency_stats(trace).items():
            rows.append([label, kind, s.count] + [_fmt(getattr(s, f)) for f in
                        ("p25", "p50", "p75", "whisker_low", "whisker_high", "mean", "minimum",
                         "maximum")] + [int(s.empty)])
        lat = trace.response - trace.invoke
        samples[label] = lat[~trace.is_write].tolist()
    header = ["trace", "kind", "count", "p25", "p50", "p75", "whisker_low", "whisker_high",
              "mean", "min", "max", "empty"]
    cfg = {"traces": ",".join(a.traces)}
    _write_rows(a.out, header, rows, provenance(cfg, "-"))
    if a.figures:
        from . import plotting

        plotting.latency_boxplot(samples, Path(a.figures))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoam", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one simulation; write trace.csv and report.csv")
    s.add_argument("--config", help="key=value file; flags given on the command line win")
    s.add_argument("--mode", choices=("protocol", "abstract"), default="protocol",
                   help="abstract: exponential service times, no network")
    s.add_argument("--protocol", type=str, default="2AM", choices=("2AM", "ABD"))
    s.add_argument("--replicas", type=int, default=5)
    s.add_argument("--clients", type=int, default=5)
    s.add_argument("--rate", type=float, default=50.0, help="arrivals per second per client")
    s.add_argument("--async-ms", type=int, help="uniform per-message delay in [0, ms)")
    s.add_argument("--delay-rate-read", type=float, help="exponential round-trip rate (1/s)")
    s.add_argument("--delay-rate-write", type=float)
    s.add_argument("--delay-ms", type=float, help="fixed per-message delay")
    s.add_argument("--ops", type=int, help="accepted ops per client")
    s.add_argument("--horizon", type=float, help="stop issuing after this many seconds")
    s.add_argument("--keys", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--crash", action="append", metavar="REPLICA@SECONDS")
    s.add_argument("--rtt-mode", choices=("split", "request"), default="split")
    s.add_argument("--service-rate", type=float, help="abstract mode service rate (1/s)")
    s.add_argument("--out", default="run")
    s.add_argument("--figures", help="also render PNG figures into this directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("theory", help="evaluate the model over a grid of replica counts")
    t.add_argument("--config")
    t.add_argument("--replicas", type=int, help="single n (default: grid n-min..n-max)")
    t.add_argument("--n-min", type=int, default=2)
    t.add_argument("--n-max", type=int, default=15)
    t.add_argument("--clients", type=int, help="N (default: N = n)")
    t.add_argument("--rate", type=float, default=10.0)
    t.add_argument("--service-rate", type=float, default=10.0)
    t.add_argument("--delay-rate-read", type=float, default=20.0)
    t.add_argument("--delay-rate-write", type=float, default=20.0)
    t.add_argument("--tol", type=float, default=1e-9)
    t.add_argument("--force", action="store_true", help="clamp a negative t' to 0")
    t.add_argument("--out", default="-")
    t.add_argument("--figures")
    t.set_defaults(func=cmd_theory)

    c = sub.add_parser("check", help="verify a trace CSV")
    c.add_argument("trace")
    c.add_argument("--protocol", choices=("2AM", "ABD"),
                   help="with ABD the trace must also be atomic")
    c.add_argument("--out", default="-")
    c.set_defaults(func=cmd_check, config=None)

    m = sub.add_parser("compare", help="theory against simulation reports")
    m.add_argument("theory")
    m.add_argument("reports", nargs="+")
    m.add_argument("--out", default="-")
    m.add_argument("--figures")
    m.set_defaults(func=cmd_compare, config=None)

    lt = sub.add_parser("latency", help="latency percentiles of one or more traces")
    lt.add_argument("traces", nargs="+")
    lt.add_argument("--out", default="-")
    lt.add_argument("--figures")
    lt.set_defaults(func=cmd_latency, config=None)
    return p


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            if known[k].nargs == 0:
                values[k] = str(v).lower() in ("1", "true", "yes", "on")
            elif isinstance(known[k], argparse._AppendAction) and not isinstance(v, list):
                values[k] = [v]
        sub.set_defaults(**values)
        args = parser.parse_args(argv)  # explicit flags override file defaults
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"twoam: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except checker.TraceError as exc:
        print(f"twoam: {exc}", file=sys.stderr)
        for d in exc.diagnostics[20:]:
            print(f"  {d}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UsageError, analytics.DomainError, ValueError) as exc:
        print(f"twoam: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"twoam: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
