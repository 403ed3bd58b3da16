"""Command-line front end.

Exit codes: 0 success, 1 failed check or aborted run, 2 config error,
3 data error. Every file a subcommand writes goes under ``--output-dir``.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import verify
from .config import parse_config
from .data import entropy_weights, label_matrix, partition_dirichlet
from .errors import ConfigError, FormatError, InputError
from .orchestrator import DISPLAY, RoundError, build_federation, load_datasets, run_experiment
from .svg import bar_chart, line_chart

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class DataError(Exception):
    pass


def _load_shards(cfg):
    try:
        pool, test = load_datasets(cfg.data)
        return pool, test, partition_dirichlet(pool, cfg.partition)
    except (OSError, FormatError, InputError) as exc:
        raise DataError(str(exc)) from exc


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    pool, test, shards = _load_shards(cfg)
    fed = build_federation(cfg, pool, test, shards)
    out = _outdir(args)

    def progress(strategy, m):
        if not args.quiet:
            print(
                f"{DISPLAY[strategy]:<9} round {m.round:3d}  personalized={m.personalized_acc:.4f}  "
                f"global={m.global_acc:.4f}  align={m.align_loss_pre:.4g}->{m.align_loss_post:.4g}",
                flush=True,
            )

    try:
        result = run_experiment(cfg, out, fed, progress)
    except RoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK if result.results else EXIT_FAIL


def cmd_partition_stats(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    _, _, shards = _load_shards(cfg)
    counts = label_matrix(shards)
    ew = entropy_weights(shards)
    out = _outdir(args)
    header = ["client", "train", "test"] + [f"class_{c}" for c in range(counts.shape[1])] + ["entropy"]
    rows = []
    for k, s in enumerate(shards):
        rows.append(
            [s.client_id, len(s.train), len(s.test)] + [int(v) for v in counts[k]] + [f"{ew.raw_entropy[k]:.6f}"]
        )
    with open(out / "partition_stats.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"alpha={cfg.partition.alpha!r} clients={cfg.num_clients} seed={cfg.partition.seed}")
    print("  ".join(str(h) for h in header))
    for r in rows:
        print("  ".join(str(v) for v in r))
    return EXIT_OK


def cmd_entropy_report(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    _, _, shards = _load_shards(cfg)
    ew = entropy_weights(shards)
    out = _outdir(args)
    labels = [str(s.client_id) for s in shards]
    values = [float(v) for v in ew.normalized]
    with open(out / "entropy_weights.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "entropy", "weight"])
        for k, s in enumerate(shards):
            w.writerow([s.client_id, repr(float(ew.raw_entropy[k])), repr(values[k])])
    svg = bar_chart(labels, values, title=f"Entropy weights (alpha={cfg.partition.alpha!r})")
    (out / "entropy_weights.svg").write_text(svg, encoding="utf-8")
    print("client  entropy   weight")
    for k, s in enumerate(shards):
        print(f"{s.client_id:>6}  {ew.raw_entropy[k]:.5f}  {values[k]:.6f}")
    print(f"sum     {'':7}  {sum(values):.6f}")
    print(f"variance {float(np.var(values)):.6g}")
    return EXIT_OK


def _series_name(path: Path) -> str:
    stem = path.stem
    if stem.startswith("metrics_"):
        key = stem[len("metrics_"):].replace("_plus", "+")
        return DISPLAY.get(key, key)
    return stem


def cmd_plot(args) -> int:
    series = {}
    for name in args.csv:
        path = Path(name)
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            xs = [int(r["round"]) for r in rows]
            ys = [float(r[args.metric]) for r in rows]
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path} is not a metrics CSV ({exc})") from exc
        series[_series_name(path)] = (xs, ys)
    out = _outdir(args)
    title = args.title or args.metric.replace("_", " ")
    target = out / args.name
    target.write_text(line_chart(series, title=title, ylabel=args.metric), encoding="utf-8")
    print(target)
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_checks(args.inject_fault)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedppa", description="Federated learning simulator for heterogeneous clients.")
    sub = parser.add_subparsers(dest="command", required=True)

    def configured(name, help_text, default_out):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="TOML config file (defaults apply when omitted)")
        p.add_argument("-o", "--output-dir", default=default_out)
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides, e.g. rounds=3")
        return p

    p = configured("run", "run the configured strategies", "fedppa-run")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-round progress lines")
    p.set_defaults(func=cmd_run)
    configured("partition-stats", "per-client label counts of the partition", "fedppa-partition").set_defaults(
        func=cmd_partition_stats
    )
    configured("entropy-report", "entropy aggregation weights per client", "fedppa-entropy").set_defaults(
        func=cmd_entropy_report
    )

    p = sub.add_parser("plot", help="SVG line chart from metrics CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("-o", "--output-dir", default="fedppa-plots")
    p.add_argument("--metric", default="personalized_acc", choices=("personalized_acc", "global_acc"))
    p.add_argument("--name", default="accuracy.svg", help="output file name inside the output dir")
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("verify", help="fast invariant checks")
    p.add_argument("--inject-fault", choices=verify.FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
