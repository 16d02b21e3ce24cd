"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 compute error. Failures print one JSON record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .aggregation import attribute_batch
from .checks import run_acceptance, run_score_check
from .evaluation import lds, make_synthetic_lds, raw_pixel_baseline
from .exceptions import ComputeError, ConfigurationError, DataFormatError, PatchAttrError
from .io import (
    CONFIG_SCHEMA,
    RunConfig,
    check_fingerprints,
    counterfactual_ids,
    read_config,
    read_lds_input,
    read_matrix,
    write_heatmap,
    write_id_list,
    write_lds_input,
    write_lds_report,
    write_matrix,
    write_matrix_csv,
)

_RUN_COMMANDS = ("attribute", "baseline", "heatmap")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override its entries")
    g = p.add_argument_group("run configuration (each key also valid in --config)")
    for key, (_, default, help_text) in CONFIG_SCHEMA.items():
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        suffix = f" [default: {default}]" if default is not None else ""
        g.add_argument(*names, dest=key, default=None, metavar=key.upper(), help=help_text + suffix)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchattr",
        description="Nonparametric patch-influence data attribution for diffusion training sets.",
        epilog="Defaults reproduce the reference configuration: timesteps 100,200,300,400,500; "
               "k = 100; pooling window 2; gamma = 0.75; linear betas 1e-4..0.02 over T = 1000.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="compute the query x train attribution matrix")
    _add_config_flags(p)
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p = sub.add_parser("baseline", help="raw-pixel similarity matrix")
    _add_config_flags(p)
    p.add_argument("--metric", choices=("dot", "cosine"), default="cosine")

    p = sub.add_parser("heatmap", help="render the most influential patches for one query")
    _add_config_flags(p)
    p.add_argument("--query-id", required=True)
    p.add_argument("--m", type=int, default=5, help="number of top proponents to render")
    p.add_argument("--dim", type=float, default=0.35, help="brightness factor outside highlighted patches")
    p.add_argument("--n-patches", type=int, default=None, help="highlighted patches per training image")

    p = sub.add_parser("lds", help="linear datamodeling score of a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--input", required=True, help="LDS manifest (masks, outputs, fingerprint)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--method", default="nda")

    p = sub.add_parser("synthetic-lds", help="write a synthetic LDS input predicted by a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True, help="manifest path")
    p.add_argument("--M", type=int, default=64, help="number of subsets [default: 64]")
    p.add_argument("--fraction", type=float, default=0.5, help="subset fraction [default: 0.5]")
    p.add_argument("--noise", type=float, default=0.0, help="noise in units of std(g); inf for pure noise")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("counterfactual-export", help="top proponents to remove before retraining")
    p.add_argument("--matrix", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--m", type=int, default=1000, help="number of ids [default: 1000]")
    p.add_argument("--out", required=True)

    p = sub.add_parser("score-check", help="distance fixtures and score degeneracy checks")
    p.add_argument("--fixtures", default=None, help="fixture .npz (default: the shipped set)")
    p.add_argument("--perturb", nargs=2, metavar=("CASE", "DELTA"), default=None,
                   help="add DELTA to one fast distance of CASE (harness sensitivity check)")

    p = sub.add_parser("selftest", help="score check plus the acceptance criteria")
    p.add_argument("--only", default=None, help="comma-separated criterion numbers")
    return parser


def _run_config(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for key in CONFIG_SCHEMA:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    cfg = RunConfig.from_mapping(values)
    if cfg.train is None or cfg.query is None:
        raise ConfigurationError("both train and query datasets are required")
    return cfg


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    lines = [f"{k} = {v}\n" for k, v in sorted(cfg.raw.items())]
    (out / "run.cfg").write_text("".join(lines))


def cmd_attribute(args) -> int:
    cfg = _run_config(args)
    train, queries = cfg.train.load(), cfg.query.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out)
    schedule = cfg.schedule()
    inf = cfg.influence
    L, N = train.side, len(train)
    scales = sum((g > 0) + (g < 1) for g in inf.gammas)
    per_query = scales * inf.draws * (queries.side ** 2) * N * L * L
    t0 = time.perf_counter()

    def progress(i, qid):
        if args.quiet:
            return
        dt = time.perf_counter() - t0
        rate = (i + 1) * per_query / dt if dt > 0 else float("inf")
        print(f"[{i + 1}/{len(queries)}] {qid}  {dt:.1f}s  {rate:.3g} patch-distances/s", file=sys.stderr, flush=True)

    ckpt = out / "checkpoints" if cfg.checkpoint else None
    matrix = attribute_batch(queries, train, schedule, inf, cfg.workers, ckpt, on_row=progress)
    write_matrix(out / "matrix.ndam", matrix)
    write_matrix_csv(out / "matrix.csv", matrix)
    print(f"wrote {out / 'matrix.ndam'} ({matrix.shape[0]} x {matrix.shape[1]}, fingerprint {matrix.fingerprint[:12]})")
    return 0


def cmd_baseline(args) -> int:
    cfg = _run_config(args)
    train, queries = cfg.train.load(), cfg.query.load()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix = raw_pixel_baseline(queries, train, args.metric)
    write_matrix(out / f"baseline_{args.metric}.ndam", matrix)
    write_matrix_csv(out / f"baseline_{args.metric}.csv", matrix)
    print(f"wrote {out / f'baseline_{args.metric}.ndam'}")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _run_config(args)
    train, queries = cfg.train.load(), cfg.query.load()
    sub = queries.subset([queries.index_of(args.query_id)])
    out = Path(cfg.out)
    ckpt = out / "checkpoints" if cfg.checkpoint else None
    matrix = attribute_batch(sub, train, cfg.schedule(), cfg.influence, cfg.workers, ckpt)
    paths = write_heatmap(matrix, train, sub, args.query_id, out / "heatmaps", args.m, args.dim,
                          args.n_patches, cfg.influence.window)
    for p in paths:
        print(p)
    return 0


def cmd_lds(args) -> int:
    matrix = read_matrix(args.matrix)
    data = read_lds_input(args.input)
    check_fingerprints(matrix.fingerprint, data.fingerprint)
    report = lds(matrix, data, args.method)
    csv_path, txt_path = write_lds_report(args.out, report, matrix.fingerprint)
    print(txt_path.read_text(), end="")
    return 0


def cmd_synthetic_lds(args) -> int:
    matrix = read_matrix(args.matrix)
    data = make_synthetic_lds(matrix, args.M, args.fraction, args.noise, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_lds_input(args.out, data, "synthetic")
    print(f"wrote {args.out}")
    return 0


def cmd_counterfactual(args) -> int:
    matrix = read_matrix(args.matrix)
    ids = counterfactual_ids(matrix, args.query_id, args.m)
    write_id_list(args.out, ids)
    print(f"wrote {len(ids)} ids to {args.out}")
    return 0


def cmd_score_check(args) -> int:
    perturb = None
    if args.perturb:
        try:
            perturb = (args.perturb[0], float(args.perturb[1]))
        except ValueError:
            raise ConfigurationError(f"bad perturbation delta {args.perturb[1]!r}") from None
    results = run_score_check(args.fixtures, perturb)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise ComputeError(f"score check failed: {', '.join(failed)}")
    return 0


def cmd_selftest(args) -> int:
    which = None
    if args.only:
        try:
            which = [int(v) for v in args.only.split(",") if v]
        except ValueError:
            raise ConfigurationError(f"bad criterion list {args.only!r}") from None
        bad = [n for n in which if not 1 <= n <= 10]
        if bad:
            raise ConfigurationError(f"unknown criteria {bad}")
    results = run_score_check()
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}  score-check ({sum(r.passed for r in results)}/{len(results)})", flush=True)
    acc = run_acceptance(which, out=sys.stdout)
    failed = [r.name for r in acc if not r.passed] + ([] if ok else ["score-check"])
    if failed:
        raise ComputeError(f"selftest failed: {', '.join(failed)}")
    return 0


COMMANDS = {
    "attribute": cmd_attribute,
    "baseline": cmd_baseline,
    "heatmap": cmd_heatmap,
    "lds": cmd_lds,
    "synthetic-lds": cmd_synthetic_lds,
    "counterfactual-export": cmd_counterfactual,
    "score-check": cmd_score_check,
    "selftest": cmd_selftest,
}


def _error_record(exc: BaseException, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except PatchAttrError as exc:
        return _error_record(exc, exc.exit_code)
    except (OSError, UnicodeDecodeError) as exc:
        return _error_record(DataFormatError(str(exc)), DataFormatError.exit_code)
    except KeyboardInterrupt:
        return _error_record(ComputeError("interrupted; rerun to resume from checkpoints"), ComputeError.exit_code)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
