"""``vimts`` command line.

Every subcommand reads a YAML manifest (``--config``) and writes under the
output directory (``--output-dir``, else the manifest's ``output_dir``, else
``$VIMTS_OUTPUT_DIR``). Usage and manifest errors exit with status 2.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import harness
from .data import convert_wide_csv, save_dataset
from .errors import CheckpointError, ConfigError, DataConflictError, ParseError
from .synthetic import generate_synthetic

USAGE_ERRORS = (ConfigError, ParseError, DataConflictError, FileNotFoundError, CheckpointError)


class UsageError(Exception):
    pass


def _csv_list(text: str, cast=str):
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment manifest (YAML)")
    common.add_argument("--seed", type=int, action="append",
                        help="run seed; repeat for several (default: manifest seeds)")
    common.add_argument("--device", default="cpu", help="torch device (only 'cpu' is supported)")
    common.add_argument("--output-dir", help="artifact root")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vimts", description="Irregular multivariate time series forecasting")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", parents=[common], help="write the manifest's synthetic dataset as CSV")
    g.add_argument("--out", required=True, help="destination CSV (queries go to <stem>.queries.csv)")

    c = sub.add_parser("convert", parents=[common], help="wide CSV -> canonical long CSV")
    c.add_argument("--input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--sample-column", default="sample_id")
    c.add_argument("--time-column", default="timestamp")

    sub.add_parser("ssl", parents=[common], help="self-supervised stage only")
    f = sub.add_parser("finetune", parents=[common], help="finetune (after SSL unless --init or no_ssl) and evaluate")
    f.add_argument("--init", help="start from this model checkpoint and skip the SSL stage")
    e = sub.add_parser("eval", parents=[common], help="evaluate a model checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)

    a = sub.add_parser("ablate", parents=[common], help="complete model plus ablation variants over seeds")
    a.add_argument("--variants", type=_csv_list, default=[],
                   help="comma list of variants, each a '+'-joined set of "
                        + ", ".join(harness.FLAGS))
    a.add_argument("--sweep", help="sensitivity sweep 'section.key=v1,v2,...' instead of variants")

    fs = sub.add_parser("fewshot", parents=[common], help="training-data ratio sweep")
    fs.add_argument("--ratios", type=lambda s: _csv_list(s, float), default=[0.1, 0.2, 0.5, 1.0])
    fs.add_argument("--variants", type=_csv_list, default=[])

    r = sub.add_parser("report", parents=[common], help="aggregate runs on disk into report.md and plots")
    r.add_argument("--no-plots", action="store_true")
    return p


def _manifest(args) -> harness.ExperimentManifest:
    if not args.config:
        raise UsageError("--config is required for this command")
    m = harness.ExperimentManifest.load(args.config)
    if args.output_dir:
        m = m.with_overrides(output_dir=args.output_dir)
    if args.seed:
        m = m.with_overrides(seeds=tuple(args.seed))
    return m


def _root(args) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    if args.config:
        return Path(harness.ExperimentManifest.load(args.config).output_dir)
    return Path(os.environ.get(harness.OUTPUT_ENV, "runs"))


def _print_rows(results):
    for res in results:
        m = res.metrics
        tag = f"{m['variant']}" + (f" ratio={m['few_shot_ratio']:g}" if m.get("few_shot_ratio") else "")
        if res.status == "ok" and "mse" in m:
            print(f"{tag} seed={m['seed']}: mse={m['mse']:.6g} mae={m['mae']:.6g} -> {res.run_dir}")
        else:
            print(f"{tag} seed={m['seed']}: {res.status} {m.get('error', '')} -> {res.run_dir}")


def _run(args) -> int:
    if args.device != "cpu":
        raise UsageError(f"device {args.device!r} is not supported; use --device cpu")
    cmd = args.command
    if cmd == "convert":
        n = convert_wide_csv(args.input, args.out, args.sample_column, args.time_column)
        print(f"wrote {n} observations to {args.out}")
        return 0
    if cmd == "report":
        path, rows = harness.report(_root(args))
        print(path.read_text())
        if not args.no_plots:
            plotted = harness.emit_plots(path.parent)
            print(f"{len(plotted)} plots written to {path.parent / 'plots'}")
        return 0

    m = _manifest(args)
    if cmd == "generate":
        if m.data.synthetic is None:
            raise UsageError("manifest data section has no 'synthetic' generator")
        ds, oracle = generate_synthetic(m.data.synthetic, seed=m.data.seed)
        cfg = m.data.synthetic
        save_dataset(ds, args.out, time_scale=cfg.total_span)
        schema = {"channel_names": list(ds.channel_names), "obs_span": cfg.obs_span,
                  "horizon_span": cfg.horizon_span, "time_origin": 0.0}
        out = Path(args.out)
        (out.parent / f"{out.stem}.schema.yaml").write_text(yaml.safe_dump(schema, sort_keys=True))
        print(f"wrote {len(ds)} samples to {out} (candidate missing ratio "
              f"{oracle.candidate_missing_ratio:.3f}, stored-mask missing ratio {ds.missing_ratio():.3f})")
        return 0
    if cmd == "ssl":
        results = []
        for seed in m.seeds:
            run_dir = Path(m.output_dir) / "ssl" / m.ablation.name / f"seed_{seed}"
            results.append(harness.run_single(m, seed, run_dir, stages=("ssl",)))
        for res in results:
            print(f"ssl seed={res.metrics['seed']}: best val {res.metrics['stages'].get('ssl', {}).get('best_val')}"
                  f" -> {res.run_dir / 'checkpoint.npz'}")
        return 0
    if cmd == "finetune":
        results = []
        for seed in m.seeds:
            run_dir = harness.run_dir_for(m, seed)
            if args.init:
                results.append(harness.run_single(m, seed, run_dir, stages=("finetune",), init=args.init))
            else:
                results.append(harness.run_single(m, seed, run_dir))
        _print_rows(results)
        return 0
    if cmd == "eval":
        results = [harness.evaluate_checkpoint(m, args.checkpoint, seed,
                                               Path(m.output_dir) / "eval" / f"seed_{seed}") for seed in m.seeds]
        _print_rows(results)
        return 0
    if cmd == "ablate":
        if args.sweep:
            param, _, values = args.sweep.partition("=")
            if not values:
                raise UsageError("--sweep needs 'section.key=v1,v2,...'")
            parsed = [yaml.safe_load(v) for v in values.split(",")]
            results = harness.run_sensitivity(m, param.strip(), parsed)
        else:
            for v in args.variants:
                harness.Ablation.parse(v)  # fail fast on typos
            results = harness.run_ablation_matrix(m, args.variants)
        _print_rows(results)
        harness.report(m.output_dir)
        print((Path(m.output_dir) / "report.md").read_text())
        return 0 if all(r.status == "ok" for r in results) else 1
    if cmd == "fewshot":
        results = harness.run_fewshot(m, args.ratios, args.variants)
        _print_rows(results)
        harness.report(m.output_dir)
        return 0 if all(r.status == "ok" for r in results) else 1
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage line
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except UsageError as exc:
        print(f"vimts {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        msg = str(exc)
        if msg.startswith("no runs found"):
            print(f"vimts {args.command}: {msg}", file=sys.stderr)
        else:
            print(f"vimts {args.command}: file not found: {msg}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"vimts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"vimts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
