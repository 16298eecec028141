"""Command-line entry point: ``advbench run|table|figure|verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from advbench.errors import CampaignFailure, ValidationError
from advbench.harness import config as harness_config
from advbench.harness import report, runner, verify

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FAILURE = 3


def _cmd_run(args) -> int:
    if not Path(args.config).is_file():
        raise ValidationError(f"config file not found: {args.config}")
    output = str(Path(args.output).resolve()) if args.output else None
    cfg = harness_config.load_config(args.config, seed=args.seed, max_utterances=args.max_utterances, output_dir=output)
    if args.workers is not None:
        cfg.workers = args.workers
    summary = runner.run_campaign(cfg)
    agg = summary["aggregates"]
    print(json.dumps({"output_dir": cfg.output_dir, **agg}, sort_keys=True))
    return EXIT_OK


def _emit(args, fn, default_name) -> int:
    summaries = [report.load_summary(p) for p in args.summaries]
    text = fn(summaries)
    if args.output:
        out = Path(args.output)
        if out.is_dir():
            out = out / default_name
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_verify(args) -> int:
    rep = verify.verify_artifacts(args.artifact_dir)
    for line in rep.failures:
        print(f"FAIL {line}")
    print(f"checked {rep.checked} utterances; max SNR error {rep.max_snr_error_db:.3g} dB; "
          f"{'OK' if rep.ok else f'{len(rep.failures)} mismatches'}")
    return EXIT_OK if rep.ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute or resume a campaign")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--max-utterances", type=int)
    run.add_argument("--output", help="override output_dir")
    run.add_argument("--workers", type=int)
    run.set_defaults(func=_cmd_run)

    table = sub.add_parser("table", help="CSV table from summaries")
    table.add_argument("summaries", nargs="+")
    table.add_argument("--output")
    table.set_defaults(func=lambda a: _emit(a, report.emit_table, "table.csv"))

    fig = sub.add_parser("figure", help="per-language CSV from summaries")
    fig.add_argument("summaries", nargs="+")
    fig.add_argument("--output")
    fig.set_defaults(func=lambda a: _emit(a, report.emit_language_figure_data, "figure.csv"))

    ver = sub.add_parser("verify", help="re-derive stored metrics from a campaign directory")
    ver.add_argument("artifact_dir")
    ver.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CampaignFailure, FileNotFoundError, OSError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
