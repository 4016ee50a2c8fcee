"""Batch command-line front end: ``octa <command> [options]``.

Exit codes: 0 success, 1 some eyes excluded (see ``exceptions.log``),
2 configuration or I/O failure.
"""

import argparse
import logging
import sys
from typing import Optional

from octa.config import SCAN_PRESETS, RunConfig, settings
from octa.exceptions import OctaError
from octa.services.pipeline import PipelineService, RunOutcome

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FAILURE = 2


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Run config file (key=value lines)")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int, help="RNG seed")
    parser.add_argument("--preset", choices=[*SCAN_PRESETS, "custom"], help="Device scan preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octa",
        description="OCT-A vessel segmentation, FAZ morphometry and cohort statistics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Split-half cross-validated training on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("segment", help="Confidence maps from a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("quantify", help="FAZ metrics from confidence maps and manual masks")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps", required=True, help="Directory of <eye_id>.pgm confidence maps")

    p = sub.add_parser("evaluate", help="Pixel agreement of predicted and manual masks")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True, help="Directory of <eye_id>.pgm predicted masks")

    p = sub.add_parser("stats", help="Cohort report from a metrics CSV")
    _common(p)
    p.add_argument("--metrics", required=True)

    p = sub.add_parser("synth", help="Synthetic healthy and diabetic cohorts")
    _common(p)
    p.add_argument("--n-each", type=int, default=4, help="Eyes per cohort (>= 2)")

    p = sub.add_parser("report", help="Text report of cohort statistics and agreement")
    _common(p)
    p.add_argument("--metrics", required=True)
    p.add_argument("--agreement", help="agreement.csv written by evaluate")

    p = sub.add_parser("serve", help="Run the HTTP API")
    p.add_argument("--host", default=settings.api_host)
    p.add_argument("--port", type=int, default=settings.api_port)
    return parser


def _run(args: argparse.Namespace) -> RunOutcome:
    config = RunConfig.from_file(args.config, out_dir=args.out, seed=args.seed, preset=args.preset)
    pipeline = PipelineService(config)
    if args.command == "train":
        return pipeline.train(args.manifest)
    if args.command == "segment":
        return pipeline.segment(args.model, args.manifest)
    if args.command == "quantify":
        return pipeline.quantify(args.manifest, args.maps)
    if args.command == "evaluate":
        return pipeline.evaluate(args.manifest, args.pred_dir)
    if args.command == "stats":
        return pipeline.stats(args.metrics)
    if args.command == "synth":
        return pipeline.synth(args.n_each)
    return pipeline.report(args.metrics, args.agreement)


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point of the ``octa`` console script; returns the exit code."""
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        uvicorn.run("octa.main:app", host=args.host, port=args.port, log_level=settings.log_level.lower())
        return EXIT_OK

    try:
        outcome = _run(args)
    except (OctaError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE

    for path in outcome.outputs:
        logger.debug(f"wrote {path}")
    if outcome.partial:
        logger.warning(f"{args.command}: {len(outcome.failures)} eyes excluded, see exceptions.log")
        return EXIT_PARTIAL
    logger.info(f"{args.command}: done, {len(outcome.outputs)} files written")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
