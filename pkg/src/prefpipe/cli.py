"""Command-line entry point for the staged pipeline.

Exit codes: 0 on success, 1 on hard failure, 2 when a stage completed but some
records were rejected into sidecar files (partial success).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .gateway import load_mock_script
from .pipeline import (
    STAGES,
    ConfigInvalid,
    PipelineConfig,
    PipelineError,
    air_preset,
    run_stage,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2

logger = logging.getLogger(__name__)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--stage-dir", help="directory for stage files (overrides config)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument(
        "--mock-script",
        help="JSON mock-backend script; runs the stage fully offline (test mode)",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefpipe",
        description="Build and verify preference datasets for DPO training, stage by stage.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        _common_flags(stage_parser)
        if stage == "ingest":
            stage_parser.add_argument("--input", help="raw conversations JSONL (overrides config)")
            stage_parser.add_argument(
                "--token-counts",
                help="JSON file of instruction id -> token count (overrides config)",
            )
        if stage == "stats":
            stage_parser.add_argument(
                "--csv", action="store_true", help="also write CSV tables per histogram"
            )

    preset = sub.add_parser("preset", help="write the recommended pipeline config")
    _common_flags(preset)
    preset.add_argument("--out", help="path for the config file (default: stdout)")
    preset.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. --set pairing.budget=2 (JSON values)",
    )
    return parser


def _parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigInvalid(f"--set needs KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _nested(overrides: list[str]) -> dict:
    merged: dict = {}
    for item in overrides:
        path, value = _parse_override(item)
        node = merged
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return merged


def _load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.load(args.config)
    else:
        config = PipelineConfig()
    payload = config.to_payload()
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
        payload["pairing"]["seed"] = args.seed
    if getattr(args, "stage_dir", None):
        payload["output_dir"] = args.stage_dir
    if getattr(args, "input", None):
        payload["ingest"]["input_path"] = args.input
    if getattr(args, "token_counts", None):
        payload["ingest"]["token_counts_path"] = args.token_counts
    return PipelineConfig.from_payload(payload)


def _cmd_preset(args) -> int:
    overrides = _nested(args.set)
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("seed", args.seed)
        overrides.setdefault("pairing", {}).setdefault("seed", args.seed)
    if getattr(args, "stage_dir", None):
        overrides.setdefault("output_dir", args.stage_dir)
    config = air_preset(overrides)
    if args.out:
        config.save(args.out)
        print(f"wrote preset config to {args.out}")
    else:
        print(json.dumps(config.to_payload(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_stage(stage: str, args) -> int:
    config = _load_config(args)
    backend = load_mock_script(args.mock_script) if args.mock_script else None
    result = run_stage(
        stage,
        config,
        stage_dir=args.stage_dir or config.output_dir,
        backend=backend,
        write_csv=getattr(args, "csv", False),
    )
    printable = {k: v for k, v in result.summary.items() if not k.startswith("_")}
    print(f"{stage}: {json.dumps(printable, sort_keys=True, default=str)}")
    if stage == "verify" and not result.summary.get("ok", True):
        print("verify: dataset is NOT valid", file=sys.stderr)
        return EXIT_FAILURE
    if result.rejects:
        print(f"{stage}: {result.rejects} record(s) rejected to sidecar files", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "preset":
            return _cmd_preset(args)
        return _cmd_stage(args.command, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
