"""``atlas <stage> --config <path> --out <dir>``"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, run_stage

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_PROVIDER = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlas", description="IoT malware endpoint analysis pipeline")
    parser.add_argument("stage", choices=STAGES + ("all",), help="stage to run; 'all' runs every stage in order")
    parser.add_argument("--config", help="YAML/JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--samples", dest="samples_dir", help="override samples_dir")
    parser.add_argument("--threshold", type=float, help="port-closure usage threshold (default 0.10)")
    parser.add_argument("--min-support", type=int, help="minimum device-type cluster size (default 20)")
    parser.add_argument("--metric", dest="overlap_metric", choices=("jaccard", "containment"))
    parser.add_argument("--min-degree", type=int, help="flow-map dropzone degree floor (default 500)")
    parser.add_argument("--workers", type=int, help="extraction worker processes")
    parser.add_argument("--offline", action="store_true", default=None, help="fixture providers only, pinned clock")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(out: str, stage: str, kind: str, message: str, code: int) -> int:
    doc = {"error": kind, "stage": stage, "message": message, "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    try:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"error-{stage}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError:
        pass
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {k: getattr(args, k) for k in ("samples_dir", "threshold", "min_support", "overlap_metric",
                                                   "min_degree", "workers", "offline")
                     if getattr(args, k) is not None}
        if "samples_dir" in overrides:
            overrides["samples_dir"] = str(Path(overrides["samples_dir"]).resolve())
        cfg = dataclasses.replace(cfg, **overrides).validate()
    except ConfigError as exc:
        return _error(args.out, args.stage, "config", str(exc), EXIT_CONFIG)

    stages = STAGES if args.stage == "all" else (args.stage,)
    for stage in stages:
        try:
            run_stage(stage, cfg, args.out)
        except ConfigError as exc:
            return _error(args.out, stage, "config", str(exc), EXIT_CONFIG)
        except StageError as exc:
            return _error(args.out, stage, exc.kind, str(exc), exc.exit_code)
        except (OSError, ValueError) as exc:
            return _error(args.out, stage, "error", f"{type(exc).__name__}: {exc}", EXIT_ERROR)
        error_doc = Path(args.out) / f"error-{stage}.json"
        error_doc.unlink(missing_ok=True)
        print(json.dumps({"stage": stage, "status": "ok", "summary": f"{args.out}/{stage}/summary.json"}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
