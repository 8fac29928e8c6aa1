"""protodistill command line: one subcommand per pipeline stage.

Errors go to stderr as a single JSON line and give a nonzero exit status.
Log verbosity comes from ``PROTODISTILL_LOG`` (e.g. ``INFO``, ``DEBUG``).
"""

import argparse
import json
import logging
import os
import sys

from . import pipeline, selftest
from .config import load_config
from .exceptions import ConfigError, FormatError, TrainingError

LOG_ENV = "PROTODISTILL_LOG"

STAGES = {
    "gen-data": (pipeline.gen_data, "generate the synthetic volume and slice datasets"),
    "train-teacher": (pipeline.stage_train_teacher, "train the 3D teacher on volumes"),
    "extract-proto": (pipeline.stage_extract_proto, "compute the teacher's class prototype"),
    "pretrain-student": (pipeline.stage_pretrain_student, "segmentation pretraining of the 2D student"),
    "distill": (pipeline.stage_distill, "fine-tune the student against the prototype"),
    "eval": (pipeline.stage_eval, "score every trained model"),
    "compare": (pipeline.stage_compare, "baseline vs distilled table with a paired test"),
    "sweep": (pipeline.stage_sweep, "low-data sweep over training-set sizes"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="protodistill", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path; repeatable")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--force", action="store_true", help="accept inputs made under another config")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in STAGES.items():
        sub.add_parser(name, parents=[common], help=help_text)
    sub.add_parser("selftest", help="run gradient and oracle property checks")
    return parser


def _fail(code, message, **fields):
    print(json.dumps({"error": code, "message": message, **fields}, sort_keys=True), file=sys.stderr)
    return 1 if code != "usage" else 2


def _report(command, result, out):
    if command == "compare":
        print(result[1], end="")
    elif command == "eval":
        for name, report in sorted(result.items()):
            print(f"{name}: mean DSC {report.mean_dsc():.4f} over {len(report.item_ids)} items")
    elif command == "sweep":
        with open(os.path.join(out, "sweep.txt")) as fh:
            print(fh.read(), end="")
    else:
        print(f"{command}: done ({out})")


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return 0 if selftest.run() else 1
    try:
        overrides = list(args.set)
        if args.out is not None:
            overrides.append(f"paths.out={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        out = cfg.paths.out
        os.makedirs(out, exist_ok=True)
        stage = STAGES[args.command][0]
        result = stage(cfg, out, force=args.force)
    except ConfigError as exc:
        return _fail("config", str(exc), path=exc.path)
    except pipeline.StageError as exc:
        print(exc.as_json(), file=sys.stderr)
        return 1
    except FormatError as exc:
        return _fail("format", str(exc))
    except TrainingError as exc:
        return _fail("training", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))
    _report(args.command, result, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
