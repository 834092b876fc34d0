"""Command line: python -m doc2lora <command> --config run.json [key=value ...]"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from .errors import ConfigError, Doc2LoraError
from .harness import (
    cmd_cd_baseline,
    cmd_eval,
    cmd_gen_data,
    cmd_meta_train,
    cmd_pretrain_lm,
    cmd_report,
    load_config,
    prepare_run_dir,
)
from .logs import configure_logging

logger = logging.getLogger("doc2lora")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doc2lora", description="Internalize documents into generated LoRA adapters.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain-lm": "pretrain the tiny teacher on in-context NIAH",
        "gen-data": "generate NIAH contexts, queries and teacher self-responses",
        "meta-train": "meta-train the hypernetwork(s)",
        "cd-baseline": "run the context-distillation baselines",
        "eval": "evaluate every configured method per context length",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("overrides", nargs="*", help="dotted overrides, e.g. schedule.stage1_steps=100")
        if name == "meta-train":
            p.add_argument("--resume", action="store_true", help="continue from the last training state")
    p = sub.add_parser("report", help="merge metrics of several runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    return parser


def _describe(e: ValidationError) -> str:
    lines = [f"invalid configuration ({e.error_count()} error(s)):"]
    for err in e.errors():
        field = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"  {field}: {err['msg']}")
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "report":
            paths = cmd_report(args.run_dirs, args.out)
            print("\n".join(str(p) for p in paths.values()))
            return EXIT_OK
        config = load_config(args.config, args.overrides)
        out = prepare_run_dir(config)
        if args.command == "pretrain-lm":
            print(cmd_pretrain_lm(config, out))
        elif args.command == "gen-data":
            print(cmd_gen_data(config, out))
        elif args.command == "meta-train":
            for path in cmd_meta_train(config, out, resume=args.resume).values():
                print(path)
        elif args.command == "cd-baseline":
            print(f"{len(cmd_cd_baseline(config, out))} rows -> {out / 'cd_metrics.csv'}")
        elif args.command == "eval":
            print(f"{len(cmd_eval(config, out))} rows -> {out / 'metrics.csv'}")
    except ValidationError as e:
        print(_describe(e), file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Doc2LoraError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILED
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
