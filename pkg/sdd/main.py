"""
SDD command line.

    python -m sdd.main generate --spec spec.json --out data/
    python -m sdd.main train --model maa3 --data data/ --out maa3.ckpt
    python -m sdd.main eval --ckpt maa3.ckpt --data data/ --report maa3.json --roc-csv maa3_roc.csv
    python -m sdd.main run --ckpt maa3.ckpt --data data/ --sink file:detections.jsonl

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from pythonjsonlogger import jsonlogger

from sdd import __version__
from sdd.config import LOSS_IDS, OPTIMIZERS, Settings, load_settings
from sdd.exceptions import ConfigError, SddError, UsageError
from sdd.handlers import (
    handle_eval,
    handle_generate,
    handle_loss_screen,
    handle_optimizer_screen,
    handle_report,
    handle_run,
    handle_train,
)
from sdd.models import MODEL_IDS

logger = logging.getLogger("sdd")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(settings: Settings) -> None:
    """Route every logger through the root: text or JSON lines to stdout, plus an optional file."""
    if settings.LOG_FORMAT == "json":
        formatter: logging.Formatter = jsonlogger.JsonFormatter('%(asctime)s %(name)s %(levelname)s %(message)s')
    else:
        formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if settings.LOG_FILE_PATH:
        handlers.append(logging.FileHandler(settings.LOG_FILE_PATH, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(getattr(logging, settings.LOG_LEVEL))


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit 1."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="canonical JSON config file (overrides environment)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--log-format", choices=["text", "json"])
    common.add_argument("--workers", type=int, help="threads for per-recording processing")

    parser = _Parser(prog="sdd", description="Small damage detection toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="DatasetSpec JSON (defaults apply when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=handle_generate)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", required=True, choices=MODEL_IDS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; history CSV is written next to it")
    _add_training_flags(p)
    p.set_defaults(handler=handle_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--roc-csv")
    p.add_argument("--no-timing", action="store_true", help="omit timing fields from the report")
    p.add_argument("--orientation", choices=["auto", "low_error_positive", "high_error_positive"])
    p.add_argument("--threshold-percentile", type=float)
    p.set_defaults(handler=handle_eval)

    p = sub.add_parser("loss-screen", parents=[common], help="AUC per reconstruction loss on a mono model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="maud", choices=["macc", "maud"])
    _add_training_flags(p, with_loss=False)
    p.set_defaults(handler=handle_loss_screen)

    p = sub.add_parser("optimizer-screen", parents=[common], help="loss curves per optimizer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="macc", choices=["macc", "maud"])
    p.add_argument("--subset", type=int, default=64, help="training samples used")
    _add_training_flags(p, with_optimizer=False)
    p.set_defaults(handler=handle_optimizer_screen)

    p = sub.add_parser("report", parents=[common], help="markdown summary of eval reports")
    p.add_argument("--inputs", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=handle_report)

    p = sub.add_parser("run", parents=[common], help="run the detection stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sink", required=True, help="file:<path> or http(s)://<url>")
    p.add_argument("--threshold-percentile", type=float)
    p.add_argument("--threshold", type=float, help="fixed threshold; skips calibration")
    p.add_argument("--orientation", choices=["auto", "low_error_positive", "high_error_positive"])
    p.add_argument("--all", action="store_true", help="stream every recording, not just the test split")
    p.set_defaults(handler=handle_run)
    return parser


def _add_training_flags(p: argparse.ArgumentParser, with_loss: bool = True, with_optimizer: bool = True) -> None:
    if with_loss:
        p.add_argument("--loss", choices=LOSS_IDS)
    if with_optimizer:
        p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)


def settings_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags as Settings fields; unset flags are None and do not override."""
    mapping = {
        "log_level": "LOG_LEVEL",
        "log_format": "LOG_FORMAT",
        "workers": "MAX_WORKERS",
        "loss": "LOSS",
        "optimizer": "OPTIMIZER",
        "epochs": "EPOCHS",
        "lr": "LEARNING_RATE",
        "batch": "BATCH_SIZE",
        "seed": "SEED",
        "threshold_percentile": "CALIBRATION_PERCENTILE",
        "orientation": "SCORE_ORIENTATION",
    }
    if args.command == "generate":
        mapping.pop("seed")  # the dataset seed lives in the DatasetSpec
    return {field: getattr(args, flag) for flag, field in mapping.items() if getattr(args, flag, None) is not None}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings(args.config, settings_overrides(args))
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    configure_logging(settings)
    logger.info(f"sdd {args.command} ({settings.ENVIRONMENT})")
    try:
        message = args.handler(args, settings)
    except (UsageError, ConfigError) as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SddError, OSError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unhandled exception in {args.command}: {type(e).__name__}: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
