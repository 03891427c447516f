"""Command-line interface: `lfr-tabular <command> [options]`.

Commands:
    pretrain      select projectors, train the encoder, write the run artifacts
    probe         fit logistic-regression probes on a checkpoint's encoder
    select-debug  run projector selection only and compare with the exact optimum
    reference     print every configuration key with its default

Settings come from `--config` (YAML or JSON) and `--set section.key=value`
overrides; flags win over the file, the file wins over defaults.

Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from lfr_tabular import __version__
from lfr_tabular.app import RunController
from lfr_tabular.checkpoint import RunArchiver
from lfr_tabular.config import ConfigManager, config_reference
from lfr_tabular.errors import EXIT_DATA, EXIT_OK, LfrError
from lfr_tabular.logger import setup_logging

logger = logging.getLogger(__name__)

Handler = Callable[[RunController, argparse.Namespace], int]


def cmd_pretrain(controller: RunController, args: argparse.Namespace) -> int:
    """Run `build_state` and `train`, then report the checkpoint."""
    result = controller.pretrain(echo=not args.quiet)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"digest: {result.checkpoint.digest}")
    return EXIT_OK


def cmd_probe(controller: RunController, args: argparse.Namespace) -> int:
    """Evaluate a checkpoint and print the test accuracy."""
    summary = controller.probe(args.checkpoint, source=args.encoder, seeds=args.seeds)
    if len(summary.reports) == 1:
        print(f"accuracy: {summary.mean:.4f}")
    else:
        print(
            f"accuracy: {summary.mean:.4f} +/- {summary.std:.4f} "
            f"over {len(summary.reports)} seeds"
        )
    return EXIT_OK


def cmd_select_debug(controller: RunController, args: argparse.Namespace) -> int:
    """Print the selection report."""
    for line in controller.select_debug().lines():
        print(line)
    return EXIT_OK


COMMANDS: Dict[str, Handler] = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "select-debug": cmd_select_debug,
}


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one subparser per command."""
    parser = argparse.ArgumentParser(
        prog="lfr-tabular",
        description="Self-supervised tabular representations from random projectors.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a configuration value (repeatable)",
        )
        return p

    pretrain = with_config(sub.add_parser("pretrain", help="train an encoder"))
    pretrain.add_argument(
        "--quiet", action="store_true", help="do not echo the training log to stdout"
    )

    probe = with_config(sub.add_parser("probe", help="evaluate a checkpoint"))
    probe.add_argument("--checkpoint", help="checkpoint file (default: run checkpoint)")
    probe.add_argument(
        "--encoder",
        choices=["lfr", "random-init", "raw"],
        default="lfr",
        help="trained encoder, untrained encoder of the same shape, or raw features",
    )
    probe.add_argument("--seeds", type=int, help="number of probe seeds")

    with_config(sub.add_parser("select-debug", help="inspect projector selection"))
    sub.add_parser("reference", help="print configuration defaults")
    return parser


def _config_path(args: argparse.Namespace) -> Optional[str]:
    """The `--config` file, or the run's effective config next to a checkpoint."""
    if args.config:
        return str(args.config)
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint:
        candidate = Path(checkpoint).parent / RunArchiver.CONFIG_NAME
        if candidate.exists():
            return str(candidate)
    return None


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.command == "reference":
        sys.stdout.write(config_reference())
        return EXIT_OK
    try:
        config_manager = ConfigManager(_config_path(args), overrides=args.overrides)
        setup_logging(
            config_manager,
            console_level="WARNING" if getattr(args, "quiet", False) else None,
            run_directory=Path(config_manager.output.directory),
        )
        controller = RunController(config_manager)
        return COMMANDS[args.command](controller, args)
    except LfrError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
