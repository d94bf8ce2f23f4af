import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.cli.router import include_commands
from app.core.config import configure_logging, get_settings, load_run_config
from app.core.errors import FormatError, InvalidArgumentError, NumericError, UsageError, VidnumError
from app.core.parallel import set_threads, shutdown_executor

logger = logging.getLogger("app.main")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="vidnum", description="Numerical toolkit for video-temporal learning")
    parser.add_argument("--config", help="plain-text `key = value` run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting (repeatable)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--log-level")

    subparsers = parser.add_subparsers(dest="command", metavar="command")
    include_commands(subparsers)
    return parser


def _settings(args: argparse.Namespace):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"SEED={args.seed}")
    if args.threads is not None:
        overrides.append(f"THREADS={args.threads}")
    if args.config is None and not overrides:
        return get_settings()
    return load_run_config(args.config, overrides)


def _exit_code(error: Exception) -> int:
    if isinstance(error, FormatError):
        return EXIT_FORMAT
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand. Results go to stdout as `name=value` lines, everything
    else to stderr. Exit codes: 0 success, 1 usage or invalid argument,
    2 missing or malformed file, 3 non-finite numerics.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given; see --help")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    try:
        settings = _settings(args)
        configure_logging(args.log_level or settings.LOG_LEVEL)
        set_threads(settings.THREADS)
        lines = args.handler(args, settings)
    except (VidnumError, ValidationError) as e:
        code = _exit_code(e)
        logger.error(f"{args.command} failed: {e}")
        return code
    except OSError as e:
        logger.error(f"{args.command} failed: {e.filename or ''}: {e.strerror or e}")
        return EXIT_FORMAT
    except (ValueError, ArithmeticError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_NUMERIC if isinstance(e, ArithmeticError) else EXIT_USAGE
    finally:
        shutdown_executor()

    for line in lines:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
