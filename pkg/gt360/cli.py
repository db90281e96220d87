import argparse
import logging
import os
import sys

import torch

from . import __version__
from .commands import DataHandler, EvalHandler, InferHandler, TrainHandler
from .config import load_config
from .exceptions import Gt360Error

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    def __init__(self, message):
        self.message = message


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Gt360App:
    def __init__(self, stdout=None, stderr=None, environ=None):
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.environ = os.environ if environ is None else environ
        self.handlers = [
            InferHandler(self),
            TrainHandler(self),
            EvalHandler(self),
            DataHandler(self),
        ]
        self.parser = self.build_parser()

    def build_parser(self) -> ArgumentParser:
        parser = ArgumentParser(prog="gt360", description="Gaze target detection in images")
        parser.add_argument("--version", action="store_true", help="print the version and exit")
        parser.add_argument("--config", help="TOML configuration file")
        parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

        common = ArgumentParser(add_help=False)
        common.add_argument("--config", default=argparse.SUPPRESS, help="TOML configuration file")
        common.add_argument("--seed", type=int, default=0, help="random seed")

        subparsers = parser.add_subparsers(dest="command", metavar="<command>")
        for handler in self.handlers:
            handler.register(subparsers, common)
        return parser

    def emit(self, line: str) -> None:
        print(line, file=self.stdout)

    def load_config(self, args, overrides=None):
        return load_config(args.config, environ=self.environ, overrides=overrides)

    def version(self) -> str:
        return f"gt360 {__version__} (torch {torch.__version__})"

    def setup_logging(self, verbose: bool) -> None:
        logging.basicConfig(
            level=logging.DEBUG if verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=self.stderr,
            force=True,
        )

    def run(self, argv) -> int:
        try:
            args = self.parser.parse_args(argv)
        except UsageError as e:
            print(e.message, file=self.stderr)
            return EXIT_USAGE
        except SystemExit as e:
            # --help
            return int(e.code or 0)

        if args.version:
            self.emit(self.version())
            return EXIT_OK
        if args.command is None:
            self.parser.print_usage(self.stderr)
            return EXIT_USAGE

        self.setup_logging(args.verbose)
        try:
            return args.handler.run(args)
        except UsageError as e:
            print(e.message, file=self.stderr)
            return EXIT_USAGE
        except (Gt360Error, OSError) as e:
            log.debug("Command failed", exc_info=True)
            print(f"error: {getattr(e, 'message', None) or e}", file=self.stderr)
            return EXIT_FAILURE


def main(argv=None) -> int:
    return Gt360App().run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
