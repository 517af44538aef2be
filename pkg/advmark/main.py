#!/usr/bin/env python3
import logging
import sys
from typing import List, Optional

from advmark.commands import USAGE, Command
from advmark.errors import (
    CheckpointError,
    CommandError,
    CommandSyntaxError,
    ConfigError,
    ConstraintViolation,
    DomainError,
    NonFiniteLossError,
    ShapeError,
    UntrainedModelError,
)

logger = logging.getLogger(__name__)

# Expected failures: reported with their message, no traceback on the console
EXPECTED_ERRORS = (
    CommandError,
    ConfigError,
    CheckpointError,
    DomainError,
    ShapeError,
    UntrainedModelError,
    NonFiniteLossError,
    ConstraintViolation,
)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command line invocation and return its exit code"""
    if argv is None:
        argv = sys.argv[1:]

    try:
        command = Command(argv)
    except CommandSyntaxError as e:
        print(f"Invalid arguments: {e.msg}\n")
        print(USAGE)
        return 2

    try:
        return command.process()
    except EXPECTED_ERRORS as e:
        # An expected error occurred. Inform the user
        print(f"Error: {e.msg}")
        logger.debug("%s while processing command %s", type(e).__name__, command.command)
        return 1
    except Exception as e:
        # An unknown error occurred. Inform the user
        print(f"An unknown error occurred: {e}")

        # Print traceback
        logger.exception("Unknown error while processing command:")
        return 1


if __name__ == "__main__":
    sys.exit(main())
