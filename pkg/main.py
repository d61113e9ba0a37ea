#!/usr/bin/env python3
"""
Regime Stop - Main Entry Point

Solver and simulator for infinite-horizon optimal stopping of regime-switching
diffusions: HJB obstacle solves by projected SOR, Monte Carlo under stopping rules,
and a verification corpus with independent oracles.

Version: 1.0.0
"""

import logging
import sys

from cli import EXIT_VALIDATION, run
from config import Config
from expression import ExpressionError
from guards import ProblemValidationError
from hjb import MMatrixError
from policy import PolicyParseError


def setup_logging(level: str = Config.LOG_LEVEL):
    """Setup logging configuration. Results go to stdout, logs to the file and stderr."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler(sys.stderr)
        ]
    )


def main(argv=None) -> int:
    """Run one command and return its exit code."""
    setup_logging()
    logger = logging.getLogger(__name__)
    logger.info(f"Starting {Config.TOOL_NAME} {Config.VERSION}")

    try:
        return run(argv)
    except (ProblemValidationError, ExpressionError, PolicyParseError, MMatrixError) as e:
        logger.error(f"Validation failed: {type(e).__name__}")
        print(str(e), file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        logger.error(f"Missing input: {e}")
        print(f"file not found: {e.filename}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"Run crashed with error: {e}")
        raise


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        sys.exit(130)
