import asyncio
import logging
import sys
from typing import List, Optional

from app.cli.router import build_parser
from app.core.config import config
from app.core.exceptions import AppError
from app.core.logging import setup_logging

log = logging.getLogger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    """Точка входа CLI: код возврата берётся из AppError.exit_code."""
    args = build_parser().parse_args(argv)
    try:
        config.validate()
        setup_logging()
        return asyncio.run(args.handler(args))
    except AppError as e:
        log.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        log.exception(f"Необработанная ошибка: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
