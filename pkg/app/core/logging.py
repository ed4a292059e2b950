import logging

from app.core.config import config


def setup_logging(level: str | None = None):
    logging.basicConfig(
        level=level or config.log_level,
        format="[%(asctime)s] [%(levelname)s] %(name)s: %(message)s",
        force=True,
    )
