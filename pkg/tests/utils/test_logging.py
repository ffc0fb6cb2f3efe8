import logging

from isds.utils.logging import get_logger, set_logging


def test_get_logger_level():
    logger = get_logger("isds.test_logging", log_level=logging.DEBUG)
    assert logger.level == logging.DEBUG


def test_set_logging_reaches_children():
    set_logging(logging.WARNING)
    try:
        child = get_logger("isds.metrics.report")
        assert not child.isEnabledFor(logging.INFO)
        assert child.isEnabledFor(logging.WARNING)
    finally:
        set_logging(logging.INFO)
