"""Logging setup shared by the CLI and the test tooling."""
import logging
import os
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LEVEL_ENV = "SPLAT_ALIGN_LOG_LEVEL"
CLOUD_ENV = "SPLAT_ALIGN_CLOUD_LOGGING"


def resolve_level(level=None):
    """Pick the log level from the argument, then the environment, then INFO."""
    if level is None:
        level = os.environ.get(LEVEL_ENV, "INFO")
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(str(level).upper())
    if not isinstance(resolved, int):
        raise ValueError(f"Unknown log level: {level}")
    return resolved


def configure_logging(level=None, cloud=None):
    """
    Install a single stream handler on the root logger.

    When cloud logging is requested (argument or SPLAT_ALIGN_CLOUD_LOGGING=1),
    the google-cloud-logging handler is attached as well. Any failure there is
    logged and the stream handler stays in place.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_splat_align", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._splat_align = True
    root.addHandler(handler)
    root.setLevel(resolve_level(level))

    if cloud is None:
        cloud = os.environ.get(CLOUD_ENV) == "1"
    if cloud:
        _attach_cloud_logging(root.level)
    return root


def _attach_cloud_logging(level):
    logger = logging.getLogger(__name__)
    try:
        import google.cloud.logging
        client = google.cloud.logging.Client()
        client.setup_logging(log_level=level)
        logger.info("Cloud logging enabled")
    except Exception as e:
        logger.warning(f"Cloud logging unavailable, using stderr only: {e}")
