import logging
from functools import wraps

from pydantic import ValidationError

from core.errors import AnmsError, UsageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def cli_command(func):
    """Turns a subcommand handler into an exit code: 0 ok, 1 usage, 2 data."""
    func.__cli_command__ = True

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            func(*args, **kwargs)
        except (UsageError, ValidationError) as exc:
            logger.error(f"[CLI] Usage error in {func.__name__}: {exc}")
            return EXIT_USAGE
        except AnmsError as exc:
            logger.error(f"[CLI] {exc.code}: {exc.message}")
            return exc.exit_code
        except OSError as exc:
            logger.error(f"[CLI] I/O failure ({getattr(exc, 'filename', None)}): {exc}")
            return EXIT_DATA
        return EXIT_OK

    wrapper.__cli_command__ = True
    return wrapper
