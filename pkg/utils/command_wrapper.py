"""
Command Wrapper Utility
Simplifies error handling in CLI subcommands
"""

import logging
from functools import wraps
from typing import Callable, Optional

from utils.error_handler import handle_command_error

logger = logging.getLogger(__name__)


def with_error_handling(
    command: str,
    operation: Optional[str] = None,
    **default_context
):
    """
    Decorator to wrap CLI subcommands with comprehensive error handling.

    The wrapped function returns normally on success; the wrapper turns that into exit
    code 0 and any exception into the exit code its class carries (1 for unknown errors).

    Args:
        command: The CLI subcommand name (e.g., "score")
        operation: Optional operation name for logging
        **default_context: Additional context to include in error logs

    Usage:
        @with_error_handling("score", "score_corpus")
        def run_score(cfg, args):
            ...
    """
    def decorator(func: Callable) -> Callable[..., int]:
        @wraps(func)
        def wrapper(*args, **kwargs) -> int:
            op_name = operation or func.__name__
            try:
                func(*args, **kwargs)
                return 0
            except KeyboardInterrupt:
                raise
            except Exception as e:
                context = {
                    "operation": op_name,
                    "function": func.__name__,
                    **default_context
                }
                error_response, exit_code = handle_command_error(
                    e,
                    command,
                    context,
                    include_traceback=False,
                    user_message=f"Error in {op_name}: {str(e)}"
                )
                logger.error(f"[{command}] exit {exit_code}: {error_response['error']['message']}")
                return exit_code

        return wrapper
    return decorator
