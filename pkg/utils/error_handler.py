"""
Error Handler Utility
Provides logging setup, detailed error logging and formatted error payloads for CLI commands
"""

import traceback
import sys
import logging
from pathlib import Path
from typing import Dict, Any, Optional, Tuple
from datetime import datetime, timezone

from utils.exceptions import SlantStudyError, ConfigurationError, MissingArtifactError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE_NAME = 'slant_study.log'

logger = logging.getLogger(__name__)


def configure_logging(log_dir: Optional[Path] = None, level: int = logging.INFO) -> None:
    """
    Configure root logging with a stdout handler and, when a directory is given,
    a UTF-8 file handler writing slant_study.log inside it.
    """
    handlers: list = [logging.StreamHandler(sys.stdout)]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / LOG_FILE_NAME, encoding='utf-8'))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def get_detailed_error_info(exception: Exception, context: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Extract detailed error information from an exception.

    Args:
        exception: The exception object
        context: Optional context dictionary with additional information

    Returns:
        Dictionary with detailed error information
    """
    tb = exception.__traceback__
    full_traceback = ''.join(traceback.format_exception(type(exception), exception, tb))
    simplified_tb = traceback.format_tb(tb)
    last_frames = simplified_tb[-5:]

    error_info = {
        "error_type": type(exception).__name__,
        "error_message": str(exception),
        "error_module": getattr(exception, '__module__', 'unknown'),
        "traceback": {
            "full": full_traceback,
            "last_frames": ''.join(last_frames),
        },
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }

    if context:
        error_info["context"] = context

    if isinstance(exception, SlantStudyError):
        error_info["error_category"] = exception.category
        error_info["exit_code"] = exception.exit_code
        if isinstance(exception, ConfigurationError) and exception.line is not None:
            error_info["line"] = exception.line
        if isinstance(exception, MissingArtifactError):
            error_info["producer"] = exception.producer
    elif isinstance(exception, ValueError):
        error_info["error_category"] = "validation_error"
    elif isinstance(exception, KeyError):
        error_info["error_category"] = "missing_key"
        error_info["missing_key"] = str(exception)
    elif isinstance(exception, (OSError, IOError)):
        error_info["error_category"] = "io_error"
    else:
        error_info["error_category"] = "general_error"

    return error_info


def log_error(exception: Exception, context: Optional[Dict[str, Any]] = None, command: Optional[str] = None):
    """
    Log detailed error information; the full traceback goes to DEBUG.

    Args:
        exception: The exception object
        context: Optional context dictionary
        command: Optional CLI subcommand name
    """
    error_info = get_detailed_error_info(exception, context)

    log_parts = [
        f"\n{'='*80}",
        "ERROR OCCURRED",
        f"{'='*80}",
        f"Timestamp: {error_info['timestamp']}",
        f"Error Type: {error_info['error_type']}",
        f"Error Message: {error_info['error_message']}",
    ]
    if command:
        log_parts.append(f"Command: {command}")
    if context:
        log_parts.append(f"Context: {context}")
    log_parts.extend([
        "\nTraceback (last 5 frames):",
        f"{error_info['traceback']['last_frames']}",
        f"{'='*80}\n"
    ])

    logger.error('\n'.join(log_parts))
    logger.debug(f"Full traceback:\n{error_info['traceback']['full']}")


def exit_code_for(exception: Exception) -> int:
    """Process exit code for an exception: known errors carry their own, the rest map to 1."""
    if isinstance(exception, SlantStudyError):
        return exception.exit_code
    return 1


def format_error_response(
    exception: Exception,
    context: Optional[Dict[str, Any]] = None,
    include_traceback: bool = False,
    user_message: Optional[str] = None
) -> Tuple[Dict[str, Any], int]:
    """
    Format an error payload for the command summary.

    Returns:
        Tuple of (payload, exit_code)
    """
    error_info = get_detailed_error_info(exception, context)
    exit_code = exit_code_for(exception)

    if isinstance(exception, SlantStudyError):
        detail = str(exception)
    else:
        detail = user_message or "An internal error occurred"

    response = {
        "data": None,
        "error": {
            "message": detail,
            "type": error_info["error_type"],
            "category": error_info.get("error_category", "general_error"),
            "timestamp": error_info["timestamp"],
        }
    }
    if "line" in error_info:
        response["error"]["line"] = error_info["line"]
    if "producer" in error_info:
        response["error"]["producer"] = error_info["producer"]
    if context:
        response["error"]["context"] = context
    if include_traceback:
        response["error"]["traceback"] = error_info["traceback"]["last_frames"]

    return response, exit_code


def handle_command_error(
    exception: Exception,
    command: str,
    context: Optional[Dict[str, Any]] = None,
    include_traceback: bool = False,
    user_message: Optional[str] = None
) -> Tuple[Dict[str, Any], int]:
    """
    Log the error and return the formatted payload with its exit code.
    """
    log_error(exception, context, command)
    return format_error_response(exception, context, include_traceback, user_message)
