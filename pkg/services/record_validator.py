"""
Record validator - validates normalized tweet and profile payloads before they enter a
corpus. Returns (is_valid, error_message) so ingestion can turn failures into reject rows
instead of aborting the stream.
"""
import math
from typing import Any, Dict, Optional

import pandas as pd

from services.formatters import parse_bool

# Required fields for tweet records
REQUIRED_FIELDS = ["id", "user_id", "timestamp", "country"]

COUNT_FIELDS = ["n_words", "n_mentions", "n_hashtags"]

PROFILE_REQUIRED_FIELDS = ["user_id"]


def _missing(value: Any) -> bool:
    return value is None or (isinstance(value, str) and value.strip() == "")


def _validate_count(value: Any, field_name: str) -> Optional[str]:
    """Counts must be non-negative integers when present."""
    if _missing(value):
        return None
    try:
        number = float(value)
    except (ValueError, TypeError):
        return f"{field_name} is not a number"
    if not math.isfinite(number):
        return f"{field_name} not a finite integer"
    if not number.is_integer():
        return f"{field_name} is not an integer"
    if number < 0:
        return f"{field_name} is negative"
    return None


def _validate_timestamp(value: Any, field_name: str = "timestamp") -> Optional[str]:
    try:
        stamp = pd.Timestamp(value)
    except (ValueError, TypeError):
        return f"unparseable {field_name} {value!r}"
    if pd.isna(stamp):
        return f"unparseable {field_name} {value!r}"
    return None


def validate_tweet_payload(payload: Dict[str, Any]) -> tuple[bool, Optional[str]]:
    """
    Validate a normalized tweet payload.

    Args:
        payload: Canonical tweet fields (see formatters.normalize_tweet_record)

    Returns:
        Tuple of (is_valid, error_message)
        - is_valid: True if payload is valid, False otherwise
        - error_message: Reasons joined by '; ' if invalid, None if valid
    """
    errors = []

    for field in REQUIRED_FIELDS:
        if _missing(payload.get(field)):
            errors.append(f"missing {field}")

    if not _missing(payload.get("timestamp")):
        problem = _validate_timestamp(payload["timestamp"])
        if problem:
            errors.append(problem)

    for field in COUNT_FIELDS:
        problem = _validate_count(payload.get(field), field)
        if problem:
            errors.append(problem)

    try:
        is_retweet = parse_bool(payload.get("is_retweet"))
    except ValueError:
        errors.append(f"is_retweet is not a boolean: {payload.get('is_retweet')!r}")
        is_retweet = None

    has_handle = not _missing(payload.get("retweeted_handle"))
    if is_retweet is True and not has_handle:
        errors.append("retweet without retweeted_handle")
    if is_retweet is False and has_handle:
        errors.append("retweeted_handle on a non-retweet")

    if errors:
        return False, "; ".join(errors)
    return True, None


def validate_profile_payload(payload: Dict[str, Any]) -> tuple[bool, Optional[str]]:
    """
    Validate a normalized profile side-file payload.

    Returns:
        Tuple of (is_valid, error_message)
    """
    errors = []
    for field in PROFILE_REQUIRED_FIELDS:
        if _missing(payload.get(field)):
            errors.append(f"missing {field}")
    for field in ("followers", "followees"):
        problem = _validate_count(payload.get(field), field)
        if problem:
            errors.append(problem)
    if not _missing(payload.get("account_created")):
        problem = _validate_timestamp(payload["account_created"], "account_created")
        if problem:
            errors.append(problem)

    if errors:
        return False, "; ".join(errors)
    return True, None
