# services/formatters.py
import re
from typing import Any, Dict, List, Mapping, Optional

# Alphanumeric runs; "_" and punctuation split tokens.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_URL_RE = re.compile(r"https?://\S+", re.IGNORECASE)

# canonical field -> accepted source names, first present wins
TWEET_FIELD_ALIASES: Dict[str, List[str]] = {
    "id": ["id", "id_str", "tweet_id", "ID"],
    "user_id": ["user_id", "author_id", "user", "User ID"],
    "timestamp": ["timestamp", "created_at", "date", "Timestamp"],
    "text": ["text", "full_text", "content", "Text"],
    "lang": ["lang", "language", "Lang"],
    "country": ["country", "country_code", "Country"],
    "is_retweet": ["is_retweet", "retweet", "Retweet"],
    "retweeted_handle": ["retweeted_handle", "retweeted_screen_name", "rt_handle"],
    "replied_handle": ["replied_handle", "in_reply_to_screen_name", "reply_handle"],
    "n_words": ["n_words", "word_count"],
    "n_mentions": ["n_mentions", "mention_count"],
    "n_hashtags": ["n_hashtags", "hashtag_count"],
}

PROFILE_FIELD_ALIASES: Dict[str, List[str]] = {
    "user_id": ["user_id", "author_id", "id"],
    "followers": ["followers", "followers_count"],
    "followees": ["followees", "friends_count", "following_count"],
    "account_created": ["account_created", "created_at", "user_created_at"],
}


def _blank(value: Any) -> bool:
    return value is None or (isinstance(value, str) and value.strip() == "")


def _pick(row: Mapping[str, Any], names: List[str]) -> Any:
    for name in names:
        if name in row and not _blank(row[name]):
            return row[name]
    return None


def normalize_record(
    row: Mapping[str, Any],
    aliases: Mapping[str, List[str]],
    schema: Optional[Mapping[str, str]] = None,
) -> Dict[str, Any]:
    """Map a raw record onto canonical field names. Missing fields come back as None."""
    normalized = {}
    for field, names in aliases.items():
        if schema and field in schema:
            names = [schema[field]]
        normalized[field] = _pick(row, names)
    return normalized


def normalize_tweet_record(row: Mapping[str, Any], schema: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Normalize a tweet row from JSONL/CSV export to canonical Tweet fields."""
    return normalize_record(row, TWEET_FIELD_ALIASES, schema)


def normalize_profile_record(row: Mapping[str, Any], schema: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Normalize a profile side-file row."""
    return normalize_record(row, PROFILE_FIELD_ALIASES, schema)


def parse_bool(value: Any) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if _blank(value):
        return None
    text = str(value).strip().lower()
    if text in ("1", "true", "t", "yes", "y"):
        return True
    if text in ("0", "false", "f", "no", "n"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def tokenize(text: str) -> List[str]:
    """Case-folded alphanumeric tokens."""
    return _TOKEN_RE.findall(text.casefold())


def strip_urls(text: str) -> str:
    return _URL_RE.sub(" ", text)


def style_counts(text: str) -> Dict[str, int]:
    """Word, mention and hashtag counts recomputed from raw text."""
    pieces = text.split()
    return {
        "n_words": len(tokenize(text)),
        "n_mentions": sum(1 for p in pieces if p.startswith("@") and len(p) > 1),
        "n_hashtags": sum(1 for p in pieces if p.startswith("#") and len(p) > 1),
    }


def normalize_handle(handle: Optional[str]) -> Optional[str]:
    """Handles compare case-insensitively and without the leading '@'."""
    if _blank(handle):
        return None
    return str(handle).strip().lstrip("@").casefold()
