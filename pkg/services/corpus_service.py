"""
Corpus Service - ingestion, validation, filtering and descriptive analysis of tweet corpora
and user profiles.
"""

import csv
import json
import logging
from datetime import date, datetime
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from services.formatters import (
    normalize_handle,
    normalize_profile_record,
    normalize_tweet_record,
    parse_bool,
    style_counts,
    tokenize,
)
from services.record_validator import validate_profile_payload, validate_tweet_payload
from utils.exceptions import ConfigurationError, ParseError, UnmappedCountryError

logger = logging.getLogger(__name__)

TWEET_FIELDS = [
    "id", "user_id", "timestamp", "text", "lang", "country", "is_retweet",
    "retweeted_handle", "replied_handle", "n_words", "n_mentions", "n_hashtags",
]
CORPUS_COLUMNS = TWEET_FIELDS[:3] + ["day"] + TWEET_FIELDS[3:]
PROFILE_COLUMNS = ["user_id", "followers", "followees", "account_created"]


def to_utc(value: Any) -> datetime:
    """Parse an instant; naive values are taken as UTC."""
    stamp = pd.Timestamp(value)
    if stamp.tzinfo is None:
        stamp = stamp.tz_localize("UTC")
    return stamp.tz_convert("UTC").to_pydatetime()


class Tweet(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    user_id: str
    timestamp: datetime
    text: str = ""
    lang: Optional[str] = None
    country: str
    is_retweet: bool = False
    retweeted_handle: Optional[str] = None
    replied_handle: Optional[str] = None
    n_words: int = Field(ge=0)
    n_mentions: int = Field(ge=0)
    n_hashtags: int = Field(ge=0)

    @field_validator("timestamp", mode="before")
    @classmethod
    def _utc(cls, value: Any) -> datetime:
        return to_utc(value)

    @computed_field
    @property
    def day(self) -> date:
        return self.timestamp.date()

    @model_validator(mode="after")
    def _check_invariants(self) -> "Tweet":
        if self.is_retweet != (self.retweeted_handle is not None):
            raise ValueError("retweeted_handle must be present iff is_retweet")
        if self.n_words < 1 and tokenize(self.text):
            raise ValueError("n_words is 0 for a text with words")
        return self


class UserProfile(BaseModel):
    user_id: str
    country: str
    in_treated_region: bool
    followers: int = Field(default=0, ge=0)
    followees: int = Field(default=0, ge=0)
    account_created: Optional[date] = None
    n_tweets: int = Field(default=0, ge=0)
    n_retweets: int = Field(default=0, ge=0)
    n_replies: int = Field(default=0, ge=0)

    @property
    def reputation(self) -> Optional[float]:
        """followers / (followers + followees); None when the user follows and is followed by no one."""
        total = self.followers + self.followees
        if total == 0:
            return None
        return self.followers / total


class QuerySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    terms: List[str]
    combinator: str = "OR"

    @field_validator("terms")
    @classmethod
    def _lowercase_nonempty(cls, terms: List[str]) -> List[str]:
        if not terms:
            raise ValueError("query needs at least one term")
        for term in terms:
            if not term or term == "*":
                raise ValueError(f"empty query term {term!r}")
            if term != term.lower():
                raise ValueError(f"query term {term!r} is not lowercase")
        return terms

    @field_validator("combinator")
    @classmethod
    def _only_or(cls, combinator: str) -> str:
        if combinator.upper() != "OR":
            raise ValueError("only the OR combinator is supported")
        return "OR"

    @classmethod
    def parse(cls, query: str) -> "QuerySpec":
        """Parse 'russ* OR ukrain* OR nato'."""
        terms = [t.strip() for t in query.split(" OR ") if t.strip()]
        return cls(terms=terms)


class FilterSpec(BaseModel):
    langs: Optional[FrozenSet[str]] = None
    countries: Optional[FrozenSet[str]] = None
    start: Optional[date] = None
    end: Optional[date] = None
    drop_users: FrozenSet[str] = frozenset()
    drop_accounts_created_after: Optional[date] = None
    query: Optional[QuerySpec] = None


class RawRecord(NamedTuple):
    line_no: int
    record: Optional[Dict[str, Any]]
    error: Optional[str] = None


class Reject(NamedTuple):
    line_no: int
    reason: str


class FilterResult(NamedTuple):
    corpus: "CorpusStore"
    dropped: Dict[str, int]


class CorpusStore:
    """
    Validated, immutable tweet corpus ordered by (day, id).
    `frame` hands out a copy; the store itself is never mutated after construction.
    """

    def __init__(self, frame: Optional[pd.DataFrame] = None, rejects: Sequence[Reject] = ()):
        if frame is None:
            frame = pd.DataFrame({c: pd.Series(dtype=object) for c in CORPUS_COLUMNS})
        frame = frame[CORPUS_COLUMNS].sort_values(["day", "id"], kind="mergesort")
        self._frame = frame.reset_index(drop=True)
        self.rejects = tuple(rejects)

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CorpusStore):
            return NotImplemented
        return self._frame.equals(other._frame)

    def __repr__(self) -> str:
        return f"CorpusStore(n={len(self)}, rejects={len(self.rejects)})"

    @property
    def ids(self) -> List[str]:
        return list(self._frame["id"])

    @property
    def user_ids(self) -> List[str]:
        return sorted(self._frame["user_id"].unique())

    def iter_tweets(self) -> Iterator[Tweet]:
        for row in self._frame[TWEET_FIELDS].to_dict("records"):
            row = {k: (None if _isna(v) else v) for k, v in row.items()}
            row["is_retweet"] = bool(row["is_retweet"])
            for field in ("n_words", "n_mentions", "n_hashtags"):
                row[field] = int(row[field])
            yield Tweet(**row)

    def subset(self, mask: Union[pd.Series, np.ndarray]) -> "CorpusStore":
        return CorpusStore(self._frame[np.asarray(mask, dtype=bool)], self.rejects)


def _isna(value: Any) -> bool:
    return value is None or (isinstance(value, float) and np.isnan(value))


# ===========================
# Reading and writing
# ===========================

def _is_csv(path: Path) -> bool:
    return path.suffix.lower() == ".csv"


def _decode(raw: bytes, line_no: int) -> str:
    return raw.decode("utf-8-sig" if line_no == 1 else "utf-8")


def _read_csv_records(path: Path) -> Iterator[RawRecord]:
    """Row-by-row CSV reading; ragged rows and undecodable lines become rejects."""
    undecodable: List[RawRecord] = []
    line_no = 0

    def lines() -> Iterator[str]:
        nonlocal line_no
        with open(path, "rb") as f:
            for line_no, raw in enumerate(f, 1):
                try:
                    yield _decode(raw, line_no)
                except UnicodeDecodeError:
                    undecodable.append(RawRecord(line_no, None, "invalid utf-8"))

    reader = csv.reader(lines())
    header = next(reader, None)
    if undecodable and undecodable[0].line_no == 1:
        raise ParseError("invalid utf-8 in header", 1)
    if header is None:
        return
    header = [name.strip() for name in header]

    for row in reader:
        yield from undecodable
        undecodable.clear()
        if not any(value.strip() for value in row):
            continue
        if len(row) != len(header):
            yield RawRecord(line_no, None, f"expected {len(header)} fields, found {len(row)}")
            continue
        yield RawRecord(line_no, dict(zip(header, row)))
    yield from undecodable


def read_records(path: Union[str, Path]) -> Iterator[RawRecord]:
    """Stream (line_no, record) pairs from a JSONL file or a CSV file with a header row."""
    path = Path(path)
    if _is_csv(path):
        yield from _read_csv_records(path)
        return

    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, 1):
            try:
                line = _decode(raw, line_no).strip()
            except UnicodeDecodeError:
                yield RawRecord(line_no, None, "invalid utf-8")
                continue
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                yield RawRecord(line_no, None, "malformed json")
                continue
            if not isinstance(record, dict):
                yield RawRecord(line_no, None, "record is not an object")
                continue
            yield RawRecord(line_no, record)


def _numbered(source: Iterable[Union[RawRecord, Mapping[str, Any]]]) -> Iterator[RawRecord]:
    for position, item in enumerate(source, 1):
        if isinstance(item, RawRecord):
            yield item
        else:
            yield RawRecord(position, dict(item))


def _tweet_from_payload(payload: Dict[str, Any]) -> Tweet:
    text = "" if payload.get("text") is None else str(payload["text"])
    counts = style_counts(text)
    for field in ("n_words", "n_mentions", "n_hashtags"):
        if payload.get(field) is None:
            payload[field] = counts[field]
        else:
            payload[field] = int(float(payload[field]))

    handle = payload.get("retweeted_handle")
    is_retweet = parse_bool(payload.get("is_retweet"))
    if is_retweet is None:
        is_retweet = handle is not None

    return Tweet(
        id=str(payload["id"]),
        user_id=str(payload["user_id"]),
        timestamp=payload["timestamp"],
        text=text,
        lang=None if payload.get("lang") is None else str(payload["lang"]).strip().lower(),
        country=str(payload["country"]).strip().upper(),
        is_retweet=is_retweet,
        retweeted_handle=None if handle is None else str(handle).strip(),
        replied_handle=None if payload.get("replied_handle") is None else str(payload["replied_handle"]).strip(),
        n_words=payload["n_words"],
        n_mentions=payload["n_mentions"],
        n_hashtags=payload["n_hashtags"],
    )


def ingest_tweets(
    source: Iterable[Union[RawRecord, Mapping[str, Any]]],
    schema: Optional[Mapping[str, str]] = None,
) -> CorpusStore:
    """
    Validate a record stream into a CorpusStore.

    Malformed records and duplicate ids become rejects (first occurrence wins); the stream
    is never aborted. `schema` maps canonical field names to source column names.
    """
    seen = set()
    rows = []
    rejects: List[Reject] = []

    for raw in _numbered(source):
        if raw.record is None:
            rejects.append(Reject(raw.line_no, raw.error or "unreadable record"))
            continue
        payload = normalize_tweet_record(raw.record, schema)
        is_valid, error_message = validate_tweet_payload(payload)
        if not is_valid:
            rejects.append(Reject(raw.line_no, error_message))
            continue
        try:
            tweet = _tweet_from_payload(payload)
        except (ValueError, TypeError, OverflowError) as e:
            rejects.append(Reject(raw.line_no, f"invalid record: {e}".splitlines()[0]))
            continue
        if tweet.id in seen:
            rejects.append(Reject(raw.line_no, f"duplicate id {tweet.id}"))
            continue
        seen.add(tweet.id)
        rows.append(tweet.model_dump())

    frame = pd.DataFrame(rows, columns=CORPUS_COLUMNS) if rows else None
    store = CorpusStore(frame, rejects)
    logger.info(f"[INGEST] accepted={len(store)}, rejected={len(rejects)}")
    for reject in rejects[:20]:
        logger.debug(f"[INGEST] reject line {reject.line_no}: {reject.reason}")
    return store


def load_corpus(path: Union[str, Path], schema: Optional[Mapping[str, str]] = None) -> CorpusStore:
    return ingest_tweets(read_records(path), schema)


def write_corpus(store: CorpusStore, path: Union[str, Path]) -> Path:
    """Write the corpus as JSONL in ingestion format; re-ingesting yields an equal corpus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tweet in store.iter_tweets():
            record = tweet.model_dump(exclude={"day"})
            record["timestamp"] = tweet.timestamp.isoformat()
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def write_rejects(rejects: Sequence[Reject], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rejects), columns=["line_no", "reason"]).to_csv(path, index=False, lineterminator="\n")
    return path


def load_profiles(path: Union[str, Path], schema: Optional[Mapping[str, str]] = None) -> pd.DataFrame:
    """Read the profile side file (followers, followees, account_created) keyed by user_id."""
    rows = {}
    for raw in read_records(path):
        if raw.record is None:
            logger.warning(f"[PROFILES] skipping line {raw.line_no}: {raw.error or 'unreadable profile record'}")
            continue
        payload = normalize_profile_record(raw.record, schema)
        is_valid, error_message = validate_profile_payload(payload)
        if not is_valid:
            logger.warning(f"[PROFILES] skipping line {raw.line_no}: {error_message}")
            continue
        user_id = str(payload["user_id"])
        if user_id in rows:
            continue
        created = payload.get("account_created")
        rows[user_id] = {
            "user_id": user_id,
            "followers": int(float(payload.get("followers") or 0)),
            "followees": int(float(payload.get("followees") or 0)),
            "account_created": None if created is None else to_utc(created).date(),
        }
    return pd.DataFrame(list(rows.values()), columns=PROFILE_COLUMNS)


def load_banned_handles(path: Union[str, Path]) -> FrozenSet[str]:
    """Plain-text handle list, one per line; blank lines and '#' comments ignored."""
    handles = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                handles.add(normalize_handle(line))
    return frozenset(handles)


# ===========================
# Query and filters
# ===========================

def match_query(text: str, q: QuerySpec) -> bool:
    """True iff any token of the case-folded text matches any pattern; 'p*' is a prefix match."""
    tokens = tokenize(text)
    for term in q.terms:
        if term.endswith("*"):
            prefix = term[:-1]
            if any(token.startswith(prefix) for token in tokens):
                return True
        elif term in tokens:
            return True
    return False


def filter_corpus(
    c: CorpusStore,
    f: FilterSpec,
    profiles: Optional[pd.DataFrame] = None,
) -> FilterResult:
    """
    Apply every predicate of the filter; drops are counted per predicate in order of
    application. Accounts created on or after `drop_accounts_created_after` are removed.
    """
    if f.start is not None and f.end is not None and f.start > f.end:
        raise ConfigurationError(f"inverted date range: start {f.start} is after end {f.end}")
    if f.drop_accounts_created_after is not None and profiles is None:
        raise ConfigurationError("drop_accounts_created_after needs the profile side file")

    frame = c._frame
    keep = pd.Series(True, index=frame.index)
    dropped: Dict[str, int] = {}

    def apply(name: str, mask: pd.Series) -> None:
        nonlocal keep
        dropped[name] = int((keep & ~mask).sum())
        keep = keep & mask

    if f.langs:
        langs = {lang.lower() for lang in f.langs}
        apply("lang", frame["lang"].isin(langs))
    if f.countries:
        countries = {code.upper() for code in f.countries}
        apply("country", frame["country"].isin(countries))
    if f.start is not None:
        apply("start", frame["day"] >= f.start)
    if f.end is not None:
        apply("end", frame["day"] <= f.end)
    if f.drop_users:
        apply("drop_users", ~frame["user_id"].isin(f.drop_users))
    if f.drop_accounts_created_after is not None:
        created = profiles.dropna(subset=["account_created"])
        late = set(created.loc[created["account_created"] >= f.drop_accounts_created_after, "user_id"])
        apply("late_accounts", ~frame["user_id"].isin(late))
    if f.query is not None:
        apply("query", frame["text"].map(lambda text: match_query(text, f.query)).astype(bool))

    for name, count in dropped.items():
        logger.info(f"[FILTER] {name}: dropped {count}")
    return FilterResult(c.subset(keep), dropped)


# ===========================
# Profiles and descriptives
# ===========================

def _modal_country(countries: pd.Series) -> str:
    counts = countries.value_counts()
    top = counts[counts == counts.max()].index
    return sorted(top)[0]


def derive_user_profiles(
    c: CorpusStore,
    region_map: Mapping[str, bool],
    side: Optional[pd.DataFrame] = None,
) -> List[UserProfile]:
    """
    One profile per user: modal country, treated flag from the region map, activity split
    into original tweets, retweets and replies, follower counts from the side file.
    """
    frame = c._frame
    region_map = {code.upper(): bool(flag) for code, flag in region_map.items()}
    unmapped = set(frame["country"]) - set(region_map)
    if unmapped:
        raise UnmappedCountryError(unmapped)
    if frame.empty:
        return []

    side_rows: Dict[str, Dict[str, Any]] = {}
    if side is not None and len(side):
        side_rows = {row["user_id"]: row for row in side.to_dict("records")}

    is_reply = (~frame["is_retweet"].astype(bool)) & frame["replied_handle"].notna()
    kinds = np.where(frame["is_retweet"].astype(bool), "retweet", np.where(is_reply, "reply", "tweet"))
    tallies = pd.crosstab(frame["user_id"], kinds)

    profiles = []
    for user_id, group in frame.groupby("user_id", sort=True):
        country = _modal_country(group["country"])
        extra = side_rows.get(user_id, {})
        created = extra.get("account_created")
        profiles.append(UserProfile(
            user_id=user_id,
            country=country,
            in_treated_region=region_map[country],
            followers=int(extra.get("followers") or 0),
            followees=int(extra.get("followees") or 0),
            account_created=None if created is None or pd.isna(created) else created,
            n_tweets=int(tallies.loc[user_id].get("tweet", 0)),
            n_retweets=int(tallies.loc[user_id].get("retweet", 0)),
            n_replies=int(tallies.loc[user_id].get("reply", 0)),
        ))
    return profiles


def profiles_frame(profiles: Sequence[UserProfile]) -> pd.DataFrame:
    rows = []
    for p in profiles:
        row = p.model_dump()
        row["reputation"] = np.nan if p.reputation is None else p.reputation
        rows.append(row)
    columns = list(UserProfile.model_fields) + ["reputation"]
    return pd.DataFrame(rows, columns=columns)


def stem_frequency(
    corpora: Union[CorpusStore, Mapping[str, CorpusStore]],
    stems: Sequence[str],
) -> pd.DataFrame:
    """
    Share of documents with at least one token starting with each stem, one column per
    corpus label.
    """
    if not stems:
        raise ConfigurationError("stem list is empty")
    for stem in stems:
        if not stem or stem != stem.lower():
            raise ConfigurationError(f"stem {stem!r} must be nonempty and lowercase")
    if isinstance(corpora, CorpusStore):
        corpora = {"corpus": corpora}

    table = {}
    for label, store in corpora.items():
        token_sets = [set(tokenize(text)) for text in store._frame["text"]]
        n_docs = len(token_sets)
        shares = []
        for stem in stems:
            hits = sum(1 for tokens in token_sets if any(t.startswith(stem) for t in tokens))
            shares.append(hits / n_docs if n_docs else 0.0)
        table[label] = shares
    return pd.DataFrame(table, index=pd.Index(list(stems), name="stem"))


def describe_corpus(c: CorpusStore) -> pd.DataFrame:
    """Summary statistics (n, mean, sd, min, max) of the style counts and the retweet indicator."""
    frame = c._frame
    rows = {}
    for column in ("n_words", "n_mentions", "n_hashtags", "is_retweet"):
        values = frame[column].astype(float)
        rows[column] = {
            "n": int(values.size),
            "mean": float(values.mean()) if values.size else np.nan,
            "sd": float(values.std(ddof=1)) if values.size > 1 else np.nan,
            "min": float(values.min()) if values.size else np.nan,
            "max": float(values.max()) if values.size else np.nan,
        }
    return pd.DataFrame.from_dict(rows, orient="index")
