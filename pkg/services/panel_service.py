"""
Panel Service - user-day aggregation of scored documents, cohort flags, percentile splits
and descriptive tables.
"""
import logging
import math
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator
from scipy import stats

from services.corpus_service import CorpusStore
from services.formatters import normalize_handle
from utils.exceptions import (
    ConfigurationError,
    DegenerateError,
    DomainError,
    EmptySelectionError,
    IntegrityError,
)

logger = logging.getLogger(__name__)

PANEL_COLUMNS = [
    "user_id", "day", "avg_slant", "n_tweets", "n_retweets", "n_proR_tweets", "n_proR_retweets",
    "share_proR_tweets", "share_proR_retweets", "mean_words", "mean_mentions", "mean_hashtags",
]
FLAG_COLUMNS = [
    "user_id", "is_interaction", "is_supplier", "is_bot", "created_after_ban", "slant_group", "activity_group",
]
OUTCOMES = ["avg_slant", "share_proR_tweets", "share_proR_retweets", "n_proR_tweets", "n_proR_retweets"]
CONTROLS = ["mean_words", "mean_mentions", "mean_hashtags"]


class StudyWindow(BaseModel):
    start: date
    ban_date: date
    end: date

    @model_validator(mode="after")
    def _ordered(self) -> "StudyWindow":
        if not self.start < self.ban_date <= self.end:
            raise ValueError(f"window must satisfy start < ban_date <= end (got {self.start}, {self.ban_date}, {self.end})")
        return self

    @property
    def days(self) -> List[date]:
        return [self.start + timedelta(days=k) for k in range((self.end - self.start).days + 1)]

    @property
    def pre_days(self) -> List[date]:
        return [d for d in self.days if d < self.ban_date]

    @property
    def post_days(self) -> List[date]:
        return [d for d in self.days if d >= self.ban_date]

    def contains(self, day: date) -> bool:
        return self.start <= day <= self.end

    def is_post(self, day: date) -> bool:
        return day >= self.ban_date


class SampleSpec(BaseModel):
    """Named estimation sample: a cohort plus optional exclusions and group restriction."""

    cohort: Literal["all", "interaction", "non-interaction", "suppliers", "non-suppliers"] = "all"
    exclude_bots: bool = False
    exclude_late_accounts: bool = False
    slant_group: Optional[Literal["moderate", "high"]] = None
    activity_group: Optional[Literal["moderate", "high", "top05"]] = None


class Split(NamedTuple):
    below: FrozenSet[str]
    above: FrozenSet[str]


# ===========================
# Percentiles
# ===========================

def nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise DegenerateError("percentile of an empty set")
    if not 0.0 < p <= 1.0:
        raise DomainError(f"percentile {p} outside (0, 1]")
    rank = min(max(math.ceil(p * ordered.size), 1), ordered.size)
    return float(ordered[rank - 1])


def percentile_split(user_stats: Mapping[str, float], cutoff: float) -> Split:
    """Users strictly above the nearest-rank quantile go above; ties at the quantile stay below."""
    if len(user_stats) < 2:
        raise DegenerateError(f"percentile split needs at least 2 users, got {len(user_stats)}")
    if not 0.0 < cutoff < 1.0:
        raise DomainError(f"cutoff {cutoff} outside (0, 1)")
    q = nearest_rank(list(user_stats.values()), cutoff)
    above = frozenset(u for u, v in user_stats.items() if v > q)
    if not above:
        logger.warning(f"[PANEL] percentile split at {cutoff} is degenerate (no user above {q})")
    return Split(frozenset(user_stats) - above, above)


# ===========================
# Panel construction
# ===========================

def _scored_documents(scores: pd.DataFrame, corpus: CorpusStore) -> pd.DataFrame:
    scores = scores.assign(tweet_id=scores["tweet_id"].astype(str))
    duplicated = scores["tweet_id"].duplicated()
    if duplicated.any():
        raise IntegrityError(f"{int(duplicated.sum())} document(s) scored more than once, e.g. {scores.loc[duplicated, 'tweet_id'].iloc[0]}")
    frame = corpus.frame
    orphans = ~scores["tweet_id"].isin(frame["id"])
    if orphans.any():
        raise IntegrityError(f"{int(orphans.sum())} score(s) without a corpus row, e.g. {scores.loc[orphans, 'tweet_id'].iloc[0]}")
    merged = frame.merge(scores, left_on="id", right_on="tweet_id", how="inner", validate="one_to_one")
    unscored = len(frame) - len(merged)
    if unscored:
        logger.info(f"[PANEL] {unscored} corpus document(s) carry no score and are left out")
    return merged


def build_panel(
    scores: pd.DataFrame,
    corpus: CorpusStore,
    window: StudyWindow,
    threshold: float = 1.0,
) -> pd.DataFrame:
    """
    One cell per active (user, day): mean z, original/retweet counts, pro-R counts and
    shares at `threshold`, and the mean style controls. Shares are NaN when their
    denominator is zero.
    """
    docs = _scored_documents(scores, corpus)
    outside = ~docs["day"].map(window.contains).astype(bool)
    if outside.any():
        raise IntegrityError(f"{int(outside.sum())} scored document(s) fall outside the study window {window.start}..{window.end}")
    if docs.empty:
        return pd.DataFrame({c: pd.Series(dtype=object) for c in PANEL_COLUMNS})

    is_rt = docs["is_retweet"].astype(bool)
    pro = docs["z"].astype(float) > threshold
    docs = docs.assign(
        _tweet=(~is_rt).astype(int),
        _retweet=is_rt.astype(int),
        _pro_tweet=((~is_rt) & pro).astype(int),
        _pro_retweet=(is_rt & pro).astype(int),
    )
    grouped = docs.groupby(["user_id", "day"], sort=True)
    panel = pd.DataFrame({
        "avg_slant": grouped["z"].mean(),
        "n_tweets": grouped["_tweet"].sum(),
        "n_retweets": grouped["_retweet"].sum(),
        "n_proR_tweets": grouped["_pro_tweet"].sum(),
        "n_proR_retweets": grouped["_pro_retweet"].sum(),
        "mean_words": grouped["n_words"].mean(),
        "mean_mentions": grouped["n_mentions"].mean(),
        "mean_hashtags": grouped["n_hashtags"].mean(),
    }).reset_index()
    panel["share_proR_tweets"] = (panel["n_proR_tweets"] / panel["n_tweets"]).where(panel["n_tweets"] > 0)
    panel["share_proR_retweets"] = (panel["n_proR_retweets"] / panel["n_retweets"]).where(panel["n_retweets"] > 0)
    for column in ("n_tweets", "n_retweets", "n_proR_tweets", "n_proR_retweets"):
        panel[column] = panel[column].astype(int)

    logger.info(f"[PANEL] {len(panel)} user-day cells from {len(docs)} documents, {panel['user_id'].nunique()} users")
    return panel[PANEL_COLUMNS]


def attach_treatment(
    panel: pd.DataFrame,
    profiles: pd.DataFrame,
    window: Optional[StudyWindow] = None,
) -> pd.DataFrame:
    """Add `treated` (user in a treated region) and, given a window, `post` (day >= ban date)."""
    treated = dict(zip(profiles["user_id"].astype(str), profiles["in_treated_region"].astype(bool)))
    missing = sorted(set(panel["user_id"]) - set(treated))
    if missing:
        raise IntegrityError(f"{len(missing)} panel user(s) without a profile, e.g. {missing[0]}")
    out = panel.copy()
    out["treated"] = out["user_id"].map(treated).astype(int)
    if window is not None:
        out["post"] = out["day"].map(window.is_post).astype(int)
    return out


# ===========================
# Cohort flags
# ===========================

def flag_interaction_users(c: CorpusStore, banned_handles: FrozenSet[str], window: StudyWindow) -> FrozenSet[str]:
    """Users with at least one pre-ban retweet of, or reply to, a banned handle."""
    if not banned_handles:
        raise ConfigurationError("banned handle set is empty")
    banned = {normalize_handle(h) for h in banned_handles}
    frame = c.frame
    pre = frame[frame["day"] < window.ban_date]
    retweeted = pre["retweeted_handle"].map(normalize_handle).isin(banned)
    replied = pre["replied_handle"].map(normalize_handle).isin(banned)
    return frozenset(pre.loc[retweeted | replied, "user_id"])


def flag_suppliers(
    scores: pd.DataFrame,
    corpus: CorpusStore,
    window: StudyWindow,
    threshold: float = 1.0,
) -> FrozenSet[str]:
    """Users with at least one pre-ban document scored strictly above `threshold`."""
    docs = _scored_documents(scores, corpus)
    hit = (docs["day"] < window.ban_date) & (docs["z"].astype(float) > threshold)
    return frozenset(docs.loc[hit, "user_id"])


def user_activity(corpus: CorpusStore, window: StudyWindow, pre_ban_only: bool = True) -> pd.Series:
    """Documents per day for each user, averaged over the (pre-ban) span of the window."""
    frame = corpus.frame
    days = window.pre_days if pre_ban_only else window.days
    in_span = frame["day"].isin(set(days))
    counts = frame.loc[in_span].groupby("user_id").size()
    return (counts / len(days)).astype(float)


def flag_bots(
    profiles: pd.DataFrame,
    activity_by_day: pd.Series,
    act_pct: float = 0.75,
    rep_pct: float = 0.25,
) -> FrozenSet[str]:
    """
    Users strictly above the activity `act_pct` percentile and strictly below the reputation
    `rep_pct` percentile. Users with undefined reputation never qualify.
    """
    users = sorted(activity_by_day.index)
    if len(users) < 4:
        raise DegenerateError(f"bot percentiles need at least 4 users, got {len(users)}")
    side = profiles.set_index(profiles["user_id"].astype(str))
    followers = side["followers"].reindex(users).fillna(0).astype(float)
    followees = side["followees"].reindex(users).fillna(0).astype(float)
    total = followers + followees
    reputation = (followers / total).where(total > 0)

    activity = activity_by_day.reindex(users).astype(float)
    act_q = nearest_rank(activity.to_numpy(), act_pct)
    defined = reputation.dropna()
    if defined.empty:
        logger.warning("[PANEL] no user has a defined reputation; bot set is empty")
        return frozenset()
    rep_q = nearest_rank(defined.to_numpy(), rep_pct)
    bots = (activity > act_q) & (reputation < rep_q)
    return frozenset(bots[bots].index)


def build_cohort_flags(
    corpus: CorpusStore,
    scores: pd.DataFrame,
    window: StudyWindow,
    banned_handles: FrozenSet[str],
    profiles: pd.DataFrame,
    supplier_threshold: float = 1.0,
    act_pct: float = 0.75,
    rep_pct: float = 0.25,
    slant_cutoff: float = 0.75,
    activity_cutoff: float = 0.75,
    top_cutoff: float = 0.995,
) -> pd.DataFrame:
    """
    One row per corpus user. Everything is measured on pre-ban documents only. Slant groups
    split interaction users on their pre-ban mean z; activity groups split suppliers on
    pre-ban activity (`top05` users are the most active part of `high`). Users outside
    the relevant cohort carry no group.
    """
    frame = corpus.frame
    users = sorted(frame["user_id"].unique())
    interaction = flag_interaction_users(corpus, banned_handles, window)
    suppliers = flag_suppliers(scores, corpus, window, supplier_threshold)
    activity = user_activity(corpus, window, pre_ban_only=True)
    bots = flag_bots(profiles, activity, act_pct, rep_pct) if len(activity) >= 4 else frozenset()

    created = dict(zip(profiles["user_id"].astype(str), profiles["account_created"]))
    late = {u for u in users if _is_date(created.get(u)) and created[u] >= window.ban_date}

    docs = _scored_documents(scores, corpus)
    pre_docs = docs[docs["day"] < window.ban_date]
    mean_z = pre_docs.groupby("user_id")["z"].mean()

    slant_group: Dict[str, str] = {}
    slant_stats = {u: float(mean_z[u]) for u in interaction if u in mean_z.index}
    if len(slant_stats) >= 2:
        split = percentile_split(slant_stats, slant_cutoff)
        slant_group = {u: ("high" if u in split.above else "moderate") for u in slant_stats}

    activity_group: Dict[str, str] = {}
    supplier_activity = {u: float(activity.get(u, 0.0)) for u in suppliers}
    if len(supplier_activity) >= 2:
        high = percentile_split(supplier_activity, activity_cutoff).above
        top = percentile_split(supplier_activity, top_cutoff).above
        for u in supplier_activity:
            activity_group[u] = "top05" if u in top else ("high" if u in high else "moderate")

    flags = pd.DataFrame({
        "user_id": users,
        "is_interaction": [u in interaction for u in users],
        "is_supplier": [u in suppliers for u in users],
        "is_bot": [u in bots for u in users],
        "created_after_ban": [u in late for u in users],
        "slant_group": [slant_group.get(u) for u in users],
        "activity_group": [activity_group.get(u) for u in users],
    })
    logger.info(
        f"[PANEL] cohorts: interaction={len(interaction)}, suppliers={len(suppliers)}, "
        f"bots={len(bots)}, late accounts={len(late)}"
    )
    return flags[FLAG_COLUMNS]


def _is_date(value) -> bool:
    return isinstance(value, date) and not pd.isna(value)


def select_sample(panel: pd.DataFrame, flags: pd.DataFrame, sample: SampleSpec) -> pd.DataFrame:
    """Restrict the panel to the users of a named sample."""
    f = flags.set_index("user_id")
    keep = pd.Series(True, index=f.index)
    if sample.cohort == "interaction":
        keep &= f["is_interaction"].astype(bool)
    elif sample.cohort == "non-interaction":
        keep &= ~f["is_interaction"].astype(bool)
    elif sample.cohort == "suppliers":
        keep &= f["is_supplier"].astype(bool)
    elif sample.cohort == "non-suppliers":
        keep &= ~f["is_supplier"].astype(bool)
    if sample.exclude_bots:
        keep &= ~f["is_bot"].astype(bool)
    if sample.exclude_late_accounts:
        keep &= ~f["created_after_ban"].astype(bool)
    if sample.slant_group is not None:
        keep &= f["slant_group"] == sample.slant_group
    if sample.activity_group is not None:
        accepted = {"high", "top05"} if sample.activity_group == "high" else {sample.activity_group}
        keep &= f["activity_group"].isin(accepted)

    users = set(keep[keep].index)
    selected = panel[panel["user_id"].isin(users)].reset_index(drop=True)
    if selected.empty:
        raise EmptySelectionError(f"sample {sample.model_dump()} selects no panel cells")
    return selected


# ===========================
# Descriptive tables
# ===========================

def balance_table(
    panel: pd.DataFrame,
    window: StudyWindow,
    variables: Sequence[str] = ("avg_slant", "share_proR_tweets", "mean_words", "mean_mentions", "mean_hashtags"),
    group_column: str = "treated",
) -> pd.DataFrame:
    """
    Welch two-sample t-tests of pre-ban user-level means, treated versus control.
    Needs a panel with the `treated` column (see attach_treatment).
    """
    if group_column not in panel.columns:
        raise DomainError(f"panel has no {group_column!r} column; attach treatment first")
    pre = panel[panel["day"] < window.ban_date]
    rows = {}
    for var in variables:
        user_means = pre.groupby("user_id").agg(value=(var, "mean"), group=(group_column, "first")).dropna()
        treated = user_means.loc[user_means["group"] == 1, "value"].to_numpy(dtype=float)
        control = user_means.loc[user_means["group"] == 0, "value"].to_numpy(dtype=float)
        for name, values in (("treated", treated), ("control", control)):
            if values.size == 0:
                raise EmptySelectionError(f"{name} group has no pre-ban cells for {var}")
            if values.size < 2:
                raise DegenerateError(f"{name} group has a single user for {var}; variance undefined")
        result = stats.ttest_ind(treated, control, equal_var=False)
        rows[var] = {
            "mean_T": float(np.mean(treated)),
            "mean_C": float(np.mean(control)),
            "diff": float(np.mean(treated) - np.mean(control)),
            "t_stat": float(result.statistic),
            "p_value": float(result.pvalue),
            "n_T": int(treated.size),
            "n_C": int(control.size),
        }
    return pd.DataFrame.from_dict(rows, orient="index")


def supplier_share(
    scores: pd.DataFrame,
    corpus: CorpusStore,
    flags: pd.DataFrame,
    profiles: pd.DataFrame,
    window: StudyWindow,
    period: Literal["pre", "post"] = "pre",
    region: Literal["treated", "control"] = "treated",
    bots_only: bool = False,
    threshold: float = 1.0,
) -> float:
    """
    Share of users active in (period, region) with at least one document of that period
    scored above `threshold`.
    """
    docs = _scored_documents(scores, corpus)
    in_period = docs["day"] >= window.ban_date if period == "post" else docs["day"] < window.ban_date
    docs = docs[in_period & docs["day"].map(window.contains).astype(bool)]

    treated = dict(zip(profiles["user_id"].astype(str), profiles["in_treated_region"].astype(bool)))
    wanted = region == "treated"
    docs = docs[docs["user_id"].map(lambda u: treated.get(u) == wanted)]
    if bots_only:
        bots = set(flags.loc[flags["is_bot"].astype(bool), "user_id"])
        docs = docs[docs["user_id"].isin(bots)]

    active = set(docs["user_id"])
    if not active:
        raise EmptySelectionError(f"no active users in {region} region, {period}-ban period")
    supplying = set(docs.loc[docs["z"].astype(float) > threshold, "user_id"])
    return len(supplying) / len(active)


# ===========================
# Persistence
# ===========================

def write_panel(panel: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = panel.copy()
    out["day"] = out["day"].map(str)
    out.to_csv(path, index=False, float_format="%.17g", na_rep="", lineterminator="\n")
    return path


def read_panel(path: Union[str, Path]) -> pd.DataFrame:
    panel = pd.read_csv(path, dtype={"user_id": str})
    panel["day"] = pd.to_datetime(panel["day"]).dt.date
    return panel


def write_flags(flags: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flags.to_csv(path, index=False, na_rep="", lineterminator="\n")
    return path


def read_flags(path: Union[str, Path]) -> pd.DataFrame:
    flags = pd.read_csv(path, dtype={"user_id": str, "slant_group": object, "activity_group": object})
    for column in ("is_interaction", "is_supplier", "is_bot", "created_after_ban"):
        flags[column] = flags[column].astype(bool)
    flags["slant_group"] = flags["slant_group"].where(flags["slant_group"].notna(), None)
    flags["activity_group"] = flags["activity_group"].where(flags["activity_group"].notna(), None)
    return flags
