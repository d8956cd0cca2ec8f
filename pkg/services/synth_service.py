"""
Synth Service - synthetic panels and corpora with known ground truth, and the Monte-Carlo
runner used to check the estimators against it.

Two modes:
    direct-outcome  user-day panel cells drawn as user effect + day effect + treatment
                    effect + noise
    pole-anchored   a tweet corpus whose embeddings are convex mixtures of two pole anchors,
                    written in the ingestion formats and scored by the real pipeline
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, Field, model_validator
from scipy import stats
from tqdm import tqdm

from services.corpus_service import CorpusStore, ingest_tweets
from services.encoder_service import write_precomputed
from services.estimator_service import did_estimate, imputation_att, weekly_interactions
from services.panel_service import FLAG_COLUMNS, PANEL_COLUMNS, StudyWindow, percentile_split
from utils.exceptions import ConfigurationError, DegenerateError, DomainError

logger = logging.getLogger(__name__)

NEUTRAL_HANDLES = ["bbcworld", "reuters", "ap", "dw_news", "france24", "euronews", "skynews", "politico"]
VOCABULARY = [
    "news", "today", "report", "war", "peace", "border", "talks", "energy", "prices", "sanctions",
    "statement", "minister", "army", "city", "people", "europe", "update", "live", "video", "analysis",
]


class SynthConfig(BaseModel):
    mode: Literal["direct-outcome", "pole-anchored"] = "direct-outcome"
    n_users: int = Field(default=200, ge=0)
    share_treated: float = Field(default=0.5, ge=0.0, le=1.0)
    start: date = date(2022, 2, 19)
    ban_date: date = date(2022, 3, 2)
    end: date = date(2022, 3, 15)
    rate: float = Field(default=1.0, gt=0.0)
    true_effect: float = -0.05
    effect_profile: Literal["constant", "first_week"] = "constant"
    pretrend: float = 0.0
    noise_sd: float = Field(default=0.1, ge=0.0)
    heteroskedastic: bool = False
    user_effect_sd: float = Field(default=0.5, ge=0.0)
    day_effect_sd: float = Field(default=0.1, ge=0.0)
    retweet_share: float = Field(default=0.3, ge=0.0, le=1.0)
    reply_share: float = Field(default=0.1, ge=0.0, le=1.0)

    interaction_share: float = Field(default=0.3, ge=0.0, le=1.0)
    post_interaction_share: float = Field(default=0.1, ge=0.0, le=1.0)
    supplier_share: float = Field(default=0.2, ge=0.0, le=1.0)
    bot_share: float = Field(default=0.05, ge=0.0, le=0.2)
    dissenter_share: float = Field(default=0.2, ge=0.0, le=1.0)
    late_share: float = Field(default=0.05, ge=0.0, le=1.0)

    dim: int = Field(default=64, ge=2)
    anchor_cos: float = Field(default=0.2, ge=-1.0, le=1.0)
    doc_noise: float = Field(default=0.01, ge=0.0)
    slant_low: float = Field(default=0.45, ge=0.0, le=1.0)
    slant_high: float = Field(default=0.55, ge=0.0, le=1.0)
    supplier_doc_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    dissenter_doc_prob: float = Field(default=0.25, ge=0.0, le=1.0)
    pole_tweets_per_day: int = Field(default=5, ge=1)
    banned_handles: List[str] = Field(default_factory=lambda: ["rt_com", "sputnikint"])
    treated_countries: List[str] = Field(default_factory=lambda: ["AT", "FR", "DE", "IE", "IT"])
    control_countries: List[str] = Field(default_factory=lambda: ["GB", "CH"])

    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "SynthConfig":
        StudyWindow(start=self.start, ban_date=self.ban_date, end=self.end)
        if self.slant_low > self.slant_high:
            raise ValueError("slant_low must not exceed slant_high")
        if not self.banned_handles:
            raise ValueError("banned_handles must not be empty")
        return self

    @property
    def window(self) -> StudyWindow:
        return StudyWindow(start=self.start, ban_date=self.ban_date, end=self.end)

    @property
    def region_map(self) -> Dict[str, bool]:
        return {**{c: True for c in self.treated_countries}, **{c: False for c in self.control_countries}}


@dataclass
class GroundTruth:
    true_effect: float
    effect_profile: str
    treated: FrozenSet[str]
    interaction: FrozenSet[str] = frozenset()
    suppliers: FrozenSet[str] = frozenset()
    bots: FrozenSet[str] = frozenset()
    late_accounts: FrozenSet[str] = frozenset()
    dissenters: FrozenSet[str] = frozenset()
    user_slant: Dict[str, float] = field(default_factory=dict)
    activity: Dict[str, float] = field(default_factory=dict)
    expected: Optional[pd.DataFrame] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "true_effect": self.true_effect,
            "effect_profile": self.effect_profile,
            "treated": sorted(self.treated),
            "interaction": sorted(self.interaction),
            "suppliers": sorted(self.suppliers),
            "bots": sorted(self.bots),
            "late_accounts": sorted(self.late_accounts),
            "dissenters": sorted(self.dissenters),
        }

    def flags_frame(self, users: List[str], cutoff: float = 0.75, top_cutoff: float = 0.995) -> pd.DataFrame:
        """Cohort flags straight from the memberships, with groups split the way the panel stage splits them."""
        slant_stats = {u: self.user_slant[u] for u in self.interaction if u in self.user_slant}
        slant_high = percentile_split(slant_stats, cutoff).above if len(slant_stats) >= 2 else frozenset()
        supplier_stats = {u: self.activity.get(u, 0.0) for u in self.suppliers}
        act_high, act_top = frozenset(), frozenset()
        if len(supplier_stats) >= 2:
            act_high = percentile_split(supplier_stats, cutoff).above
            act_top = percentile_split(supplier_stats, top_cutoff).above

        def activity_group(u: str) -> Optional[str]:
            if u not in supplier_stats:
                return None
            return "top05" if u in act_top else ("high" if u in act_high else "moderate")

        frame = pd.DataFrame({
            "user_id": users,
            "is_interaction": [u in self.interaction for u in users],
            "is_supplier": [u in self.suppliers for u in users],
            "is_bot": [u in self.bots for u in users],
            "created_after_ban": [u in self.late_accounts for u in users],
            "slant_group": [(("high" if u in slant_high else "moderate") if u in slant_stats else None) for u in users],
            "activity_group": [activity_group(u) for u in users],
        })
        return frame[FLAG_COLUMNS]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive_seed(master_seed: int, index: int) -> int:
    """Per-task seed from (master seed, task index); independent of scheduling."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _user_ids(n: int) -> List[str]:
    width = max(4, len(str(n)))
    return [f"u{i:0{width}d}" for i in range(1, n + 1)]


def _assign_treatment(n: int, share: float, rng: np.random.Generator) -> NDArray[np.bool_]:
    treated = np.zeros(n, dtype=bool)
    treated[rng.permutation(n)[: int(round(share * n))]] = True
    return treated


def _effect_by_day(cfg: SynthConfig, days: List[date]) -> NDArray[np.float64]:
    week1_end = cfg.ban_date + timedelta(days=6)
    effect = np.zeros(len(days))
    for t, d in enumerate(days):
        if d >= cfg.ban_date and (cfg.effect_profile == "constant" or d <= week1_end):
            effect[t] = cfg.true_effect
    return effect


# ===========================
# Direct-outcome panels
# ===========================

def generate_panel(cfg: SynthConfig, seed: Optional[int] = None) -> Tuple[pd.DataFrame, GroundTruth]:
    """
    Panel of active user-days: outcome = user effect + day effect + effect x treated x post
    + pre-trend x treated x (day - reference day) + noise. Cell activity is Poisson(rate x
    user activity multiplier); cells with no document are absent.
    """
    if cfg.n_users < 1:
        raise DegenerateError("synthetic panel needs at least one user")
    seed = cfg.seed if seed is None else seed
    rng = _rng(seed)
    window = cfg.window
    days = window.days
    n, T = cfg.n_users, len(days)
    users = _user_ids(n)
    reference = days.index(cfg.ban_date) - 1

    treated = _assign_treatment(n, cfg.share_treated, rng)
    alpha = rng.normal(0.0, cfg.user_effect_sd, n)
    gamma = rng.normal(0.0, cfg.day_effect_sd, T)
    multiplier = rng.uniform(0.5, 1.5, n)
    user_sd = cfg.noise_sd * (rng.uniform(0.25, 1.75, n) if cfg.heteroskedastic else np.ones(n))

    effect = _effect_by_day(cfg, days)
    trend = cfg.pretrend * (np.arange(T) - reference)
    expected = alpha[:, None] + gamma[None, :] + treated[:, None] * (effect + trend)[None, :]

    counts = rng.poisson(cfg.rate * multiplier[:, None], size=(n, T))
    noise = rng.normal(0.0, 1.0, size=(n, T)) * user_sd[:, None]
    outcome = expected + noise
    n_retweets = rng.binomial(counts, cfg.retweet_share)
    n_tweets = counts - n_retweets
    p_pro = stats.norm.cdf(expected - 1.0)
    pro_tweets = rng.binomial(n_tweets, p_pro)
    pro_retweets = rng.binomial(n_retweets, p_pro)
    words = np.clip(rng.normal(12.0, 3.0, size=(n, T)), 1.0, None)
    mentions = rng.uniform(0.0, 1.5, size=(n, T))
    hashtags = rng.uniform(0.0, 1.0, size=(n, T))

    interaction = rng.random(n) < cfg.interaction_share
    suppliers = rng.random(n) < cfg.supplier_share
    bots = rng.random(n) < cfg.bot_share

    rows_i, rows_t = np.nonzero(counts > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        share_tweets = np.where(n_tweets > 0, pro_tweets / np.maximum(n_tweets, 1), np.nan)
        share_retweets = np.where(n_retweets > 0, pro_retweets / np.maximum(n_retweets, 1), np.nan)
    panel = pd.DataFrame({
        "user_id": [users[i] for i in rows_i],
        "day": [days[t] for t in rows_t],
        "avg_slant": outcome[rows_i, rows_t],
        "n_tweets": n_tweets[rows_i, rows_t],
        "n_retweets": n_retweets[rows_i, rows_t],
        "n_proR_tweets": pro_tweets[rows_i, rows_t],
        "n_proR_retweets": pro_retweets[rows_i, rows_t],
        "share_proR_tweets": share_tweets[rows_i, rows_t],
        "share_proR_retweets": share_retweets[rows_i, rows_t],
        "mean_words": words[rows_i, rows_t],
        "mean_mentions": mentions[rows_i, rows_t],
        "mean_hashtags": hashtags[rows_i, rows_t],
    })[PANEL_COLUMNS]
    panel["treated"] = treated[rows_i].astype(int)
    panel["post"] = (np.array([d >= cfg.ban_date for d in days])[rows_t]).astype(int)

    n_pre = days.index(cfg.ban_date)
    pre_counts = counts[:, :n_pre].sum(axis=1)
    truth = GroundTruth(
        true_effect=cfg.true_effect,
        effect_profile=cfg.effect_profile,
        treated=frozenset(u for u, t in zip(users, treated) if t),
        interaction=frozenset(u for u, f in zip(users, interaction) if f),
        suppliers=frozenset(u for u, f in zip(users, suppliers) if f),
        bots=frozenset(u for u, f in zip(users, bots) if f),
        user_slant={u: float(a) for u, a in zip(users, alpha)},
        activity={u: float(c) / n_pre for u, c in zip(users, pre_counts)},
        expected=pd.DataFrame({
            "user_id": [users[i] for i in rows_i],
            "day": [days[t] for t in rows_t],
            "expected": expected[rows_i, rows_t],
        }),
    )
    return panel, truth


# ===========================
# Pole-anchored corpora
# ===========================

@dataclass
class SyntheticCorpus:
    tweets: List[Dict[str, Any]]
    pole_r: List[Dict[str, Any]]
    pole_u: List[Dict[str, Any]]
    profiles: List[Dict[str, Any]]
    embeddings: Dict[str, NDArray[np.float64]]
    banned_handles: List[str]
    anchors: Tuple[NDArray[np.float64], NDArray[np.float64]]
    truth: GroundTruth

    def corpus(self) -> CorpusStore:
        return ingest_tweets(self.tweets)

    def pole_corpora(self) -> Tuple[CorpusStore, CorpusStore]:
        return ingest_tweets(self.pole_r), ingest_tweets(self.pole_u)

    def write(
        self,
        corpus_path: Union[str, Path],
        pole_r_path: Union[str, Path],
        pole_u_path: Union[str, Path],
        profiles_path: Union[str, Path],
        embeddings_path: Union[str, Path],
        banned_handles_path: Union[str, Path],
    ) -> List[Path]:
        """Write every input in the format its reader expects."""
        written = []
        for records, path in ((self.tweets, corpus_path), (self.pole_r, pole_r_path), (self.pole_u, pole_u_path)):
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                for record in records:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
            written.append(path)

        profiles_path = Path(profiles_path)
        profiles_path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.profiles, columns=["user_id", "followers", "followees", "account_created"]).to_csv(
            profiles_path, index=False, lineterminator="\n"
        )
        written.append(profiles_path)
        written.append(write_precomputed(self.embeddings, embeddings_path, fmt="csv"))

        banned_handles_path = Path(banned_handles_path)
        banned_handles_path.parent.mkdir(parents=True, exist_ok=True)
        banned_handles_path.write_text("".join(f"{h}\n" for h in self.banned_handles), encoding="utf-8")
        written.append(banned_handles_path)
        return written


def make_anchors(dim: int, cos: float, rng: np.random.Generator) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Two unit vectors with the given cosine."""
    if cos > 0.99:
        raise DomainError(f"pole anchors with cosine {cos} are not distinguishable (must be <= 0.99)")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    e1, e2 = basis[:, 0], basis[:, 1]
    return e1, cos * e1 + np.sqrt(1.0 - cos * cos) * e2


def _timestamp(day: date, rng: np.random.Generator) -> str:
    moment = datetime(day.year, day.month, day.day, tzinfo=timezone.utc) + timedelta(seconds=int(rng.integers(0, 86400)))
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def _text(rng: np.random.Generator, handles: List[str]) -> str:
    words = list(rng.choice(VOCABULARY, size=int(rng.integers(4, 12))))
    if rng.random() < 0.3:
        words.append("@" + str(rng.choice(handles)))
    if rng.random() < 0.2:
        words.append("#" + str(rng.choice(VOCABULARY)))
    return " ".join(words)


def _pole_records(
    label: str,
    anchor: NDArray[np.float64],
    days: List[date],
    per_day: int,
    noise: float,
    rng: np.random.Generator,
    embeddings: Dict[str, NDArray[np.float64]],
) -> List[Dict[str, Any]]:
    records = []
    for day in days:
        for _ in range(per_day):
            doc_id = f"p{label.lower()}{len(records) + 1:06d}"
            embeddings[doc_id] = anchor + rng.normal(0.0, noise, anchor.size)
            records.append({
                "id": doc_id,
                "user_id": f"gov_{label.lower()}",
                "timestamp": _timestamp(day, rng),
                "text": _text(rng, NEUTRAL_HANDLES),
                "lang": "en",
                "country": "RU" if label == "R" else "UA",
                "is_retweet": False,
            })
    return records


def generate_corpus(cfg: SynthConfig, seed: Optional[int] = None) -> SyntheticCorpus:
    """
    Tweet corpus plus R/U pole corpora around two anchors. A document's embedding is
    w * R + (1 - w) * U + noise, with w the user's slant (shifted by the effect for treated
    users after the ban), 1 for supplier documents and 0 for dissenter documents.

    Cohorts are injected so that the panel stage recovers them exactly: every interaction
    user retweets a banned handle before the ban, suppliers post at least one pre-ban
    document at the R anchor, bots combine triple activity with bottom-tail reputation,
    and late accounts start posting on their creation day after the ban. Pre-ban document
    counts are fixed by each user's activity multiplier.
    """
    if cfg.mode != "pole-anchored":
        raise ConfigurationError("generate_corpus needs synth mode 'pole-anchored'")
    if cfg.n_users < 1:
        raise DegenerateError("synthetic corpus needs at least one user")
    seed = cfg.seed if seed is None else seed
    rng = _rng(seed)
    window = cfg.window
    days, pre_days, post_days = window.days, window.pre_days, window.post_days
    n = cfg.n_users
    users = _user_ids(n)
    banned = [h.lstrip("@") for h in cfg.banned_handles]
    a_r, a_u = make_anchors(cfg.dim, cfg.anchor_cos, rng)

    treated = _assign_treatment(n, cfg.share_treated, rng)
    late = rng.random(n) < cfg.late_share
    eligible = ~late
    interaction = eligible & (rng.random(n) < cfg.interaction_share)
    post_interaction = eligible & ~interaction & (rng.random(n) < cfg.post_interaction_share)
    suppliers = eligible & (rng.random(n) < cfg.supplier_share)
    bots = eligible & (rng.random(n) < cfg.bot_share)
    dissenters = rng.random(n) < cfg.dissenter_share
    slant = rng.uniform(cfg.slant_low, cfg.slant_high, n)
    multiplier = rng.uniform(0.5, 1.5, n)
    multiplier[bots] = 3.0 * rng.uniform(1.0, 1.5, int(bots.sum()))
    reputation = 0.3 + 0.6 * (np.clip(multiplier, 0.5, 1.5) - 0.5)
    reputation[bots] = rng.uniform(0.01, 0.05, int(bots.sum()))
    effect = dict(zip(days, _effect_by_day(cfg, days)))

    embeddings: Dict[str, NDArray[np.float64]] = {}
    tweets: List[Dict[str, Any]] = []
    profiles: List[Dict[str, Any]] = []
    created: Dict[str, date] = {}
    activity: Dict[str, float] = {}

    for i, user in enumerate(users):
        country = str(rng.choice(cfg.treated_countries if treated[i] else cfg.control_countries))
        if late[i]:
            created[user] = post_days[int(rng.integers(0, len(post_days)))]
            schedule = []
        else:
            created[user] = date(2015, 1, 1) + timedelta(days=int(rng.integers(0, 2500)))
            n_pre = max(1, int(round(multiplier[i] * cfg.rate * len(pre_days))))
            schedule = sorted(pre_days[k] for k in rng.integers(0, len(pre_days), size=n_pre))
            activity[user] = n_pre / len(pre_days)
        for day in post_days:
            if day >= created[user] or not late[i]:
                schedule.extend([day] * int(rng.poisson(multiplier[i] * cfg.rate)))

        weights = []
        for day in schedule:
            if suppliers[i] and rng.random() < cfg.supplier_doc_prob:
                w = 1.0
            elif dissenters[i] and rng.random() < cfg.dissenter_doc_prob:
                w = 0.0
            else:
                w = float(slant[i])
            if treated[i]:
                w += effect[day]
            weights.append(w)
        pre_rows = [k for k, day in enumerate(schedule) if day < cfg.ban_date]
        post_rows = [k for k, day in enumerate(schedule) if day >= cfg.ban_date]
        if suppliers[i] and not any(weights[k] == 1.0 for k in pre_rows):
            weights[pre_rows[0]] = 1.0

        banned_rows = set()
        if interaction[i]:
            banned_rows.add(pre_rows[int(rng.integers(0, len(pre_rows)))])
        if post_interaction[i] and post_rows:
            banned_rows.add(post_rows[int(rng.integers(0, len(post_rows)))])

        for k, day in enumerate(schedule):
            doc_id = f"t{len(tweets) + 1:07d}"
            embeddings[doc_id] = weights[k] * a_r + (1.0 - weights[k]) * a_u + rng.normal(0.0, cfg.doc_noise, cfg.dim)
            record = {
                "id": doc_id,
                "user_id": user,
                "timestamp": _timestamp(day, rng),
                "text": _text(rng, NEUTRAL_HANDLES),
                "lang": "en",
                "country": country,
                "is_retweet": False,
            }
            if k in banned_rows:
                record["is_retweet"] = True
                record["retweeted_handle"] = str(rng.choice(banned))
            elif rng.random() < cfg.retweet_share:
                record["is_retweet"] = True
                record["retweeted_handle"] = str(rng.choice(NEUTRAL_HANDLES))
            elif rng.random() < cfg.reply_share:
                record["replied_handle"] = users[int(rng.integers(0, n))]
            tweets.append(record)

        total = int(rng.integers(200, 5000))
        followers = int(round(reputation[i] * total))
        profiles.append({
            "user_id": user,
            "followers": followers,
            "followees": total - followers,
            "account_created": created[user].isoformat(),
        })

    pole_days = [window.start - timedelta(days=7) + timedelta(days=k) for k in range((window.end - window.start).days + 8)]
    pole_r = _pole_records("R", a_r, pole_days, cfg.pole_tweets_per_day, cfg.doc_noise, rng, embeddings)
    pole_u = _pole_records("U", a_u, pole_days, cfg.pole_tweets_per_day, cfg.doc_noise, rng, embeddings)

    def members(mask: NDArray[np.bool_]) -> FrozenSet[str]:
        return frozenset(u for u, f in zip(users, mask) if f)

    truth = GroundTruth(
        true_effect=cfg.true_effect,
        effect_profile=cfg.effect_profile,
        treated=members(treated),
        interaction=members(interaction),
        suppliers=members(suppliers),
        bots=members(bots),
        late_accounts=members(late),
        dissenters=members(dissenters),
        user_slant={u: float(s) for u, s in zip(users, slant)},
        activity=activity,
    )
    logger.info(
        f"[SYNTH] corpus: {len(tweets)} tweets from {n} users, {len(pole_r)}+{len(pole_u)} pole tweets, "
        f"interaction={len(truth.interaction)}, suppliers={len(truth.suppliers)}, bots={len(truth.bots)}"
    )
    return SyntheticCorpus(tweets, pole_r, pole_u, profiles, embeddings, banned, (a_r, a_u), truth)


# ===========================
# Monte Carlo
# ===========================

class MonteCarloSpec(BaseModel):
    estimator: Literal["twfe", "week1", "imputation"] = "twfe"
    outcome: str = "avg_slant"
    n_boot: int = Field(default=99, ge=2)


@dataclass
class MonteCarloResult:
    estimator: str
    reps: int
    n_ok: int
    n_failed: int
    true_effect: float
    mean_estimate: float
    bias: float
    mc_se: float
    sd: float
    rmse: float
    coverage_95: float
    mean_runtime: float
    draws: pd.DataFrame = field(repr=False, default_factory=pd.DataFrame)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimator": self.estimator, "reps": self.reps, "n_ok": self.n_ok, "n_failed": self.n_failed,
            "true_effect": self.true_effect, "mean_estimate": self.mean_estimate, "bias": self.bias,
            "mc_se": self.mc_se, "sd": self.sd, "rmse": self.rmse, "coverage_95": self.coverage_95,
            "mean_runtime": self.mean_runtime,
        }


def _one_replication(cfg: SynthConfig, spec: MonteCarloSpec, seed: int) -> Tuple[float, float, float]:
    panel, _ = generate_panel(cfg, seed)
    if spec.estimator == "imputation":
        result = imputation_att(panel, spec.outcome, n_boot=spec.n_boot, seed=seed)
        lo, hi = result.ci(0.95)
        return result.att, lo, hi
    if spec.estimator == "week1":
        fit = weekly_interactions(panel, spec.outcome, cfg.window)
        term = "eu_x_week1"
    else:
        fit = did_estimate(panel, spec.outcome)
        term = "eu_x_ban"
    lo, hi = fit.ci(0.95)[term]
    return fit.coefficients[term], lo, hi


def monte_carlo(
    cfg: SynthConfig,
    spec: MonteCarloSpec,
    reps: int,
    master_seed: int = 0,
    threads: int = 1,
    progress: bool = True,
) -> MonteCarloResult:
    """
    Repeat generate-then-estimate `reps` times with seeds derived from the master seed.
    Failing replications are recorded and excluded from the aggregates.
    """
    if cfg.mode != "direct-outcome":
        raise ConfigurationError("monte_carlo runs on direct-outcome panels")
    if reps < 50:
        raise ConfigurationError(f"monte_carlo needs at least 50 replications, got {reps}")

    def run(rep: int) -> Dict[str, Any]:
        seed = derive_seed(master_seed, rep)
        began = time.perf_counter()
        try:
            estimate, lo, hi = _one_replication(cfg, spec, seed)
            error = None
        except Exception as e:
            logger.warning(f"[MC] replication {rep} failed: {e}")
            estimate, lo, hi, error = np.nan, np.nan, np.nan, f"{type(e).__name__}: {e}"
        return {"rep": rep, "seed": seed, "estimate": estimate, "lo95": lo, "hi95": hi,
                "runtime": time.perf_counter() - began, "error": error}

    rows: List[Optional[Dict[str, Any]]] = [None] * reps
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = {pool.submit(run, rep): rep for rep in range(reps)}
        for future in tqdm(as_completed(futures), total=reps, desc=f"mc {spec.estimator}", disable=not progress):
            rows[futures[future]] = future.result()

    draws = pd.DataFrame(rows)
    ok = draws[draws["error"].isna()]
    truth = cfg.true_effect
    estimates = ok["estimate"].to_numpy(dtype=float)
    if estimates.size == 0:
        raise DegenerateError(f"all {reps} replications failed")
    sd = float(np.std(estimates, ddof=1)) if estimates.size > 1 else float("nan")
    covered = (ok["lo95"] <= truth) & (truth <= ok["hi95"])
    result = MonteCarloResult(
        estimator=spec.estimator,
        reps=reps,
        n_ok=int(estimates.size),
        n_failed=int(reps - estimates.size),
        true_effect=truth,
        mean_estimate=float(np.mean(estimates)),
        bias=float(np.mean(estimates) - truth),
        mc_se=sd / np.sqrt(estimates.size),
        sd=sd,
        rmse=float(np.sqrt(np.mean((estimates - truth) ** 2))),
        coverage_95=float(covered.mean()),
        mean_runtime=float(draws["runtime"].mean()),
        draws=draws,
    )
    logger.info(
        f"[MC] {spec.estimator}: reps={reps}, failed={result.n_failed}, bias={result.bias:.5f}, "
        f"mc_se={result.mc_se:.5f}, coverage95={result.coverage_95:.3f}"
    )
    return result
