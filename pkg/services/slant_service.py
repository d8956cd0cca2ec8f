"""
Slant Service - reference poles, the pole-ratio score, standardization and pro-slant flags.

A document d is scored against the two poles of its day as

    raw = (sim(d, R) + b) / (sim(d, U) + b) - 1

so raw > 0 means closer to the R pole and raw = 0 means equidistant. Raw scores are
standardized once over the whole scored corpus and the statistics are frozen.
"""
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, Field

from services.corpus_service import CorpusStore
from services.encoder_service import EmbeddingVector, EncoderBackend, cosine_similarity, cosine_to_reference
from utils.exceptions import DegenerateError, DomainError, EmptySelectionError, IntegrityError

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["tweet_id", "raw", "z", "flag_1sd", "flag_0"]

DateRange = Tuple[date, date]


class PoleConfig(BaseModel):
    mode: Literal["static", "static-preban", "rolling"] = "rolling"
    window: int = Field(default=8, ge=1)
    decay: float = Field(default=0.5, gt=0.0, le=1.0)
    b: float = Field(default=1.0, gt=0.0)
    weighting: Literal["day-mean", "per-tweet"] = "day-mean"

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class StandardizationStats(BaseModel):
    """Raw-score mean and sd, frozen for the pole config and the exact inputs they were computed on."""

    mean: float
    sd: float = Field(gt=0.0)
    n: int = Field(ge=2)
    pole_config_hash: str = ""
    inputs_hash: str = ""

    def matches(self, pole_config_hash: str, inputs_hash: str) -> bool:
        return self.pole_config_hash == pole_config_hash and self.inputs_hash == inputs_hash


@dataclass(frozen=True)
class PoleCorpus:
    label: str
    days: Tuple[date, ...]
    vectors: NDArray[np.float64]

    def __post_init__(self):
        if len(self.days) != len(self.vectors):
            raise IntegrityError(f"pole corpus {self.label}: {len(self.days)} days for {len(self.vectors)} vectors")


@dataclass(frozen=True)
class Pole:
    label: str
    day: Optional[date]
    vector: EmbeddingVector


@dataclass(frozen=True)
class PolePair:
    r: Pole
    u: Pole


PoleSet = Union[PolePair, Mapping[date, PolePair]]


def build_pole_corpus(label: str, store: CorpusStore, backend: EncoderBackend) -> PoleCorpus:
    """Embed every document of a reference (government) corpus."""
    frame = store.frame
    vectors = np.vstack([
        backend.encode_document(doc_id, text) for doc_id, text in zip(frame["id"], frame["text"])
    ]) if len(frame) else np.zeros((0, backend.dim))
    return PoleCorpus(label, tuple(frame["day"]), vectors)


def _nonzero_pole(label: str, day: Optional[date], vector: EmbeddingVector) -> Pole:
    norm = np.linalg.norm(vector)
    if not np.isfinite(norm) or norm == 0.0:
        where = "static" if day is None else str(day)
        raise DegenerateError(f"pole {label} has a zero vector for day {where}")
    return Pole(label, day, vector)


def build_static_pole(pc: PoleCorpus, restrict: Optional[DateRange] = None) -> Pole:
    """Unweighted mean of the member vectors, optionally restricted to an inclusive day range."""
    days = np.array(pc.days, dtype=object)
    mask = np.ones(len(days), dtype=bool)
    if restrict is not None:
        lo, hi = restrict
        mask = np.array([lo <= d <= hi for d in days], dtype=bool)
    if not mask.any():
        raise EmptySelectionError(f"pole corpus {pc.label} has no tweets in range {restrict}")
    vector = np.mean(pc.vectors[mask], axis=0)
    return _nonzero_pole(pc.label, None, vector)


def decay_weights(window: int = 8, decay: float = 0.5) -> NDArray[np.float64]:
    """Weights for days t-(window-1) .. t, oldest first: decay ** ((t - k) / (window - 1))."""
    if window == 1:
        return np.ones(1)
    lags = np.arange(window - 1, -1, -1, dtype=np.float64)
    return decay ** (lags / (window - 1))


def _day_groups(pc: PoleCorpus) -> Dict[date, NDArray[np.float64]]:
    groups: Dict[date, List[int]] = {}
    for index, day in enumerate(pc.days):
        groups.setdefault(day, []).append(index)
    return {day: pc.vectors[rows] for day, rows in groups.items()}


def build_rolling_poles(
    pc: PoleCorpus,
    days: Iterable[date],
    window: int = 8,
    decay: float = 0.5,
    weighting: str = "day-mean",
) -> Dict[date, Pole]:
    """
    Pole for each day t from pole tweets in [t - (window-1), t]. With day-mean weighting each
    populated day contributes its mean vector with its decay weight; with per-tweet weighting
    each tweet carries its day's weight. Weights are renormalized over what is populated.
    """
    weights = decay_weights(window, decay)
    by_day = _day_groups(pc)
    poles: Dict[date, Pole] = {}
    empty: List[date] = []

    for t in days:
        members = []
        member_weights = []
        for offset in range(window):
            k = t - timedelta(days=window - 1 - offset)
            block = by_day.get(k)
            if block is None:
                continue
            if weighting == "per-tweet":
                members.append(block)
                member_weights.append(np.full(len(block), weights[offset]))
            else:
                members.append(np.mean(block, axis=0)[None, :])
                member_weights.append(np.array([weights[offset]]))
        if not members:
            empty.append(t)
            continue
        stacked = np.vstack(members)
        w = np.concatenate(member_weights)
        w = w / np.sum(w)
        poles[t] = _nonzero_pole(pc.label, t, np.sum(stacked * w[:, None], axis=0))

    if empty:
        listed = ", ".join(str(d) for d in empty)
        raise EmptySelectionError(f"pole corpus {pc.label} has an empty window for day(s): {listed}")
    return poles


def build_poles(
    config: PoleConfig,
    r_corpus: PoleCorpus,
    u_corpus: PoleCorpus,
    days: Sequence[date],
    ban_date: Optional[date] = None,
) -> PoleSet:
    """Pole pair (static modes) or per-day pole pairs (rolling) for the scoring days."""
    if config.mode == "rolling":
        r = build_rolling_poles(r_corpus, days, config.window, config.decay, config.weighting)
        u = build_rolling_poles(u_corpus, days, config.window, config.decay, config.weighting)
        return {day: PolePair(r[day], u[day]) for day in days}
    restrict = None
    if config.mode == "static-preban":
        if ban_date is None:
            raise DomainError("static-preban poles need a ban date")
        restrict = (date.min, ban_date - timedelta(days=1))
    return PolePair(build_static_pole(r_corpus, restrict), build_static_pole(u_corpus, restrict))


def pole_ratio(d: EmbeddingVector, R: Pole, U: Pole, b: float = 1.0) -> float:
    """(sim(d,R) + b) / (sim(d,U) + b) - 1."""
    if b <= 0:
        raise DomainError("smoothing b must be positive")
    sim_r = cosine_similarity(d, R.vector)
    sim_u = cosine_similarity(d, U.vector)
    return ratio_from_sims(sim_r, sim_u, b)


def ratio_from_sims(sim_r, sim_u, b: float = 1.0):
    """Vectorized pole ratio on precomputed similarities."""
    sim_r = np.asarray(sim_r, dtype=np.float64)
    sim_u = np.asarray(sim_u, dtype=np.float64)
    denominator = sim_u + b
    if np.any(denominator <= 0):
        raise DomainError("pole ratio denominator is not positive (sim to U pole is -b)")
    value = (sim_r + b) / denominator - 1.0
    return float(value) if value.ndim == 0 else value


def classify(z: float, threshold: float = 1.0) -> int:
    """1 iff z is strictly above the threshold."""
    if not np.isfinite(z):
        raise DomainError(f"cannot classify non-finite z {z}")
    return int(z > threshold)


def standardize(
    raw: Sequence[float],
    pole_config_hash: str = "",
    inputs_hash: str = "",
) -> Tuple[NDArray[np.float64], StandardizationStats]:
    """z-scores with the sample sd; constant scores have no scale."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size < 2:
        raise DegenerateError("standardization needs at least two scores")
    mean = float(np.mean(raw))
    sd = float(np.std(raw, ddof=1))
    if not sd > 0:
        raise DegenerateError("raw scores are constant (sd = 0); poles cannot separate these documents")
    stats = StandardizationStats(
        mean=mean, sd=sd, n=int(raw.size), pole_config_hash=pole_config_hash, inputs_hash=inputs_hash,
    )
    return apply_standardization(raw, stats), stats


def apply_standardization(raw: Sequence[float], stats: StandardizationStats) -> NDArray[np.float64]:
    return (np.asarray(raw, dtype=np.float64) - stats.mean) / stats.sd


def _pair_for(poles: PoleSet, day: date) -> PolePair:
    if isinstance(poles, PolePair):
        return poles
    return poles[day]


def score_corpus(
    c: CorpusStore,
    backend: EncoderBackend,
    poles: PoleSet,
    b: float = 1.0,
    stats: Optional[StandardizationStats] = None,
    pole_config_hash: str = "",
    threads: int = 1,
    inputs_hash: str = "",
) -> Tuple[pd.DataFrame, StandardizationStats]:
    """
    Raw pole ratio per document against its day's poles, then z-scores and flags.
    Frozen `stats` are reused verbatim when given; otherwise they are computed here.
    """
    frame = c.frame
    if not isinstance(poles, PolePair):
        missing = sorted(set(frame["day"]) - set(poles))
        if missing:
            raise IntegrityError(f"no poles for day(s): {', '.join(str(d) for d in missing)}")

    def embed(chunk: pd.DataFrame) -> NDArray[np.float64]:
        return np.vstack([backend.encode_document(i, t) for i, t in zip(chunk["id"], chunk["text"])])

    if len(frame) == 0:
        raise DegenerateError("cannot score an empty corpus")
    chunks = np.array_split(np.arange(len(frame)), max(1, min(threads * 4, len(frame))))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        blocks = list(pool.map(lambda rows: embed(frame.iloc[rows]), chunks))
    vectors = np.vstack(blocks)

    raw = np.empty(len(frame), dtype=np.float64)
    days = frame["day"].to_numpy()
    for day in sorted(set(days)):
        rows = np.flatnonzero(days == day)
        pair = _pair_for(poles, day)
        sim_r = cosine_to_reference(vectors[rows], pair.r.vector)
        sim_u = cosine_to_reference(vectors[rows], pair.u.vector)
        raw[rows] = ratio_from_sims(sim_r, sim_u, b)

    if stats is None:
        z, stats = standardize(raw, pole_config_hash, inputs_hash)
    else:
        z = apply_standardization(raw, stats)

    scores = pd.DataFrame({
        "tweet_id": frame["id"].to_numpy(),
        "raw": raw,
        "z": z,
        "flag_1sd": (z > 1.0).astype(int),
        "flag_0": (z > 0.0).astype(int),
    })
    logger.info(f"[SLANT] scored {len(scores)} documents; raw mean={stats.mean:.6f}, sd={stats.sd:.6f}")
    return scores, stats


# ===========================
# Persistence
# ===========================

def write_scores(scores: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scores[SCORE_COLUMNS].to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_scores(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"tweet_id": str})


def write_stats(stats: StandardizationStats, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_stats(path: Union[str, Path]) -> StandardizationStats:
    return StandardizationStats.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_poles(poles: PoleSet, path: Union[str, Path]) -> Path:
    """One row per (day, side) with the pole vector; static poles carry an empty day."""
    pairs = [(None, poles)] if isinstance(poles, PolePair) else sorted(poles.items())
    rows = []
    for day, pair in pairs:
        for side, pole in (("R", pair.r), ("U", pair.u)):
            rows.append([("" if day is None else str(day)), side] + [float(v) for v in pole.vector])
    dim = len(rows[0]) - 2 if rows else 0
    frame = pd.DataFrame(rows, columns=["day", "side"] + [f"v{j}" for j in range(dim)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path
