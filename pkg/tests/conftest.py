"""Shared fixtures: tiny tweet records, study windows and dense OLS oracles."""
import json
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import pytest

from services.panel_service import StudyWindow
from services.synth_service import SynthConfig, generate_panel

BAN = date(2022, 3, 2)


def make_tweet(
    tweet_id: str,
    user_id: str,
    day: date,
    text: str = "news today from the border",
    country: str = "DE",
    retweet_of: Optional[str] = None,
    reply_to: Optional[str] = None,
    hour: int = 12,
    **extra: Any,
) -> Dict[str, Any]:
    record = {
        "id": tweet_id,
        "user_id": user_id,
        "timestamp": f"{day.isoformat()}T{hour:02d}:00:00Z",
        "text": text,
        "lang": "en",
        "country": country,
        "is_retweet": retweet_of is not None,
    }
    if retweet_of is not None:
        record["retweeted_handle"] = retweet_of
    if reply_to is not None:
        record["replied_handle"] = reply_to
    record.update(extra)
    return record


def write_jsonl(records: List[Dict[str, Any]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


def dummy_ols(panel: pd.DataFrame, outcome: str, regressors: List[str]) -> np.ndarray:
    """Slopes from OLS with explicit user and day dummies (first day dropped)."""
    users = pd.get_dummies(panel["user_id"], dtype=float)
    days = pd.get_dummies(panel["day"].astype(str), dtype=float).iloc[:, 1:]
    X = np.column_stack([panel[regressors].to_numpy(dtype=float), users.to_numpy(), days.to_numpy()])
    beta, *_ = np.linalg.lstsq(X, panel[outcome].to_numpy(dtype=float), rcond=None)
    return beta[: len(regressors)]


@pytest.fixture
def window() -> StudyWindow:
    return StudyWindow(start=date(2022, 2, 19), ban_date=BAN, end=date(2022, 3, 15))


@pytest.fixture
def short_window() -> StudyWindow:
    return StudyWindow(start=date(2022, 2, 26), ban_date=BAN, end=date(2022, 3, 5))


@pytest.fixture
def synth_panel():
    """40-user direct-outcome panel with treatment columns attached."""
    cfg = SynthConfig(n_users=40, noise_sd=0.2, true_effect=-0.05, rate=2.0, seed=11)
    panel, truth = generate_panel(cfg)
    return panel, truth, cfg


@pytest.fixture
def days_between():
    def build(start: date, end: date) -> List[date]:
        return [start + timedelta(days=k) for k in range((end - start).days + 1)]
    return build


def direct_config(output_dir: Path, **overrides: Any) -> Dict[str, Any]:
    """Small direct-outcome study: synth panel of 40 users, two outcomes, two samples."""
    raw: Dict[str, Any] = {
        "paths": {"output_dir": str(output_dir)},
        "window": {"start": "2022-02-19", "ban_date": "2022-03-02", "end": "2022-03-15"},
        "estimation": {
            "outcomes": ["avg_slant", "n_proR_tweets"],
            "samples": {"all": {}, "interaction": {"cohort": "interaction"}},
            "imputation": {"samples": ["all"], "outcomes": ["avg_slant"], "n_boot": 19},
            "event_study": {
                "samples": ["all"],
                "outcomes": ["avg_slant"],
                "bins": [["2022-02-19", "2022-02-28"], ["2022-03-02", "2022-03-08"], ["2022-03-09", "2022-03-15"]],
            },
        },
        "synth": {"mode": "direct-outcome", "n_users": 40, "rate": 2.0, "noise_sd": 0.2, "interaction_share": 0.4},
        "mc": {"estimators": ["twfe"], "reps": 50},
        "seed": 7,
    }
    raw.update(overrides)
    return raw


def corpus_config(root: Path, **overrides: Any) -> Dict[str, Any]:
    """Pole-anchored study whose synth stage writes its inputs under root/data."""
    data = root / "data"
    raw: Dict[str, Any] = {
        "paths": {
            "corpus": str(data / "corpus.jsonl"),
            "profiles": str(data / "profiles.csv"),
            "pole_r": str(data / "pole_r.jsonl"),
            "pole_u": str(data / "pole_u.jsonl"),
            "embeddings": str(data / "embeddings.csv"),
            "banned_handles": str(data / "banned_handles.txt"),
            "output_dir": str(root / "out"),
        },
        "window": {"start": "2022-02-19", "ban_date": "2022-03-02", "end": "2022-03-15"},
        "filters": {"langs": ["en"]},
        "encoder": {"kind": "precomputed-file", "dim": 16},
        "estimation": {
            "outcomes": ["avg_slant", "share_proR_tweets"],
            "samples": {"all": {}, "interaction": {"cohort": "interaction"}},
            "imputation": {"enabled": False},
        },
        "synth": {"mode": "pole-anchored", "n_users": 60, "dim": 16},
        "seed": 3,
    }
    raw.update(overrides)
    return raw


@pytest.fixture
def config_file(tmp_path):
    """Factory writing a study config dict to tmp_path/study.json."""
    def write(raw: Dict[str, Any], name: str = "study.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(raw, indent=2), encoding="utf-8")
        return path
    return write
