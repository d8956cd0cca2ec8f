"""
Centralized configuration module for the slant study toolkit.
Loads environment variables from .env (development) or .env.production (production), and
validates the study configuration file.
"""

import hashlib
import json
import logging
import os
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from services.encoder_service import BackendConfig
from services.panel_service import OUTCOMES, SampleSpec, StudyWindow
from services.slant_service import PoleConfig
from services.synth_service import SynthConfig
from utils.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"

# Determine environment: check ENVIRONMENT variable or default to development
ENVIRONMENT = os.getenv("ENVIRONMENT", "development").lower()

# Get the directory where this config.py file is located
CONFIG_DIR = Path(__file__).parent

# Load environment-specific .env file
if ENVIRONMENT == "production":
    env_file = CONFIG_DIR / ".env.production"
    if not env_file.exists():
        # Fallback to .env if .env.production doesn't exist
        env_file = CONFIG_DIR / ".env"
else:
    env_file = CONFIG_DIR / ".env"

if env_file.exists():
    load_dotenv(env_file, override=True)
    logger.debug(f"[CONFIG] Loaded environment from: {env_file.name} (ENVIRONMENT={ENVIRONMENT})")
else:
    load_dotenv()

DEFAULT_CONFIG_PATH = CONFIG_DIR / "configs" / "study_config.json"

# environment variable -> paths field it overrides
PATH_OVERRIDES = {
    "SLANT_CORPUS_PATH": "corpus",
    "SLANT_PROFILES_PATH": "profiles",
    "SLANT_POLE_R_PATH": "pole_r",
    "SLANT_POLE_U_PATH": "pole_u",
    "SLANT_EMBEDDINGS_PATH": "embeddings",
    "SLANT_BANNED_HANDLES_PATH": "banned_handles",
    "SLANT_OUTPUT_DIR": "output_dir",
}


class PathsConfig(BaseModel):
    corpus: str = "data/corpus.jsonl"
    profiles: Optional[str] = "data/profiles.csv"
    pole_r: str = "data/pole_r.jsonl"
    pole_u: str = "data/pole_u.jsonl"
    embeddings: Optional[str] = "data/embeddings.csv"
    banned_handles: str = "data/banned_handles.txt"
    output_dir: str = "output"


class RegionsConfig(BaseModel):
    treated: List[str] = Field(default_factory=lambda: ["AT", "FR", "DE", "IE", "IT"])
    control: List[str] = Field(default_factory=lambda: ["GB", "CH"])

    @model_validator(mode="after")
    def _disjoint(self) -> "RegionsConfig":
        overlap = {c.upper() for c in self.treated} & {c.upper() for c in self.control}
        if overlap:
            raise ValueError(f"countries in both regions: {', '.join(sorted(overlap))}")
        return self

    @property
    def region_map(self) -> Dict[str, bool]:
        return {**{c.upper(): True for c in self.treated}, **{c.upper(): False for c in self.control}}


class FiltersConfig(BaseModel):
    langs: Optional[List[str]] = None
    query: Optional[str] = None
    restrict_to_regions: bool = True
    drop_late_accounts: bool = False
    stems: List[str] = Field(default_factory=lambda: ["nazi", "invas", "aggress", "donbass", "genocid"])


class ThresholdsConfig(BaseModel):
    pro: float = 1.0
    supplier: float = 1.0
    bot_activity_pct: float = Field(default=0.75, gt=0.0, lt=1.0)
    bot_reputation_pct: float = Field(default=0.25, gt=0.0, lt=1.0)
    slant_cutoff: float = Field(default=0.75, gt=0.0, lt=1.0)
    activity_cutoff: float = Field(default=0.75, gt=0.0, lt=1.0)
    top_cutoff: float = Field(default=0.995, gt=0.0, lt=1.0)


class ImputationConfig(BaseModel):
    enabled: bool = True
    samples: List[str] = Field(default_factory=lambda: ["all"])
    outcomes: List[str] = Field(default_factory=lambda: ["avg_slant"])
    n_boot: int = Field(default=499, ge=2)


class EventStudyConfig(BaseModel):
    samples: List[str] = Field(default_factory=lambda: ["all"])
    outcomes: List[str] = Field(default_factory=lambda: ["avg_slant"])
    reference_day: Optional[date] = None
    bins: Optional[List[Tuple[date, date]]] = None


class EstimationConfig(BaseModel):
    outcomes: List[str] = Field(default_factory=lambda: list(OUTCOMES))
    samples: Dict[str, SampleSpec] = Field(default_factory=lambda: {"all": SampleSpec()})
    controls: bool = False
    dof: Literal["absorb-adjusted", "slopes-only"] = "absorb-adjusted"
    pre_mean: Literal["pooled", "treated"] = "pooled"
    weekly: bool = True
    imputation: ImputationConfig = Field(default_factory=ImputationConfig)
    event_study: EventStudyConfig = Field(default_factory=EventStudyConfig)

    @field_validator("outcomes")
    @classmethod
    def _known_outcomes(cls, outcomes: List[str]) -> List[str]:
        unknown = [o for o in outcomes if o not in OUTCOMES]
        if unknown:
            raise ValueError(f"unknown outcome(s): {', '.join(unknown)}")
        return outcomes


class MonteCarloConfig(BaseModel):
    estimators: List[Literal["twfe", "week1", "imputation"]] = Field(default_factory=lambda: ["twfe"])
    reps: int = 200
    outcome: str = "avg_slant"
    n_boot: int = Field(default=99, ge=2)


class StudyConfig(BaseModel):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    schema_map: Dict[str, str] = Field(default_factory=dict, alias="schema")
    window: StudyWindow = Field(default_factory=lambda: StudyWindow(start=date(2022, 2, 19), ban_date=date(2022, 3, 2), end=date(2022, 3, 15)))
    regions: RegionsConfig = Field(default_factory=RegionsConfig)
    filters: FiltersConfig = Field(default_factory=FiltersConfig)
    encoder: BackendConfig = Field(default_factory=BackendConfig)
    poles: PoleConfig = Field(default_factory=PoleConfig)
    thresholds: ThresholdsConfig = Field(default_factory=ThresholdsConfig)
    estimation: EstimationConfig = Field(default_factory=EstimationConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    mc: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    seed: int = Field(default=0, ge=0)

    model_config = {"populate_by_name": True}

    @model_validator(mode="after")
    def _reference_day_in_window(self) -> "StudyConfig":
        ref = self.estimation.event_study.reference_day
        if ref is not None and not self.window.contains(ref):
            raise ValueError(f"event-study reference day {ref} lies outside the study window")
        return self

    @property
    def reference_day(self) -> date:
        return self.estimation.event_study.reference_day or (self.window.ban_date - timedelta(days=1))

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)


def config_hash(cfg: BaseModel) -> str:
    """SHA-256 of the canonical (sorted-key) JSON dump."""
    canonical = json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _line_of(text: str, loc: Sequence[Any]) -> int:
    """1-based line of the innermost key of a validation error location, found by walking the nested keys."""
    lines = text.splitlines()
    position, found = 0, 1
    for key in loc:
        if not isinstance(key, str):
            continue
        needle = json.dumps(key)
        for offset, line in enumerate(lines[position:]):
            if line.lstrip().startswith(needle):
                position = position + offset
                found = position + 1
                break
    return found


def _apply_env_overrides(raw: Dict[str, Any], environ: Mapping[str, str]) -> Dict[str, Any]:
    paths = dict(raw.get("paths") or {})
    for variable, field_name in PATH_OVERRIDES.items():
        value = environ.get(variable)
        if value:
            paths[field_name] = value
    if paths:
        raw = {**raw, "paths": paths}
    return raw


def load_study_config(
    path: Optional[os.PathLike] = None,
    environ: Optional[Mapping[str, str]] = None,
    seed: Optional[int] = None,
) -> StudyConfig:
    """
    Read, override and validate the study configuration. Syntax and validation problems
    raise ConfigurationError carrying the 1-based line of the offending key.
    """
    path = Path(path or DEFAULT_CONFIG_PATH)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON in {path.name}: {e.msg}", line=e.lineno)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path.name} must hold a JSON object", line=1)

    raw = _apply_env_overrides(raw, os.environ if environ is None else environ)
    if seed is not None:
        raw["seed"] = seed
    try:
        cfg = StudyConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigurationError(f"{where}: {first['msg']}", line=_line_of(text, first["loc"]))
    return cfg
