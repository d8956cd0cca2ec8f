"""
Pipeline Service - one function per CLI subcommand.

Each stage reads its upstream artifacts from the output directory, runs the domain
services, writes its own artifacts and a manifest, and returns the paths it wrote.
Stages never call each other except `synth`, which runs `ingest` on the corpus it
generates in pole-anchored mode.
"""
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

from services.artifact_service import ArtifactStore, read_json, sha256_file, write_frame, write_json
from services.corpus_service import (
    FilterSpec,
    QuerySpec,
    derive_user_profiles,
    describe_corpus,
    filter_corpus,
    load_banned_handles,
    load_corpus,
    load_profiles,
    profiles_frame,
    stem_frequency,
    write_corpus,
    write_rejects,
)
from services.encoder_service import build_backend
from services.estimator_service import (
    FitResult,
    assemble_table,
    coefficient_frame,
    did_battery,
    event_study,
    imputation_att,
    weekly_interactions,
)
from services.panel_service import (
    CONTROLS,
    attach_treatment,
    balance_table,
    build_cohort_flags,
    build_panel,
    read_flags,
    read_panel,
    select_sample,
    supplier_share,
    write_flags,
    write_panel,
)
from services.slant_service import (
    build_pole_corpus,
    build_poles,
    read_scores,
    read_stats,
    score_corpus,
    write_poles,
    write_scores,
    write_stats,
)
from services.synth_service import (
    MonteCarloSpec,
    SynthConfig,
    generate_corpus,
    generate_panel,
    monte_carlo,
)
from utils.exceptions import ConfigurationError, DegenerateError, EmptySelectionError, SlantStudyError

logger = logging.getLogger(__name__)

CORPUS = "corpus/corpus.jsonl"
POLE_R = "corpus/pole_r.jsonl"
POLE_U = "corpus/pole_u.jsonl"
PROFILES = "corpus/profiles.csv"
SCORES = "scores/scores.csv"
STATS = "scores/stats.json"
PANEL = "panel/panel.csv"
FLAGS = "panel/flags.csv"
DID = "estimates/did.json"
WEEKLY = "estimates/weekly.json"
IMPUTATION = "estimates/imputation.json"


@dataclass
class RunContext:
    """Everything a stage needs: the validated study config and the run-level options."""

    cfg: Any
    store: ArtifactStore
    seed: int
    threads: int
    config_hash: str
    tool_version: str

    def manifest(self, subcommand: str, inputs: List[Path], outputs: List[Path], **kwargs) -> Path:
        return self.store.write_manifest(
            subcommand, self.tool_version, self.config_hash, self.seed, inputs, outputs, **kwargs
        )


def read_profiles(path: Path) -> pd.DataFrame:
    profiles = pd.read_csv(path, dtype={"user_id": str, "country": str})
    profiles["account_created"] = pd.to_datetime(profiles["account_created"]).dt.date
    profiles["account_created"] = profiles["account_created"].where(profiles["account_created"].notna(), None)
    profiles["in_treated_region"] = profiles["in_treated_region"].astype(bool)
    return profiles


def _optional_path(value: Optional[str]) -> Optional[Path]:
    if not value:
        return None
    path = Path(value)
    return path if path.exists() else None


# ===========================
# ingest
# ===========================

def run_ingest(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    paths, window, filters = cfg.paths, cfg.window, cfg.filters
    side_path = _optional_path(paths.profiles)

    corpus = load_corpus(paths.corpus, cfg.schema_map)
    side = load_profiles(side_path, cfg.schema_map) if side_path else None
    if side is None:
        logger.warning("[INGEST] no profile side file; reputation is undefined and no bots will be flagged")

    spec = FilterSpec(
        langs=frozenset(filters.langs) if filters.langs else None,
        countries=frozenset(cfg.regions.region_map) if filters.restrict_to_regions else None,
        start=window.start,
        end=window.end,
        drop_accounts_created_after=window.ban_date if filters.drop_late_accounts else None,
        query=QuerySpec.parse(filters.query) if filters.query else None,
    )
    result = filter_corpus(corpus, spec, side)
    profiles = derive_user_profiles(result.corpus, cfg.regions.region_map, side)

    pole_r = load_corpus(paths.pole_r, cfg.schema_map)
    pole_u = load_corpus(paths.pole_u, cfg.schema_map)

    stage = store.stage_dir("ingest")
    outputs = [
        write_corpus(result.corpus, store.path(CORPUS)),
        write_rejects(corpus.rejects, stage / "rejects.csv"),
        write_corpus(pole_r, store.path(POLE_R)),
        write_corpus(pole_u, store.path(POLE_U)),
        write_frame(profiles_frame(profiles), store.path(PROFILES)),
        write_frame(describe_corpus(result.corpus), stage / "descriptives.csv", index=True),
        write_frame(
            stem_frequency({"corpus": result.corpus, "R": pole_r, "U": pole_u}, filters.stems),
            stage / "stem_frequency.csv",
            index=True,
        ),
        write_json({
            "n_read": len(corpus) + len(corpus.rejects),
            "n_rejected": len(corpus.rejects),
            "n_kept": len(result.corpus),
            "dropped": result.dropped,
            "n_users": len(profiles),
            "pole_r": {"n": len(pole_r), "n_rejected": len(pole_r.rejects)},
            "pole_u": {"n": len(pole_u), "n_rejected": len(pole_u.rejects)},
        }, stage / "filter_report.json"),
    ]
    inputs = [Path(paths.corpus), Path(paths.pole_r), Path(paths.pole_u)] + ([side_path] if side_path else [])
    logger.info(f"[INGEST] kept {len(result.corpus)} of {len(corpus)} documents from {len(profiles)} users")
    ctx.manifest("ingest", inputs, outputs)
    return outputs


# ===========================
# score
# ===========================

def scoring_inputs_hash(encoder_config: BaseModel, inputs: List[Optional[Path]]) -> str:
    """Hash of the encoder settings and the content of every file the raw scores depend on."""
    payload = {
        "encoder": encoder_config.model_dump(mode="json"),
        "files": [sha256_file(path) if path else None for path in inputs],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def run_score(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    corpus = load_corpus(store.require_upstream(CORPUS))
    pole_r = load_corpus(store.require(POLE_R, "ingest"))
    pole_u = load_corpus(store.require(POLE_U, "ingest"))

    embeddings = None
    if cfg.encoder.kind == "precomputed-file":
        embeddings = _optional_path(cfg.paths.embeddings)
        if embeddings is None:
            raise ConfigurationError(
                f"paths.embeddings {cfg.paths.embeddings!r} does not exist; the precomputed-file encoder needs it"
            )
    backend = build_backend(cfg.encoder, embeddings)
    r_pc = build_pole_corpus("R", pole_r, backend)
    u_pc = build_pole_corpus("U", pole_u, backend)
    days = sorted(set(corpus.frame["day"]))
    poles = build_poles(cfg.poles, r_pc, u_pc, days, cfg.window.ban_date)

    pole_hash = cfg.poles.config_hash()
    inputs = [store.path(CORPUS), store.path(POLE_R), store.path(POLE_U)] + ([embeddings] if embeddings else [])
    inputs_hash = scoring_inputs_hash(cfg.encoder, inputs)
    stats = None
    if store.exists(STATS):
        frozen = read_stats(store.path(STATS))
        if frozen.matches(pole_hash, inputs_hash):
            logger.info("[SCORE] reusing frozen standardization statistics")
            stats = frozen
        elif frozen.pole_config_hash != pole_hash:
            logger.info("[SCORE] pole configuration changed; recomputing standardization statistics")
        else:
            logger.info("[SCORE] corpus, pole corpora or encoder changed; recomputing standardization statistics")
    scores, stats = score_corpus(
        corpus, backend, poles, cfg.poles.b, stats, pole_hash, ctx.threads, inputs_hash=inputs_hash,
    )

    outputs = [
        write_scores(scores, store.path(SCORES)),
        write_stats(stats, store.path(STATS)),
        write_poles(poles, store.stage_dir("score") / "poles.csv"),
    ]
    ctx.manifest("score", inputs, outputs, extra={"pole_config_hash": pole_hash, "inputs_hash": inputs_hash})
    return outputs


# ===========================
# panel
# ===========================

def _supplier_shares(scores, corpus, flags, profiles, cfg) -> pd.DataFrame:
    rows = []
    for bots_only in (False, True):
        for region in ("treated", "control"):
            for period in ("pre", "post"):
                try:
                    share = supplier_share(
                        scores, corpus, flags, profiles, cfg.window, period, region, bots_only, cfg.thresholds.supplier,
                    )
                except EmptySelectionError as e:
                    logger.info(f"[PANEL] supplier share undefined: {e}")
                    share = float("nan")
                rows.append({"users": "bots" if bots_only else "all", "region": region, "period": period, "share": share})
    return pd.DataFrame(rows)


def run_panel(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    scores_path = store.require_upstream(SCORES)
    corpus = load_corpus(store.path(CORPUS))
    scores = read_scores(scores_path)
    profiles = read_profiles(store.require(PROFILES, "ingest"))
    banned = load_banned_handles(cfg.paths.banned_handles)
    t = cfg.thresholds

    panel = build_panel(scores, corpus, cfg.window, t.pro)
    panel = attach_treatment(panel, profiles, cfg.window)
    flags = build_cohort_flags(
        corpus, scores, cfg.window, banned, profiles, t.supplier, t.bot_activity_pct, t.bot_reputation_pct,
        t.slant_cutoff, t.activity_cutoff, t.top_cutoff,
    )

    stage = store.stage_dir("panel")
    outputs = [write_panel(panel, store.path(PANEL)), write_flags(flags, store.path(FLAGS))]
    try:
        outputs.append(write_frame(balance_table(panel, cfg.window), stage / "balance.csv", index=True))
    except (EmptySelectionError, DegenerateError) as e:
        logger.warning(f"[PANEL] balance table skipped: {e}")
    outputs.append(write_frame(_supplier_shares(scores, corpus, flags, profiles, cfg), stage / "supplier_share.csv"))

    inputs = [store.path(CORPUS), scores_path, store.path(PROFILES), Path(cfg.paths.banned_handles)]
    ctx.manifest("panel", inputs, outputs)
    return outputs


# ===========================
# estimate
# ===========================

def _load_panel_and_flags(store: ArtifactStore):
    panel = read_panel(store.require_upstream(PANEL))
    flags = read_flags(store.require(FLAGS, "panel"))
    return panel, flags


def _fits_payload(fits: Dict[str, FitResult], failures: Dict[str, str]) -> Dict[str, Any]:
    payload: Dict[str, Any] = {outcome: fit.to_dict() for outcome, fit in fits.items()}
    payload.update({outcome: {"error": message} for outcome, message in failures.items()})
    return payload


def run_estimate(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    est = cfg.estimation
    panel, flags = _load_panel_and_flags(store)
    controls = list(CONTROLS) if est.controls else []
    run_weekly = est.weekly and len(cfg.window.post_days) >= 8
    if est.weekly and not run_weekly:
        logger.warning(f"[ESTIMATE] post period has {len(cfg.window.post_days)} day(s); weekly interactions skipped")

    did: Dict[str, Any] = {}
    weekly: Dict[str, Any] = {}
    coefficients = []
    for name, sample in est.samples.items():
        try:
            sub = select_sample(panel, flags, sample)
        except EmptySelectionError as e:
            logger.warning(f"[ESTIMATE] sample {name}: {e}")
            did[name] = {"error": str(e)}
            continue
        logger.info(f"[ESTIMATE] sample {name}: {sub['user_id'].nunique()} users, {len(sub)} cells")
        failures: Dict[str, str] = {}
        fits = did_battery(
            sub, est.outcomes, ctx.threads, failures=failures, controls=controls, dof=est.dof, pre_mean=est.pre_mean,
        )
        did[name] = _fits_payload(fits, failures)
        if fits:
            coefficients.append(coefficient_frame(fits).assign(sample=name, specification="did"))
        if run_weekly:
            failures = {}
            fits = did_battery(
                sub, est.outcomes, ctx.threads, estimator=weekly_interactions, failures=failures,
                window=cfg.window, controls=controls, dof=est.dof,
            )
            weekly[name] = _fits_payload(fits, failures)
            if fits:
                coefficients.append(coefficient_frame(fits).assign(sample=name, specification="weekly"))

    outputs = [write_json(did, store.path(DID))]
    if run_weekly:
        outputs.append(write_json(weekly, store.path(WEEKLY)))

    if est.imputation.enabled:
        imputation: Dict[str, Any] = {}
        for name in est.imputation.samples:
            if name not in est.samples:
                raise ConfigurationError(f"imputation sample {name!r} is not a configured sample")
            imputation[name] = {}
            for outcome in est.imputation.outcomes:
                try:
                    sub = select_sample(panel, flags, est.samples[name])
                    result = imputation_att(sub, outcome, est.imputation.n_boot, ctx.seed, ctx.threads)
                    imputation[name][outcome] = result.to_dict()
                except SlantStudyError as e:
                    logger.warning(f"[ESTIMATE] imputation {name}/{outcome}: {e}")
                    imputation[name][outcome] = {"error": f"{type(e).__name__}: {e}"}
        outputs.append(write_json(imputation, store.path(IMPUTATION)))

    table = pd.concat(coefficients, ignore_index=True) if coefficients else pd.DataFrame()
    outputs.append(write_frame(table, store.stage_dir("estimate") / "coefficients.csv"))
    ctx.manifest("estimate", [store.path(PANEL), store.path(FLAGS)], outputs)
    return outputs


# ===========================
# event-study
# ===========================

def run_event_study(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    est = cfg.estimation
    es = est.event_study
    panel, flags = _load_panel_and_flags(store)
    controls = list(CONTROLS) if est.controls else []
    stage = store.stage_dir("event-study")

    outputs: List[Path] = []
    fits: Dict[str, Any] = {}
    for name in es.samples:
        if name not in est.samples:
            raise ConfigurationError(f"event-study sample {name!r} is not a configured sample")
        sub = select_sample(panel, flags, est.samples[name])
        for outcome in es.outcomes:
            variants = [("daily", None)] + ([("binned", es.bins)] if es.bins else [])
            for kind, bins in variants:
                result = event_study(sub, outcome, cfg.reference_day, bins, controls, est.dof)
                key = f"{name}_{outcome}_{kind}"
                outputs.append(write_frame(result.table, stage / f"{key}.csv"))
                fits[key] = result.fit.to_dict()
    outputs.append(write_json({"reference_day": cfg.reference_day, "fits": fits}, stage / "event_study.json"))
    ctx.manifest("event-study", [store.path(PANEL), store.path(FLAGS)], outputs)
    return outputs


# ===========================
# synth / mc
# ===========================

def study_synth_config(cfg) -> SynthConfig:
    """The synth block aligned with the study's window and regions."""
    return cfg.synth.model_copy(update={
        "start": cfg.window.start,
        "ban_date": cfg.window.ban_date,
        "end": cfg.window.end,
        "treated_countries": [c.upper() for c in cfg.regions.treated],
        "control_countries": [c.upper() for c in cfg.regions.control],
    })


def run_synth(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    synth = study_synth_config(cfg)
    stage = store.stage_dir("synth")

    if synth.mode == "direct-outcome":
        panel, truth = generate_panel(synth, ctx.seed)
        users = sorted(panel["user_id"].unique())
        flags = truth.flags_frame(users, cfg.thresholds.slant_cutoff, cfg.thresholds.top_cutoff)
        outputs = [
            write_panel(panel, store.path(PANEL)),
            write_flags(flags, store.path(FLAGS)),
            write_json(truth.to_dict(), stage / "truth.json"),
        ]
        ctx.manifest("synth", [], outputs, extra={"mode": synth.mode})
        return outputs

    generated = generate_corpus(synth, ctx.seed)
    p = cfg.paths
    if not p.profiles or not p.embeddings:
        raise ConfigurationError("pole-anchored synth needs paths.profiles and paths.embeddings")
    outputs = generated.write(p.corpus, p.pole_r, p.pole_u, p.profiles, p.embeddings, p.banned_handles)
    outputs.append(write_json(generated.truth.to_dict(), stage / "truth.json"))
    ctx.manifest("synth", [], outputs, extra={"mode": synth.mode})
    return outputs + run_ingest(ctx)


def run_mc(ctx: RunContext) -> List[Path]:
    cfg, store = ctx.cfg, ctx.store
    synth = study_synth_config(cfg)
    if synth.mode != "direct-outcome":
        raise ConfigurationError("mc runs on the direct-outcome generator; set synth.mode accordingly")
    stage = store.stage_dir("mc")

    outputs: List[Path] = []
    timing: Dict[str, float] = {}
    summary: Dict[str, Any] = {}
    for estimator in cfg.mc.estimators:
        spec = MonteCarloSpec(estimator=estimator, outcome=cfg.mc.outcome, n_boot=cfg.mc.n_boot)
        began = time.perf_counter()
        result = monte_carlo(synth, spec, cfg.mc.reps, ctx.seed, ctx.threads)
        timing[estimator] = time.perf_counter() - began
        timing[f"{estimator}_mean_runtime"] = result.mean_runtime
        summary[estimator] = {k: v for k, v in result.to_dict().items() if k != "mean_runtime"}
        outputs.append(write_frame(result.draws.drop(columns=["runtime"]), stage / f"{estimator}_draws.csv"))
    outputs.append(write_json(summary, stage / "summary.json"))
    ctx.manifest("mc", [], outputs, timing=timing)
    return outputs


# ===========================
# report
# ===========================

def _stored_fits(payload: Dict[str, Any]) -> Dict[str, FitResult]:
    return {outcome: FitResult.from_dict(fit) for outcome, fit in payload.items() if "error" not in fit}


def run_report(ctx: RunContext) -> List[Path]:
    store = ctx.store
    did_path = store.require_upstream(DID)
    stage = store.stage_dir("report")
    inputs = [did_path]
    outputs: List[Path] = []
    frames = []

    sources = [("did", read_json(did_path))]
    if store.exists(WEEKLY):
        inputs.append(store.path(WEEKLY))
        sources.append(("weekly", read_json(store.path(WEEKLY))))
    for specification, by_sample in sources:
        for sample, payload in by_sample.items():
            if "error" in payload:
                continue
            fits = _stored_fits(payload)
            if not fits:
                continue
            outputs.append(write_frame(assemble_table(fits), stage / f"table_{specification}_{sample}.csv", index=True))
            frames.append(coefficient_frame(fits).assign(sample=sample, specification=specification))

    if store.exists(IMPUTATION):
        inputs.append(store.path(IMPUTATION))
        rows = [
            {"sample": sample, "outcome": outcome, **{k: v for k, v in result.items() if k != "dropped_users"}}
            for sample, by_outcome in read_json(store.path(IMPUTATION)).items()
            for outcome, result in by_outcome.items()
            if "error" not in result
        ]
        if rows:
            frame = pd.DataFrame(rows)
            for level in ("95", "90"):
                frame[[f"lo{level}", f"hi{level}"]] = pd.DataFrame(frame.pop(f"ci{level}").tolist(), index=frame.index)
            outputs.append(write_frame(frame, stage / "imputation.csv"))

    es_dir = store.path("event_study")
    if es_dir.exists():
        for table_path in sorted(es_dir.glob("*.csv")):
            inputs.append(table_path)
            table = pd.read_csv(table_path)
            plot = table.rename(columns={"start": "day", "lo95": "lo", "hi95": "hi"})[["day", "coef", "lo", "hi"]]
            outputs.append(write_frame(plot, stage / f"plot_{table_path.stem}.csv"))

    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    outputs.append(write_frame(table, stage / "coefficients.csv"))
    ctx.manifest("report", inputs, outputs)
    return outputs


STAGES = {
    "ingest": run_ingest,
    "score": run_score,
    "panel": run_panel,
    "estimate": run_estimate,
    "event-study": run_event_study,
    "synth": run_synth,
    "mc": run_mc,
    "report": run_report,
}
