"""
Estimator Service - two-way fixed-effects regression with cluster-robust inference.

User and day effects are absorbed by alternating projections; slopes come from OLS on the
demeaned data and carry a CR1 cluster sandwich clustered on users. On top of that sit the
difference-in-differences, event-study and weekly specifications and the imputation
estimator, which fits the fixed effects on untreated cells only.
"""
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Any, Callable, Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, Field
from scipy import linalg, stats

from services.panel_service import OUTCOMES, StudyWindow
from utils.exceptions import (
    ConvergenceError,
    EmptySelectionError,
    IdentificationError,
    InferenceError,
    SlantStudyError,
    SpecificationError,
)

logger = logging.getLogger(__name__)

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10000
COLLINEAR_TOL = 1e-7
PCT_MEAN_EPS = 1e-12

DofConvention = Literal["absorb-adjusted", "slopes-only"]


class RegressionSpec(BaseModel):
    outcome: str
    terms: List[str] = Field(default_factory=lambda: ["eu_x_ban"])
    controls: List[str] = Field(default_factory=list)
    cluster: str = "user_id"
    dof: DofConvention = "absorb-adjusted"
    pre_mean: Literal["pooled", "treated"] = "pooled"
    reference_day: Optional[date] = None


class Demeaned(NamedTuple):
    values: NDArray[np.float64]
    iterations: int
    final_delta: float


@dataclass
class FitResult:
    spec: RegressionSpec
    terms: List[str]
    coefficients: Dict[str, float]
    vcov: NDArray[np.float64]
    n_obs: int
    n_clusters: int
    n_users: int
    n_days: int
    k: int
    r2_within: float
    pre_period_mean: Optional[float] = None
    pct_of_mean: Optional[float] = None
    dropped_collinear: List[str] = field(default_factory=list)
    dropped_missing: int = 0
    demean_iterations: int = 0
    demean_delta: float = 0.0

    @property
    def se(self) -> Dict[str, float]:
        return {t: float(np.sqrt(max(self.vcov[i, i], 0.0))) for i, t in enumerate(self.terms)}

    @property
    def df_resid(self) -> int:
        return self.n_clusters - 1

    def ci(self, level: float = 0.95) -> Dict[str, Tuple[float, float]]:
        """t-based interval with G - 1 degrees of freedom."""
        crit = float(stats.t.ppf(0.5 + level / 2, self.df_resid))
        se = self.se
        return {t: (self.coefficients[t] - crit * se[t], self.coefficients[t] + crit * se[t]) for t in self.terms}

    def p_values(self) -> Dict[str, float]:
        se = self.se
        out = {}
        for t in self.terms:
            if se[t] == 0:
                out[t] = float("nan")
            else:
                out[t] = float(2 * stats.t.sf(abs(self.coefficients[t] / se[t]), self.df_resid))
        return out

    def to_dict(self) -> Dict[str, Any]:
        ci95, ci90 = self.ci(0.95), self.ci(0.90)
        return {
            "spec": self.spec.model_dump(mode="json"),
            "terms": list(self.terms),
            "coefficients": self.coefficients,
            "se": self.se,
            "ci95": {t: list(v) for t, v in ci95.items()},
            "ci90": {t: list(v) for t, v in ci90.items()},
            "p_values": self.p_values(),
            "vcov": self.vcov.tolist(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r2_within": self.r2_within,
            "pre_period_mean": self.pre_period_mean,
            "pct_of_mean": self.pct_of_mean,
            "diagnostics": {
                "dropped_collinear": self.dropped_collinear,
                "dropped_missing": self.dropped_missing,
                "demean_iterations": self.demean_iterations,
                "demean_delta": self.demean_delta,
                "n_users": self.n_users,
                "n_days": self.n_days,
                "k": self.k,
                "dof": self.spec.dof,
            },
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "FitResult":
        """Inverse of to_dict, used when reporting from stored estimates."""
        diagnostics = payload.get("diagnostics", {})
        terms = list(payload["terms"])
        return cls(
            spec=RegressionSpec.model_validate(payload["spec"]),
            terms=terms,
            coefficients={t: float(payload["coefficients"][t]) for t in terms},
            vcov=np.asarray(payload["vcov"], dtype=np.float64).reshape(len(terms), len(terms)),
            n_obs=int(payload["n_obs"]),
            n_clusters=int(payload["n_clusters"]),
            n_users=int(diagnostics.get("n_users", payload["n_clusters"])),
            n_days=int(diagnostics.get("n_days", 0)),
            k=int(diagnostics.get("k", len(terms))),
            r2_within=float(payload["r2_within"] if payload["r2_within"] is not None else "nan"),
            pre_period_mean=payload.get("pre_period_mean"),
            pct_of_mean=payload.get("pct_of_mean"),
            dropped_collinear=list(diagnostics.get("dropped_collinear", [])),
            dropped_missing=int(diagnostics.get("dropped_missing", 0)),
            demean_iterations=int(diagnostics.get("demean_iterations", 0)),
            demean_delta=float(diagnostics.get("demean_delta") or 0.0),
        )


@dataclass
class EventStudyResult:
    table: pd.DataFrame
    fit: FitResult
    reference_day: date

    def plot_data(self) -> pd.DataFrame:
        """(day, coef, lo, hi) series for external plotting."""
        return self.table.rename(columns={"start": "day", "lo95": "lo", "hi95": "hi"})[["day", "coef", "lo", "hi"]]


@dataclass
class ImputationResult:
    outcome: str
    att: float
    se: float
    n_boot: int
    n_failed_draws: int
    n_treated_cells: int
    n_untreated_cells: int
    dropped_users: List[str] = field(default_factory=list)
    dropped_cells: int = 0

    def ci(self, level: float = 0.95) -> Tuple[float, float]:
        crit = float(stats.norm.ppf(0.5 + level / 2))
        return self.att - crit * self.se, self.att + crit * self.se

    def to_dict(self) -> Dict[str, Any]:
        return {**dataclasses.asdict(self), "ci95": list(self.ci(0.95)), "ci90": list(self.ci(0.90))}


# ===========================
# Linear algebra core
# ===========================

def demean_two_way(
    y_and_X: NDArray[np.float64],
    user_idx: NDArray[np.int64],
    day_idx: NDArray[np.int64],
    tol: float = DEMEAN_TOL,
    max_iter: int = DEMEAN_MAX_ITER,
) -> Demeaned:
    """
    Alternately subtract user means and day means from every column until the largest
    absolute change of a sweep is below `tol`.
    """
    values = np.array(y_and_X, dtype=np.float64, copy=True)
    if values.ndim == 1:
        values = values[:, None]
    if not np.all(np.isfinite(values)):
        raise SpecificationError("design matrix has non-finite entries")
    user_idx = np.asarray(user_idx, dtype=np.int64)
    day_idx = np.asarray(day_idx, dtype=np.int64)
    groups = []
    for idx in (user_idx, day_idx):
        n_groups = int(idx.max()) + 1 if idx.size else 0
        counts = np.bincount(idx, minlength=n_groups).astype(np.float64)
        groups.append((idx, n_groups, np.maximum(counts, 1.0)))

    delta = np.inf
    for iteration in range(1, max_iter + 1):
        previous = values.copy()
        for idx, n_groups, counts in groups:
            for j in range(values.shape[1]):
                means = np.bincount(idx, weights=values[:, j], minlength=n_groups) / counts
                values[:, j] -= means[idx]
        delta = float(np.max(np.abs(values - previous))) if values.size else 0.0
        if delta < tol:
            return Demeaned(values, iteration, delta)
    raise ConvergenceError("two-way demeaning did not converge", delta, max_iter)


def drop_collinear(
    Xd: NDArray[np.float64],
    names: Sequence[str],
    scale: Optional[NDArray[np.float64]] = None,
    tol: float = COLLINEAR_TOL,
) -> Tuple[List[int], List[str]]:
    """
    Pivoted QR rank detection. Returns (kept column indices in original order, dropped
    names). `scale` holds the pre-demeaning column norms so that absorbed columns, which
    demean to round-off, are recognized as zero.
    """
    if Xd.shape[1] == 0:
        return [], []
    _, R, pivots = linalg.qr(Xd, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    reference = max(float(np.max(scale)) if scale is not None and scale.size else 0.0, 1.0)
    rank = int(np.sum(diag > tol * reference))
    kept = sorted(int(p) for p in pivots[:rank])
    dropped = [names[int(p)] for p in sorted(pivots[rank:])]
    return kept, dropped


def cluster_vcov(
    Xd: NDArray[np.float64],
    resid: NDArray[np.float64],
    clusters: Sequence,
    dof: DofConvention = "absorb-adjusted",
    n_absorbed: int = 0,
) -> NDArray[np.float64]:
    """
    CR1 sandwich (X'X)^-1 (sum_g X_g' u_g u_g' X_g) (X'X)^-1 scaled by
    G/(G-1) * (N-1)/(N-K). K counts the slopes, plus the absorbed fixed-effect levels
    under the absorb-adjusted convention.
    """
    Xd = np.asarray(Xd, dtype=np.float64)
    resid = np.asarray(resid, dtype=np.float64)
    codes, uniques = pd.factorize(pd.Series(list(clusters)), sort=True)
    n_clusters = len(uniques)
    if n_clusters < 2:
        raise InferenceError(f"cluster-robust inference needs at least 2 clusters, got {n_clusters}")
    n_obs, n_slopes = Xd.shape
    k = n_slopes + (n_absorbed if dof == "absorb-adjusted" else 0)
    if n_obs - k <= 0:
        raise InferenceError(f"no residual degrees of freedom (N={n_obs}, K={k})")

    try:
        bread = linalg.inv(Xd.T @ Xd)
    except linalg.LinAlgError as e:
        raise InferenceError(f"X'X is singular after dropping collinear columns: {e}")
    scores = np.zeros((n_clusters, n_slopes))
    np.add.at(scores, codes, Xd * resid[:, None])
    meat = scores.T @ scores
    factor = (n_clusters / (n_clusters - 1)) * ((n_obs - 1) / (n_obs - k))
    vcov = factor * bread @ meat @ bread
    return (vcov + vcov.T) / 2


# ===========================
# TWFE fit
# ===========================

def _pre_period_mean(sample: pd.DataFrame, outcome: str, how: str) -> Optional[float]:
    if "post" not in sample.columns:
        return None
    pre = sample[sample["post"] == 0]
    if how == "treated" and "treated" in sample.columns:
        pre = pre[pre["treated"] == 1]
    if pre.empty:
        return None
    return float(pre[outcome].mean())


def summarize_fit(fit: FitResult, pre_period_mean: Optional[float]) -> FitResult:
    """
    Attach the pre-period mean and the primary coefficient as a percent of its magnitude,
    100 * beta / |mean|. Left undefined (None) when the mean is missing or ~0.
    """
    pct = None
    if pre_period_mean is not None and np.isfinite(pre_period_mean) and abs(pre_period_mean) >= PCT_MEAN_EPS:
        beta = fit.coefficients.get(fit.spec.terms[0], 0.0) if fit.spec.terms else 0.0
        pct = 100.0 * beta / abs(pre_period_mean)
    elif pre_period_mean is not None:
        logger.warning(f"[ESTIMATE] pre-period mean {pre_period_mean} too close to 0; % of mean undefined")
    return dataclasses.replace(fit, pre_period_mean=pre_period_mean, pct_of_mean=pct)


def fit_twfe(
    panel: pd.DataFrame,
    spec: RegressionSpec,
    tol: float = DEMEAN_TOL,
    max_iter: int = DEMEAN_MAX_ITER,
) -> FitResult:
    """OLS of the outcome on spec.terms + spec.controls with user and day effects absorbed."""
    regressors = list(spec.terms) + list(spec.controls)
    needed = [spec.outcome, "user_id", "day", spec.cluster] + regressors
    missing = [c for c in dict.fromkeys(needed) if c not in panel.columns]
    if missing:
        raise SpecificationError(f"panel lacks column(s): {', '.join(missing)}")

    complete = panel[[spec.outcome] + regressors].notna().all(axis=1)
    dropped_missing = int((~complete).sum())
    sample = panel[complete].sort_values(["user_id", "day"], kind="mergesort").reset_index(drop=True)
    if dropped_missing:
        logger.info(f"[ESTIMATE] {spec.outcome}: {dropped_missing} cell(s) without the outcome or a regressor left out")
    if sample.empty:
        raise IdentificationError(f"no cells with a defined {spec.outcome}")

    user_idx, users = pd.factorize(sample["user_id"], sort=True)
    day_idx, days = pd.factorize(sample["day"], sort=True)
    raw = sample[[spec.outcome] + regressors].to_numpy(dtype=np.float64)
    demeaned = demean_two_way(raw, user_idx, day_idx, tol, max_iter)
    yd, Xd_all = demeaned.values[:, 0], demeaned.values[:, 1:]

    scale = np.sqrt(np.sum(raw[:, 1:] ** 2, axis=0))
    kept, dropped = drop_collinear(Xd_all, regressors, scale)
    if dropped:
        logger.warning(f"[ESTIMATE] {spec.outcome}: dropped collinear column(s) {', '.join(dropped)}")
    terms_kept = [regressors[i] for i in kept if regressors[i] in spec.terms]
    if not terms_kept:
        raise IdentificationError(
            f"treatment term(s) {', '.join(spec.terms)} have no variation left after absorbing user and day effects"
        )
    Xd = Xd_all[:, kept]
    names = [regressors[i] for i in kept]

    beta, *_ = linalg.lstsq(Xd, yd)
    resid = yd - Xd @ beta
    n_absorbed = len(users) + len(days) - 1
    vcov = cluster_vcov(Xd, resid, sample[spec.cluster], spec.dof, n_absorbed)

    sst = float(np.sum(yd * yd))
    # an outcome absorbed by the fixed effects demeans to round-off, not to exact zero
    sst_floor = np.finfo(np.float64).eps * max(float(np.sum(raw[:, 0] ** 2)), 1.0)
    r2 = 0.0 if sst <= sst_floor else 1.0 - float(np.sum(resid * resid)) / sst

    fit = FitResult(
        spec=spec,
        terms=names,
        coefficients={n: float(b) for n, b in zip(names, beta)},
        vcov=vcov,
        n_obs=len(sample),
        n_clusters=int(sample[spec.cluster].nunique()),
        n_users=len(users),
        n_days=len(days),
        k=len(names) + (n_absorbed if spec.dof == "absorb-adjusted" else 0),
        r2_within=r2,
        dropped_collinear=dropped,
        dropped_missing=dropped_missing,
        demean_iterations=demeaned.iterations,
        demean_delta=demeaned.final_delta,
    )
    logger.debug(f"[ESTIMATE] {spec.outcome}: demeaning converged in {demeaned.iterations} sweeps (delta {demeaned.final_delta:.2e})")
    return summarize_fit(fit, _pre_period_mean(sample, spec.outcome, spec.pre_mean))


def _require_treatment(panel: pd.DataFrame) -> None:
    for column in ("treated", "post"):
        if column not in panel.columns:
            raise SpecificationError(f"panel has no {column!r} column; attach treatment first")


def did_estimate(
    panel: pd.DataFrame,
    outcome: str,
    controls: Sequence[str] = (),
    dof: DofConvention = "absorb-adjusted",
    pre_mean: str = "pooled",
) -> FitResult:
    """Single EU x Ban coefficient."""
    _require_treatment(panel)
    if panel.empty:
        raise EmptySelectionError(f"cannot estimate {outcome} on an empty panel")
    if panel["treated"].nunique() < 2:
        group = "control" if panel["treated"].iloc[0] == 1 else "treated"
        raise IdentificationError(f"sample has no {group} users")
    data = panel.assign(eu_x_ban=panel["treated"] * panel["post"])
    spec = RegressionSpec(outcome=outcome, terms=["eu_x_ban"], controls=list(controls), dof=dof, pre_mean=pre_mean)
    return fit_twfe(data, spec)


def did_battery(
    panel: pd.DataFrame,
    outcomes: Sequence[str] = OUTCOMES,
    threads: int = 1,
    estimator: Callable[..., FitResult] = did_estimate,
    failures: Optional[Dict[str, str]] = None,
    **kwargs,
) -> Dict[str, FitResult]:
    """
    Run `estimator` (did_estimate by default) for each outcome concurrently; results keep
    the outcome order. When a `failures` dict is given, toolkit errors are recorded there
    per outcome instead of raised.
    """
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(estimator, panel, outcome, **kwargs) for outcome in outcomes]
        fits = {}
        for outcome, future in zip(outcomes, futures):
            try:
                fits[outcome] = future.result()
            except SlantStudyError as e:
                if failures is None:
                    raise
                logger.warning(f"[ESTIMATE] {outcome}: {e}")
                failures[outcome] = f"{type(e).__name__}: {e}"
        return fits


def _bin_label(lo: date, hi: date) -> str:
    return f"eu_x_{lo}" if lo == hi else f"eu_x_{lo}_{hi}"


def _validate_bins(bins: Sequence[Tuple[date, date]], days: Sequence[date], reference_day: date) -> None:
    covered: List[date] = []
    for lo, hi in bins:
        if lo > hi:
            raise SpecificationError(f"bin {lo}..{hi} is inverted")
        if lo <= reference_day <= hi:
            raise SpecificationError(f"bin {lo}..{hi} contains the reference day {reference_day}")
        span = [d for d in days if lo <= d <= hi]
        if not span:
            raise SpecificationError(f"bin {lo}..{hi} has no observations")
        covered.extend(span)
    if len(covered) != len(set(covered)):
        raise SpecificationError("event-study bins overlap")
    uncovered = sorted(set(days) - set(covered) - {reference_day})
    if uncovered:
        raise SpecificationError(f"bins leave day(s) uncovered: {', '.join(str(d) for d in uncovered)}")


def event_study(
    panel: pd.DataFrame,
    outcome: str,
    reference_day: date,
    bins: Optional[Sequence[Tuple[date, date]]] = None,
    controls: Sequence[str] = (),
    dof: DofConvention = "absorb-adjusted",
) -> EventStudyResult:
    """
    EU x day (or EU x bin) coefficients relative to the omitted reference day, whose
    coefficient is pinned at 0 with se 0.
    """
    _require_treatment(panel)
    days = sorted(panel["day"].unique())
    if reference_day not in set(days):
        raise SpecificationError(f"reference day {reference_day} has no observations")
    if bins is None:
        bins = [(d, d) for d in days if d != reference_day]
    else:
        bins = sorted((lo, hi) for lo, hi in bins)
        _validate_bins(bins, days, reference_day)

    terms = {}
    for lo, hi in bins:
        in_bin = panel["day"].map(lambda d, lo=lo, hi=hi: lo <= d <= hi).astype(int)
        terms[_bin_label(lo, hi)] = panel["treated"] * in_bin
    data = panel.assign(**terms)
    spec = RegressionSpec(
        outcome=outcome, terms=list(terms), controls=list(controls), dof=dof, reference_day=reference_day,
    )
    fit = fit_twfe(data, spec)

    se = fit.se
    ci95, ci90 = fit.ci(0.95), fit.ci(0.90)
    rows = [{"label": "reference", "start": reference_day, "end": reference_day,
             "coef": 0.0, "se": 0.0, "lo95": 0.0, "hi95": 0.0, "lo90": 0.0, "hi90": 0.0}]
    for (lo, hi), label in zip(bins, terms):
        if label not in fit.coefficients:
            continue
        rows.append({
            "label": label, "start": lo, "end": hi,
            "coef": fit.coefficients[label], "se": se[label],
            "lo95": ci95[label][0], "hi95": ci95[label][1],
            "lo90": ci90[label][0], "hi90": ci90[label][1],
        })
    table = pd.DataFrame(rows).sort_values("start", kind="mergesort").reset_index(drop=True)
    return EventStudyResult(table, fit, reference_day)


def weekly_interactions(
    panel: pd.DataFrame,
    outcome: str,
    window: StudyWindow,
    controls: Sequence[str] = (),
    dof: DofConvention = "absorb-adjusted",
) -> FitResult:
    """EU x first week (first 7 post days) and EU x second week (the rest of the post period)."""
    _require_treatment(panel)
    post_days = window.post_days
    if len(post_days) < 8:
        raise SpecificationError(f"post period spans {len(post_days)} day(s); weekly interactions need at least 8")
    week1_end = window.ban_date + timedelta(days=6)
    in_week1 = panel["day"].map(lambda d: window.ban_date <= d <= week1_end).astype(int)
    in_week2 = panel["day"].map(lambda d: d > week1_end).astype(int)
    data = panel.assign(
        eu_x_week1=panel["treated"] * in_week1,
        eu_x_week2=panel["treated"] * in_week2,
    )
    spec = RegressionSpec(outcome=outcome, terms=["eu_x_week1", "eu_x_week2"], controls=list(controls), dof=dof)
    return fit_twfe(data, spec)


# ===========================
# Imputation estimator
# ===========================

def _fit_untreated_effects(
    y: NDArray[np.float64],
    user_idx: NDArray[np.int64],
    day_idx: NDArray[np.int64],
    n_users: int,
    n_days: int,
    tol: float,
    max_iter: int,
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Least-squares user and day effects by alternating projections."""
    user_counts = np.maximum(np.bincount(user_idx, minlength=n_users), 1)
    day_counts = np.maximum(np.bincount(day_idx, minlength=n_days), 1)
    alpha = np.zeros(n_users)
    gamma = np.zeros(n_days)
    delta = np.inf
    for iteration in range(1, max_iter + 1):
        new_alpha = np.bincount(user_idx, weights=y - gamma[day_idx], minlength=n_users) / user_counts
        new_gamma = np.bincount(day_idx, weights=y - new_alpha[user_idx], minlength=n_days) / day_counts
        delta = max(float(np.max(np.abs(new_alpha - alpha))), float(np.max(np.abs(new_gamma - gamma))))
        alpha, gamma = new_alpha, new_gamma
        if delta < tol:
            return alpha, gamma
    raise ConvergenceError("untreated fixed effects did not converge", delta, max_iter)


def _imputed_att(
    y: NDArray[np.float64],
    user_idx: NDArray[np.int64],
    day_idx: NDArray[np.int64],
    treated_post: NDArray[np.bool_],
    tol: float,
    max_iter: int,
) -> Tuple[float, int, NDArray[np.bool_]]:
    """ATT over treated-post cells whose user and day both appear among untreated cells."""
    untreated = ~treated_post
    n_users = int(user_idx.max()) + 1
    n_days = int(day_idx.max()) + 1
    alpha, gamma = _fit_untreated_effects(
        y[untreated], user_idx[untreated], day_idx[untreated], n_users, n_days, tol, max_iter,
    )
    seen_users = np.bincount(user_idx[untreated], minlength=n_users) > 0
    seen_days = np.bincount(day_idx[untreated], minlength=n_days) > 0
    usable = treated_post & seen_users[user_idx] & seen_days[day_idx]
    if not usable.any():
        raise IdentificationError("no treated post-ban cells can be imputed")
    effects = y[usable] - (alpha[user_idx[usable]] + gamma[day_idx[usable]])
    return float(np.mean(effects)), int(usable.sum()), usable


def imputation_att(
    panel: pd.DataFrame,
    outcome: str,
    n_boot: int = 499,
    seed: int = 0,
    threads: int = 1,
    tol: float = DEMEAN_TOL,
    max_iter: int = DEMEAN_MAX_ITER,
) -> ImputationResult:
    """
    Fit user and day effects on untreated cells (all control cells and treated users'
    pre-ban cells), impute the treated post-ban counterfactuals and average
    actual - imputed. The standard error comes from a user-level cluster bootstrap with
    one SeedSequence child per draw.
    """
    _require_treatment(panel)
    sample = panel[panel[outcome].notna()].sort_values(["user_id", "day"], kind="mergesort").reset_index(drop=True)
    treated_post = ((sample["treated"] == 1) & (sample["post"] == 1)).to_numpy()
    if not treated_post.any():
        raise IdentificationError("panel has no treated post-ban cells")

    has_pre = sample.loc[~treated_post].groupby("user_id").size()
    treated_users = set(sample.loc[treated_post, "user_id"])
    dropped_users = sorted(u for u in treated_users if u not in has_pre.index)
    if dropped_users:
        logger.warning(f"[ESTIMATE] imputation: dropping {len(dropped_users)} treated user(s) without pre-ban cells")
        sample = sample[~sample["user_id"].isin(dropped_users)].reset_index(drop=True)
        treated_post = ((sample["treated"] == 1) & (sample["post"] == 1)).to_numpy()

    user_idx, users = pd.factorize(sample["user_id"], sort=True)
    day_idx, _ = pd.factorize(sample["day"], sort=True)
    y = sample[outcome].to_numpy(dtype=np.float64)
    att, n_used, usable = _imputed_att(y, user_idx, day_idx, treated_post, tol, max_iter)
    dropped_cells = int(treated_post.sum()) - n_used
    if dropped_cells:
        logger.warning(f"[ESTIMATE] imputation: {dropped_cells} treated cell(s) on days without untreated cells left out")

    rows_by_user = [np.flatnonzero(user_idx == u) for u in range(len(users))]

    def draw(b: int) -> Optional[float]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        picked = rng.integers(0, len(users), size=len(users))
        rows = np.concatenate([rows_by_user[u] for u in picked])
        new_users = np.repeat(np.arange(len(picked)), [len(rows_by_user[u]) for u in picked])
        try:
            value, _, _ = _imputed_att(y[rows], new_users, day_idx[rows], treated_post[rows], tol, max_iter)
        except (IdentificationError, ConvergenceError):
            return None
        return value

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        draws = list(pool.map(draw, range(n_boot)))
    good = np.array([d for d in draws if d is not None], dtype=np.float64)
    failed = n_boot - good.size
    if failed:
        logger.warning(f"[ESTIMATE] imputation bootstrap: {failed} of {n_boot} draw(s) failed")
    se = float(np.std(good, ddof=1)) if good.size >= 2 else float("nan")

    return ImputationResult(
        outcome=outcome,
        att=att,
        se=se,
        n_boot=n_boot,
        n_failed_draws=failed,
        n_treated_cells=n_used,
        n_untreated_cells=int((~treated_post).sum()),
        dropped_users=dropped_users,
        dropped_cells=dropped_cells,
    )


# ===========================
# Tables
# ===========================

def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def coefficient_frame(fits: Mapping[str, FitResult]) -> pd.DataFrame:
    """Long numeric table: one row per (outcome, term)."""
    rows = []
    for outcome, fit in fits.items():
        se, p = fit.se, fit.p_values()
        ci95, ci90 = fit.ci(0.95), fit.ci(0.90)
        for term in fit.terms:
            if term not in fit.spec.terms:
                continue
            rows.append({
                "outcome": outcome, "term": term, "coef": fit.coefficients[term], "se": se[term],
                "p_value": p[term], "lo95": ci95[term][0], "hi95": ci95[term][1],
                "lo90": ci90[term][0], "hi90": ci90[term][1], "n_obs": fit.n_obs,
                "n_clusters": fit.n_clusters, "r2_within": fit.r2_within,
                "pre_period_mean": fit.pre_period_mean, "pct_of_mean": fit.pct_of_mean,
            })
    return pd.DataFrame(rows)


def assemble_table(fits: Mapping[str, FitResult], digits: int = 3) -> pd.DataFrame:
    """
    Regression table: rows are treatment terms, each followed by its bracketed standard
    error, then Observations, R2 (within), Pre-period mean of DV and % of mean; one column
    per outcome.
    """
    terms: List[str] = []
    for fit in fits.values():
        terms.extend(t for t in fit.spec.terms if t not in terms)

    columns = {}
    for outcome, fit in fits.items():
        se, p = fit.se, fit.p_values()
        cells = []
        for term in terms:
            if term in fit.coefficients:
                cells.append(f"{fit.coefficients[term]:.{digits}f}{_stars(p[term])}")
                cells.append(f"[{se[term]:.{digits}f}]")
            else:
                cells.extend(["", ""])
        cells.append(str(fit.n_obs))
        cells.append(f"{fit.r2_within:.{digits}f}")
        cells.append("" if fit.pre_period_mean is None else f"{fit.pre_period_mean:.{digits}f}")
        cells.append("" if fit.pct_of_mean is None else f"{fit.pct_of_mean:.2f}")
        columns[outcome] = cells

    index = []
    for term in terms:
        index.extend([term, ""])
    index.extend(["Observations", "R2 (within)", "Pre-period mean of DV", "% of mean"])
    return pd.DataFrame(columns, index=pd.Index(index, name="term"))
