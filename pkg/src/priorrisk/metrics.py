"""Censoring-aware discrimination metrics, paired tests and bootstrap CIs.

Rank statistics here count tied risks as half-concordant. Insufficient data
(no comparable pairs, no cases or no controls) is reported as ``nan`` by the
point estimators rather than raised.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .core import DataError, SchemaError

SUBGROUPS = ("all", "exclude_lt180d", "change", "no_change", "fatty", "dense")


class InsufficientData(DataError):
    pass


# ---------------------------------------------------------------------------
# data container


@dataclass
class RiskDataset:
    """Per-subject risk scores and survival outcomes.

    ``scores`` holds one column per horizon (cumulative risk at 1..T years);
    ``risk`` is the scalar used for concordance.
    """

    ids: np.ndarray
    risk: np.ndarray
    scores: np.ndarray
    time_years: np.ndarray
    event: np.ndarray
    time_days: np.ndarray | None = None
    density_change: np.ndarray | None = None
    density_level: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=str)
        self.risk = np.asarray(self.risk, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = self.scores[:, None]
        self.time_years = np.asarray(self.time_years, dtype=np.int64)
        self.event = np.asarray(self.event, dtype=bool)
        n = len(self.ids)
        for name in ("risk", "scores", "time_years", "event"):
            if len(getattr(self, name)) != n:
                raise DataError(f"RiskDataset: {name} has length {len(getattr(self, name))}, expected {n}")
        for name in ("time_days", "density_change", "density_level"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64 if name == "time_days" else str)
                if len(v) != n:
                    raise DataError(f"RiskDataset: {name} has wrong length")
                setattr(self, name, v)
        if not (np.all(np.isfinite(self.risk)) and np.all(np.isfinite(self.scores))):
            raise DataError("RiskDataset: non-finite risk score")
        if n and self.time_years.min() < 1:
            raise DataError("RiskDataset: time_years must be >= 1")

    @classmethod
    def from_arrays(cls, time_years, event, risk, scores=None, **kw):
        risk = np.asarray(risk, dtype=np.float64)
        ids = kw.pop("ids", None)
        if ids is None:
            ids = [str(i) for i in range(len(risk))]
        return cls(ids=ids, risk=risk, scores=risk if scores is None else scores,
                   time_years=time_years, event=event, **kw)

    def __len__(self):
        return len(self.ids)

    @property
    def horizon(self) -> int:
        return self.scores.shape[1]

    def take(self, idx) -> "RiskDataset":
        def sel(v):
            return None if v is None else v[idx]

        return RiskDataset(
            ids=self.ids[idx],
            risk=self.risk[idx],
            scores=self.scores[idx],
            time_years=self.time_years[idx],
            event=self.event[idx],
            time_days=sel(self.time_days),
            density_change=sel(self.density_change),
            density_level=sel(self.density_level),
        )

    def horizon_scores(self, t: int) -> np.ndarray:
        if self.scores.shape[1] == 1:
            return self.scores[:, 0]
        if not 1 <= t <= self.scores.shape[1]:
            raise DataError(f"horizon {t} exceeds score horizon {self.scores.shape[1]}")
        return self.scores[:, t - 1]

    def with_risk(self, risk, scores=None) -> "RiskDataset":
        """Same subjects, new risk; scores default to ``risk`` at every horizon."""
        risk = np.asarray(risk, dtype=np.float64)
        if scores is None:
            scores = np.repeat(risk[:, None], self.horizon, axis=1)
        return RiskDataset(self.ids, risk, scores, self.time_years,
                           self.event, self.time_days, self.density_change, self.density_level)


# Scores file: one row per subject
#   id, time_years, event, time_days, density_change, density_level, risk,
#   score_1 .. score_T
# time_days / density_* may be empty.


def write_scores(data: RiskDataset, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time_years", "event", "time_days", "density_change", "density_level", "risk"]
                   + [f"score_{t}" for t in range(1, data.horizon + 1)])
        for i in range(len(data)):
            w.writerow(
                [data.ids[i], int(data.time_years[i]), int(data.event[i]),
                 "" if data.time_days is None else int(data.time_days[i]),
                 "" if data.density_change is None else data.density_change[i],
                 "" if data.density_level is None else data.density_level[i],
                 repr(float(data.risk[i]))]
                + [repr(float(v)) for v in data.scores[i]]
            )


def read_scores(path) -> RiskDataset:
    try:
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read scores {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty scores file")
    need = ["id", "time_years", "event", "risk", "score_1"]
    for col in need:
        if col not in rows[0]:
            raise SchemaError(f"{path}: missing column {col!r}")
    T = sum(1 for k in rows[0] if k.startswith("score_"))

    def opt(col, conv):
        if col not in rows[0] or any(r[col] == "" for r in rows):
            return None
        return [conv(r[col]) for r in rows]

    return RiskDataset(
        ids=[r["id"] for r in rows],
        risk=[float(r["risk"]) for r in rows],
        scores=[[float(r[f"score_{t}"]) for t in range(1, T + 1)] for r in rows],
        time_years=[int(r["time_years"]) for r in rows],
        event=[r["event"] == "1" for r in rows],
        time_days=opt("time_days", int),
        density_change=opt("density_change", str),
        density_level=opt("density_level", str),
    )


# ---------------------------------------------------------------------------
# Kaplan-Meier of the censoring distribution


@dataclass
class CensoringSurvival:
    """Right-continuous step function G(t) = P(C > t)."""

    times: np.ndarray  # distinct censoring times with a drop
    values: np.ndarray  # G at and after each time

    def __call__(self, t):
        k = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.values])[k]

    def left_limit(self, t):
        """G(t-): only censoring strictly before ``t`` counts."""
        k = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate([[1.0], self.values])[k]


def km_censoring_survival(times, events) -> CensoringSurvival:
    """Kaplan-Meier estimate treating censorings as the events of interest.

    At a tied time, subjects with an event are still in the risk set for
    censoring.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise DataError("km_censoring_survival needs a nonempty cohort")
    cens_times = np.unique(times[~events])
    at_risk = len(times) - np.searchsorted(np.sort(times), cens_times, side="left")
    n_cens = np.array([np.sum((times == t) & ~events) for t in cens_times])
    values = np.cumprod(1.0 - n_cens / at_risk)
    return CensoringSurvival(times=cens_times, values=values)


# ---------------------------------------------------------------------------
# concordance


def _uno_parts(time, event, risk, tau):
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    risk = np.asarray(risk, dtype=np.float64)
    G = km_censoring_survival(time, event)
    w = np.zeros(len(time))
    use = event & (time < tau)
    w[use] = 1.0 / G.left_limit(time[use]) ** 2
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    num = den = 0.0
    for t in np.unique(time[use]):
        start = np.searchsorted(t_sorted, t, side="right")
        later = np.sort(risk[order[start:]])
        if later.size == 0:
            continue
        at_t = use & (time == t)
        r = risk[at_t]
        less = np.searchsorted(later, r, side="left")
        ties = np.searchsorted(later, r, side="right") - less
        num += np.sum(w[at_t] * (less + 0.5 * ties))
        den += np.sum(w[at_t]) * later.size
    return num, den


def uno_c_index(data: RiskDataset, tau: float | None = None) -> float:
    """Uno's IPCW concordance truncated at ``tau`` (default: score horizon).

    Weights are 1 / G(T_i-)^2 from the censoring Kaplan-Meier curve. Returns
    ``nan`` when no comparable pair exists.
    """
    if tau is None:
        tau = data.horizon
    num, den = _uno_parts(data.time_years, data.event, data.risk, tau)
    return num / den if den > 0 else float("nan")


def n_comparable_events(data: RiskDataset, tau: float | None = None) -> int:
    tau = data.horizon if tau is None else tau
    t = data.time_years
    use = data.event & (t < tau)
    return int(sum(np.any(t > ti) for ti in t[use]))


# ---------------------------------------------------------------------------
# time-dependent AUC (cumulative cases / dynamic controls)


def td_auc(data: RiskDataset, t: int, ipcw: bool = False) -> float:
    """AUC at horizon ``t``: events by ``t`` vs subjects event-free past ``t``.

    Censored subjects with follow-up ending by ``t`` are excluded. With
    ``ipcw`` cases are weighted by 1/G(T_i-); controls share a common weight
    that cancels.
    """
    s = data.horizon_scores(t)
    cases = data.event & (data.time_years <= t)
    controls = data.time_years > t
    if not cases.any() or not controls.any():
        return float("nan")
    ctrl = np.sort(s[controls])
    sc = s[cases]
    less = np.searchsorted(ctrl, sc, side="left")
    ties = np.searchsorted(ctrl, sc, side="right") - less
    hits = less + 0.5 * ties
    if ipcw:
        G = km_censoring_survival(data.time_years, data.event)
        wc = 1.0 / G.left_limit(data.time_years[cases])
        return float(np.sum(wc * hits) / (np.sum(wc) * ctrl.size))
    return float(np.sum(hits) / (sc.size * ctrl.size))


def horizon_labels(data: RiskDataset, t: int):
    """(keep mask, case labels) defining the cases/controls at horizon ``t``."""
    cases = data.event & (data.time_years <= t)
    controls = data.time_years > t
    keep = cases | controls
    return keep, cases[keep]


# ---------------------------------------------------------------------------
# DeLong


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    var_diff: float


def _structural_components(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    m, n = pos.size, neg.size
    r_all = rankdata(np.concatenate([pos, neg]))
    r_pos = rankdata(pos)
    r_neg = rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n  # per case: fraction of controls below (ties half)
    v01 = 1.0 - (r_all[m:] - r_neg) / m  # per control: fraction of cases above
    auc = v10.mean()
    return auc, v10, v01


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Paired DeLong test for two correlated AUCs on the same subjects."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if not (a.shape == b.shape == y.shape):
        raise DataError("delong_test: scores and labels must align")
    m, n = int(y.sum()), int((~y).sum())
    if m == 0 or n == 0:
        raise InsufficientData("delong_test needs at least one case and one control")
    auc_a, v10a, v01a = _structural_components(a, y)
    auc_b, v10b, v01b = _structural_components(b, y)
    S10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    S01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    S = S10 / m + S01 / n
    var = float(S[0, 0] + S[1, 1] - 2 * S[0, 1])
    diff = auc_a - auc_b
    if var <= 1e-15 * max(1.0, abs(diff)):
        z = 0.0
    else:
        z = diff / math.sqrt(var)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return DeLongResult(float(auc_a), float(auc_b), float(z), p, max(var, 0.0))


# ---------------------------------------------------------------------------
# compareC (paired concordance comparison)


@dataclass
class CompareCResult:
    c_a: float
    c_b: float
    z: float
    p: float
    var_diff: float


def _pair_kernels(time, event, risk_a, risk_b, tau, weights):
    ti, tj = time[:, None], time[None, :]
    comp = (event[:, None] & (ti < tj) & (ti < tau)).astype(np.float64) * weights[:, None]

    def conc(r):
        d = r[:, None] - r[None, :]
        return comp * ((d > 0) + 0.5 * (d == 0))

    return comp, conc(risk_a), conc(risk_b)


def _projection(K):
    """Per-subject Hoeffding projection of a pair kernel (sum over partners)."""
    n = K.shape[0]
    return (K.sum(axis=1) + K.sum(axis=0)) / (n - 1)


def compare_c(time, event, risk_a, risk_b, tau=None, weighted=False) -> CompareCResult:
    """Paired test of two concordance indices over the same subjects.

    Each index is a ratio of U-statistics (concordant over comparable pairs);
    the variance of their difference comes from the first-order (Hoeffding)
    projection with the delta method. ``weighted`` applies Uno's censoring
    weights, held fixed at their plug-in values.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    ra = np.asarray(risk_a, dtype=np.float64)
    rb = np.asarray(risk_b, dtype=np.float64)
    if not (time.shape == event.shape == ra.shape == rb.shape):
        raise DataError("compare_c: inputs must align")
    n = time.size
    if tau is None:
        tau = np.inf
    if weighted:
        G = km_censoring_survival(time, event)
        w = np.where(event & (time < tau), 1.0 / G.left_limit(time) ** 2, 0.0)
    else:
        w = np.ones(n)
    comp, Ka, Kb = _pair_kernels(time, event, ra, rb, tau, w)
    D = comp.sum()
    if n < 2 or D <= 0:
        raise InsufficientData("compare_c: no comparable pairs")
    c_a, c_b = Ka.sum() / D, Kb.sum() / D
    scale = n * (n - 1)
    psi_d = _projection(comp)
    phi = (_projection(Ka) - c_a * psi_d - _projection(Kb) + c_b * psi_d) / (D / scale)
    var = float(np.var(phi, ddof=1) / n) if n > 2 else 0.0
    diff = c_a - c_b
    z = 0.0 if var <= 1e-15 else diff / math.sqrt(var)
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return CompareCResult(float(c_a), float(c_b), float(z), p, var)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapResult:
    lo: float
    hi: float
    n_valid: int
    n_dropped: int


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for replicate ``b``; same draws serially or in parallel."""
    return np.random.default_rng([seed, b])


def bootstrap_replicates(statistic: Callable, data, B: int = 1000, seed: int = 0) -> np.ndarray:
    """Statistic evaluated on ``B`` subject-level resamples; shape (B, ...)."""
    if B < 1:
        raise ValueError("B must be >= 1")
    n = len(data)
    if n == 0:
        raise DataError("cannot bootstrap an empty dataset")
    take = data.take if hasattr(data, "take") else (lambda idx: data[idx])
    out = []
    for b in range(B):
        idx = replicate_rng(seed, b).integers(n, size=n)
        out.append(np.asarray(statistic(take(idx)), dtype=np.float64))
    return np.array(out)


def percentile_interval(reps: np.ndarray, alpha: float = 0.05):
    """Per-component percentile interval ignoring nan replicates."""
    reps = np.asarray(reps, dtype=np.float64)
    flat = reps.reshape(reps.shape[0], -1)
    lo, hi, valid = [], [], []
    for col in flat.T:
        ok = col[np.isfinite(col)]
        valid.append(ok.size)
        if ok.size == 0:
            lo.append(np.nan)
            hi.append(np.nan)
        else:
            lo.append(np.percentile(ok, 100 * alpha / 2))
            hi.append(np.percentile(ok, 100 * (1 - alpha / 2)))
    shape = reps.shape[1:]
    return np.reshape(lo, shape), np.reshape(hi, shape), np.reshape(valid, shape)


def bootstrap_ci(statistic: Callable, data, B: int = 1000, seed: int = 0, alpha: float = 0.05) -> BootstrapResult:
    """95% percentile interval (linear interpolation) of a scalar statistic.

    Replicates where the statistic is ``nan`` are dropped and counted.
    """
    reps = bootstrap_replicates(statistic, data, B, seed)
    if reps.ndim != 1:
        raise ValueError("bootstrap_ci expects a scalar statistic")
    ok = np.isfinite(reps)
    if not ok.any():
        raise InsufficientData("every bootstrap replicate was insufficient")
    lo, hi = np.percentile(reps[ok], [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return BootstrapResult(float(lo), float(hi), int(ok.sum()), int((~ok).sum()))


# ---------------------------------------------------------------------------
# subgroup report


@dataclass
class Estimate:
    point: float
    lo: float
    hi: float
    n_cases: int
    n_controls: int
    insufficient: bool


@dataclass
class MetricReport:
    subgroup: str
    n: int
    c_index: Estimate
    td_auc: dict[int, Estimate]
    p_values: dict[str, float] = field(default_factory=dict)

    @property
    def insufficient(self) -> dict[str, bool]:
        out = {"c_index": self.c_index.insufficient}
        out.update({f"auc_{t}yr": e.insufficient for t, e in self.td_auc.items()})
        return out


def subgroup_masks(data: RiskDataset, exclude_days: int = 180) -> dict[str, np.ndarray]:
    """Row selections for every reported subgroup.

    ``exclude_lt180d`` drops subjects whose event occurred less than
    ``exclude_days`` after the exam. Density groups are taken over all cases.
    """
    n = len(data)
    masks = {"all": np.ones(n, dtype=bool)}
    if data.time_days is not None:
        masks["exclude_lt180d"] = ~(data.event & (data.time_days < exclude_days))
    if data.density_change is not None:
        masks["change"] = data.density_change == "change"
        masks["no_change"] = data.density_change == "no_change"
    if data.density_level is not None:
        masks["fatty"] = data.density_level == "fatty"
        masks["dense"] = data.density_level == "dense"
    return masks


def _metric_vector(horizons, tau):
    def stat(d: RiskDataset):
        vals = [uno_c_index(d, tau)]
        vals += [td_auc(d, t) for t in horizons]
        return np.array(vals)

    return stat


def evaluate_report(
    data: RiskDataset,
    name: str = "all",
    reference: RiskDataset | None = None,
    horizons: Sequence[int] = (1, 2, 3, 4),
    tau: float | None = None,
    n_boot: int = 1000,
    seed: int = 0,
    min_cases: int = 5,
    min_controls: int = 5,
) -> MetricReport:
    """C-index and per-horizon td-AUC with bootstrap CIs for one cell."""
    tau = data.horizon if tau is None else tau
    for t in horizons:
        if data.horizon > 1 and t > data.horizon:
            raise DataError(f"horizon {t} exceeds score horizon {data.horizon}")
    n = len(data)
    stat = _metric_vector(horizons, tau)
    if n:
        point = stat(data)
        reps = bootstrap_replicates(stat, data, n_boot, seed)
        lo, hi, _ = percentile_interval(reps)
    else:
        point = lo = hi = np.full(1 + len(horizons), np.nan)

    c_cases = int(np.sum(data.event & (data.time_years < tau))) if n else 0
    c_ctrl = n - c_cases
    c_bad = c_cases < min_cases or n_comparable_events(data, tau) < min_cases or not np.isfinite(point[0])
    c_est = Estimate(float(point[0]), float(lo[0]), float(hi[0]), c_cases, c_ctrl, bool(c_bad))
    aucs = {}
    for k, t in enumerate(horizons, start=1):
        nc = int(np.sum(data.event & (data.time_years <= t))) if n else 0
        nk = int(np.sum(data.time_years > t)) if n else 0
        bad = nc < min_cases or nk < min_controls or not np.isfinite(point[k])
        aucs[t] = Estimate(float(point[k]), float(lo[k]), float(hi[k]), nc, nk, bool(bad))
    report = MetricReport(name, n, c_est, aucs)

    if reference is not None and n:
        if not np.array_equal(reference.ids, data.ids):
            raise DataError("reference scores are not aligned with the evaluated subjects")
        if not c_est.insufficient:
            res = compare_c(data.time_years, data.event, data.risk, reference.risk, tau=tau)
            report.p_values["c_index_vs_baseline"] = res.p
        for t in horizons:
            if aucs[t].insufficient:
                continue
            keep, y = horizon_labels(data, t)
            res = delong_test(data.horizon_scores(t)[keep], reference.horizon_scores(t)[keep], y)
            report.p_values[f"auc_{t}yr_vs_baseline"] = res.p
    return report


def subgroup_report(
    data: RiskDataset,
    exclusions: int = 180,
    groupings: Sequence[str] = SUBGROUPS,
    reference: RiskDataset | None = None,
    **kw,
) -> list[MetricReport]:
    """Reports for all cases, the late-event cohort and the density groups."""
    masks = subgroup_masks(data, exclusions)
    out = []
    for name in groupings:
        if name not in masks:
            raise DataError(f"subgroup {name!r} needs tags missing from the scores")
        idx = np.flatnonzero(masks[name])
        ref = None if reference is None else reference.take(idx)
        out.append(evaluate_report(data.take(idx), name, reference=ref, **kw))
    return out


REPORT_COLUMNS = ("split", "variant", "subgroup", "metric", "horizon", "point", "lo", "hi",
                  "n", "n_cases", "n_controls", "insufficient")


def report_rows(reports: Sequence[MetricReport], split: str = "", variant: str = ""):
    rows = []
    for r in reports:
        cells = [("c_index", "", r.c_index)] + [("td_auc", t, e) for t, e in r.td_auc.items()]
        for metric, horizon, e in cells:
            rows.append({
                "split": split, "variant": variant, "subgroup": r.subgroup, "metric": metric,
                "horizon": horizon, "point": e.point, "lo": e.lo, "hi": e.hi, "n": r.n,
                "n_cases": e.n_cases, "n_controls": e.n_controls, "insufficient": int(e.insufficient),
            })
        for key, p in r.p_values.items():
            rows.append({
                "split": split, "variant": variant, "subgroup": r.subgroup, "metric": f"p:{key}",
                "horizon": "", "point": p, "lo": "", "hi": "", "n": r.n,
                "n_cases": "", "n_controls": "", "insufficient": 0,
            })
    return rows


def write_report_csv(rows, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def format_table(reports: Sequence[MetricReport]) -> str:
    """Fixed-width table: one row per subgroup, C-index then AUC columns."""
    if not reports:
        return ""
    horizons = list(reports[0].td_auc)

    def cell(e: Estimate):
        if e.insufficient:
            return "-".center(19)
        return f"{e.point:.3f} ({e.lo:.3f}-{e.hi:.3f})"

    head = f"{'subgroup':<15}{'n':>6}  {'C-index':<21}" + "".join(f"{f'{t}-yr AUC':<21}" for t in horizons)
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(
            f"{r.subgroup:<15}{r.n:>6}  {cell(r.c_index):<21}"
            + "".join(f"{cell(r.td_auc[t]):<21}" for t in horizons)
        )
        if r.p_values:
            lines.append(" " * 23 + "  ".join(f"{k}={v:.3g}" for k, v in r.p_values.items()))
    return "\n".join(lines)
