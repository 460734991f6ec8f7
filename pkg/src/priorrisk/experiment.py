"""Glue between cohorts, training and evaluation (used by the CLI and scripts)."""

from __future__ import annotations

import numpy as np

from .core import DataError, build_label
from .metrics import RiskDataset, compare_c, subgroup_report, uno_c_index
from .model import ModelConfig, ModelParams, init_params, predict_batch
from .synthdata import Cohort, CohortConfig, generate_cohort
from .train import TrainConfig, TrainingSample, train

DEFAULT_TRAIN_COHORT = CohortConfig(n_patients=2000, seed=1)
DEFAULT_TEST_COHORT = CohortConfig(n_patients=600, seed=2)
# Short-schedule training for desk-scale cohorts: 2000 steps at lr0=0.05.
DEFAULT_EXPERIMENT_TRAIN = TrainConfig(lr0=0.05, total_steps=2000, batch_size=32, seed=0)


def training_samples(cohort: Cohort, horizon: int) -> list[TrainingSample]:
    out = []
    for p in cohort.patients:
        if not p.priors:
            raise DataError(f"patient {p.patient_id} has no prior exam")
        label = build_label(p.outcome(), horizon)
        out.append(TrainingSample(p.current, list(p.priors), label.h, label.mask))
    return out


def score_cohort(cohort: Cohort, params: ModelParams) -> RiskDataset:
    """Score each patient's current exam paired with its closest prior."""
    cfg = params.config
    Xc = np.stack([p.current.features for p in cohort.patients])
    Xp = np.stack([p.closest_prior().features for p in cohort.patients])
    H = predict_batch(Xc, Xp, params)
    return _risk_dataset(cohort, H[:, -1], H)


def oracle_scores(cohort: Cohort, horizon: int = 5) -> RiskDataset:
    """Ground-truth hazard as the risk score at every horizon."""
    lam = np.array([p.true_hazard for p in cohort.patients], dtype=np.float64)
    if np.any(~np.isfinite(lam)):
        raise DataError("cohort carries no ground-truth hazard")
    return _risk_dataset(cohort, lam, np.repeat(lam[:, None], horizon, axis=1))


def _risk_dataset(cohort: Cohort, risk, scores) -> RiskDataset:
    ps = cohort.patients
    return RiskDataset(
        ids=[p.patient_id for p in ps],
        risk=risk,
        scores=scores,
        time_years=[p.outcome().time_years for p in ps],
        event=[p.event for p in ps],
        time_days=[p.time_days for p in ps],
        density_change=[p.density_change for p in ps],
        density_level=[p.density_level for p in ps],
    )


def fit_variant(cohort: Cohort, variant: str, train_cfg: TrainConfig,
                model_cfg: ModelConfig | None = None, init_seed: int = 0):
    base = model_cfg or ModelConfig(feature_dim=cohort.feature_dim)
    cfg = ModelConfig(**{**base.__dict__, "variant": variant})
    params0 = init_params(cfg, init_seed)
    return train(training_samples(cohort, cfg.horizon), params0, train_cfg)


def run_ablation(train_cohort: Cohort, test_cohort: Cohort, train_cfg: TrainConfig | None = None,
                 model_cfg: ModelConfig | None = None, n_boot: int = 1000, seed: int = 0,
                 variants=("baseline", "rp_plus", "prime")):
    """Train every variant, score the test cohort and build subgroup reports.

    Returns a dict with per-variant params, histories, held-out scores and
    reports (p-values against the baseline variant), plus the prime-vs-baseline
    compareC result.
    """
    train_cfg = train_cfg or DEFAULT_EXPERIMENT_TRAIN
    out = {"params": {}, "history": {}, "scores": {}, "reports": {}}
    for v in variants:
        params, hist = fit_variant(train_cohort, v, train_cfg, model_cfg)
        out["params"][v] = params
        out["history"][v] = hist
        out["scores"][v] = score_cohort(test_cohort, params)
    ref = out["scores"].get("baseline")
    for v in variants:
        out["reports"][v] = subgroup_report(
            out["scores"][v], reference=None if v == "baseline" else ref, n_boot=n_boot, seed=seed
        )
    if "prime" in variants and ref is not None:
        s = out["scores"]["prime"]
        out["compare"] = compare_c(s.time_years, s.event, s.risk, ref.risk, tau=s.horizon)
    out["c_index"] = {v: uno_c_index(out["scores"][v]) for v in variants}
    return out


def default_cohorts():
    return generate_cohort(DEFAULT_TRAIN_COHORT), generate_cohort(DEFAULT_TEST_COHORT)
