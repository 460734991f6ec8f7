"""Synthetic screening cohorts where risk depends on change between exams.

Each patient has 2+ exams roughly a year apart. The last exam is the
current (index) exam, earlier ones are priors. Exam features are

    embedding(density) + texture + noise

with the texture vector performing a random walk whose step size varies by
patient. The yearly hazard from the current exam onward is

    lambda0 * exp(beta_density[d] + beta_change * changed + beta_texture * |drift|)

where ``changed`` and ``drift`` compare the current exam with its closest
prior and ``d`` blends current and prior density by ``prior_density_weight``.
Optionally, exams shortly before diagnosis carry a visible lesion signal,
which makes short-horizon prediction easier than long-horizon.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import (
    DENSITIES,
    ConfigError,
    DataError,
    ExamRecord,
    MissingPriorError,
    SchemaError,
    SurvivalOutcome,
    is_fatty,
    pair_prior_inference,
    years_from_days,
)

_DEFAULT_TRANSITION = (
    (0.80, 0.20, 0.00, 0.00),
    (0.10, 0.80, 0.10, 0.00),
    (0.00, 0.10, 0.80, 0.10),
    (0.00, 0.00, 0.20, 0.80),
)


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 2000
    exams_per_patient: tuple[int, int] = (2, 4)
    feature_dim: int = 32
    initial_density: tuple[float, ...] = (1 / 6, 1 / 3, 1 / 3, 1 / 6)
    transition: tuple[tuple[float, ...], ...] = _DEFAULT_TRANSITION
    beta_density: tuple[float, ...] = (0.0, 0.7, 1.4, 2.1)
    beta_change: float = 2.0
    beta_texture: float = 0.5
    baseline_hazard: float = 0.015
    censor_day: int = 4000
    first_exam_max_day: int = 2200
    spacing_days: tuple[int, int] = (300, 450)
    density_scale: float = 1.0
    texture_scale: float = 0.2
    drift_max: float = 1.5
    noise_scale: float = 0.1
    lesion_strength: float = 1.0
    lesion_window_days: int = 180
    prior_density_weight: float = 1.0
    seed: int = 0
    world_seed: int = 12345

    def __post_init__(self):
        for name in ("exams_per_patient", "initial_density", "beta_density", "spacing_days"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "transition", tuple(tuple(r) for r in self.transition))
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        lo, hi = self.exams_per_patient
        if lo < 2 or hi < lo:
            raise ConfigError("exams_per_patient must be a range (lo, hi) with lo >= 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        P = np.asarray(self.transition, dtype=float)
        if P.shape != (4, 4) or np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
            raise ConfigError("transition must be a 4x4 row-stochastic matrix")
        p0 = np.asarray(self.initial_density, dtype=float)
        if p0.shape != (4,) or np.any(p0 < 0) or not np.isclose(p0.sum(), 1.0):
            raise ConfigError("initial_density must be 4 probabilities summing to 1")
        if not 0.0 <= self.prior_density_weight <= 1.0:
            raise ConfigError("prior_density_weight must lie in [0, 1]")
        if len(self.beta_density) != 4:
            raise ConfigError("beta_density needs one log-hazard per density category")
        if not self.baseline_hazard > 0:
            raise ConfigError("baseline_hazard must be positive")
        if self.censor_day <= 0:
            raise ConfigError("censor_day must be positive")
        s_lo, s_hi = self.spacing_days
        if s_lo < 1 or s_hi < s_lo:
            raise ConfigError("spacing_days must be a positive range")
        if self.first_exam_max_day + (hi - 1) * s_hi >= self.censor_day:
            raise ConfigError("censor_day must fall after the latest possible current exam")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "CohortConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read cohort config {path}: {exc}") from exc

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass
class Patient:
    patient_id: str
    exams: list[ExamRecord]
    event: bool
    outcome_day: int
    true_hazard: float | None = None
    density_change: str | None = None
    density_level: str | None = None

    @property
    def current(self) -> ExamRecord:
        return self.exams[-1]

    @property
    def priors(self) -> list[ExamRecord]:
        return self.exams[:-1]

    @property
    def time_days(self) -> int:
        return self.outcome_day - self.current.acquisition_time

    def outcome(self) -> SurvivalOutcome:
        return SurvivalOutcome(event=self.event, time_years=years_from_days(self.time_days))

    def closest_prior(self) -> ExamRecord:
        return pair_prior_inference(self.current, self.priors)


@dataclass
class Cohort:
    patients: list[Patient]
    feature_dim: int
    config: CohortConfig | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.patients)

    def n_exams(self) -> int:
        return sum(len(p.exams) for p in self.patients)

    def summary(self) -> dict:
        n = len(self.patients)
        events = sum(p.event for p in self.patients)
        return {
            "patients": n,
            "exams": self.n_exams(),
            "events": events,
            "censored": n - events,
            "censoring_rate": (n - events) / n if n else float("nan"),
        }


def _world(cfg: CohortConfig):
    """Density embeddings and lesion direction shared across cohorts."""
    rng = np.random.default_rng(cfg.world_seed)
    D = cfg.feature_dim
    emb = rng.normal(size=(4, D))
    emb *= cfg.density_scale / np.linalg.norm(emb, axis=1, keepdims=True)
    lesion = rng.normal(size=D)
    lesion /= np.linalg.norm(lesion)
    return emb, lesion


def generate_cohort(cfg: CohortConfig) -> Cohort:
    rng = np.random.default_rng(cfg.seed)
    emb, lesion_dir = _world(cfg)
    D = cfg.feature_dim
    P = np.asarray(cfg.transition)
    p0 = np.asarray(cfg.initial_density)
    beta_d = np.asarray(cfg.beta_density)
    lo, hi = cfg.exams_per_patient
    s_lo, s_hi = cfg.spacing_days
    patients = []
    for i in range(cfg.n_patients):
        pid = f"P{i:05d}"
        n_exams = int(rng.integers(lo, hi + 1))
        day = int(rng.integers(0, cfg.first_exam_max_day + 1))
        dens = int(rng.choice(4, p=p0))
        texture = rng.normal(0.0, cfg.texture_scale, size=D)
        step_size = rng.uniform(0.0, cfg.drift_max) / math.sqrt(D)
        days, densities, textures = [], [], []
        for k in range(n_exams):
            if k > 0:
                day += int(rng.integers(s_lo, s_hi + 1))
                dens = int(rng.choice(4, p=P[dens]))
                texture = texture + rng.normal(0.0, step_size, size=D)
            days.append(day)
            densities.append(dens)
            textures.append(texture)
        changed = densities[-1] != densities[-2]
        drift = float(np.linalg.norm(textures[-1] - textures[-2]))
        w = cfg.prior_density_weight
        dens_effect = (1.0 - w) * beta_d[densities[-1]] + w * beta_d[densities[-2]]
        lam = cfg.baseline_hazard * math.exp(dens_effect + cfg.beta_change * changed + cfg.beta_texture * drift)
        event_days = max(1, math.ceil(rng.exponential(1.0 / lam) * 365.0))
        current_day = days[-1]
        if current_day + event_days <= cfg.censor_day:
            event, outcome_day = True, current_day + event_days
        else:
            event, outcome_day = False, cfg.censor_day
        noise = rng.normal(0.0, cfg.noise_scale, size=(n_exams, D))
        exams = []
        for k in range(n_exams):
            x = emb[densities[k]] + textures[k] + noise[k]
            if k == n_exams - 1 and event and cfg.lesion_strength > 0 and event_days <= cfg.lesion_window_days:
                x = x + cfg.lesion_strength * (1.0 - event_days / cfg.lesion_window_days) * lesion_dir
            exams.append(
                ExamRecord(
                    patient_id=pid,
                    exam_id=f"{pid}-E{k}",
                    acquisition_time=days[k],
                    features=x,
                    density=DENSITIES[densities[k]],
                )
            )
        patients.append(Patient(pid, exams, event, outcome_day, true_hazard=lam))
    return Cohort(tag_groups(patients), D, cfg)


def tag_groups(patients: list[Patient]) -> list[Patient]:
    """Attach density_change / density_level from the closest-prior pairing."""
    out = []
    for p in patients:
        if not p.priors:
            raise MissingPriorError(f"patient {p.patient_id} has no prior exam")
        prior = p.closest_prior()
        cur = p.current
        out.append(
            replace(
                p,
                density_change="change" if prior.density != cur.density else "no_change",
                density_level="fatty" if is_fatty(cur.density) else "dense",
            )
        )
    return out


# ---------------------------------------------------------------------------
# CSV
#
# One row per exam:
#   patient_id, exam_id, acquisition_day, density, event, outcome_day,
#   feature_0 .. feature_{D-1} [, true_hazard]
# ``event`` is 0/1 and, with ``outcome_day``, is repeated on every exam row of
# a patient. ``true_hazard`` is optional (generator ground truth).

BASE_COLUMNS = ("patient_id", "exam_id", "acquisition_day", "density", "event", "outcome_day")


def write_csv(cohort: Cohort, path) -> None:
    D = cohort.feature_dim
    with_truth = any(p.true_hazard is not None for p in cohort.patients)
    header = list(BASE_COLUMNS) + [f"feature_{j}" for j in range(D)]
    if with_truth:
        header.append("true_hazard")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in cohort.patients:
            for e in p.exams:
                row = [p.patient_id, e.exam_id, e.acquisition_time, e.density, int(p.event), p.outcome_day]
                row += [repr(float(v)) for v in e.features]
                if with_truth:
                    row.append("" if p.true_hazard is None else repr(float(p.true_hazard)))
                w.writerow(row)


def _parse_int(value, column, line):
    try:
        return int(value)
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not an integer: {value!r}") from None


def _parse_float(value, column, line):
    try:
        v = float(value)
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: non-finite value in column {column!r}")
    return v


def load_csv(path, feature_dim: int | None = None) -> Cohort:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty dataset file")
        for col in BASE_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        feat_cols = [c for c in header if c.startswith("feature_")]
        D = feature_dim if feature_dim is not None else len(feat_cols)
        if D == 0:
            raise SchemaError(f"{path}: missing column 'feature_0'")
        for j in range(D):
            if f"feature_{j}" not in header:
                raise SchemaError(f"{path}: missing column 'feature_{j}'")
        col = {name: k for k, name in enumerate(header)}
        fidx = [col[f"feature_{j}"] for j in range(D)]
        has_truth = "true_hazard" in col
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty dataset (no exam rows)")

    by_patient: dict[str, dict] = {}
    seen = set()
    for ln, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(f"line {ln}: expected {len(header)} fields, got {len(row)}")
        pid, eid = row[col["patient_id"]], row[col["exam_id"]]
        if (pid, eid) in seen:
            raise DataError(f"line {ln}: duplicate exam ({pid}, {eid})")
        seen.add((pid, eid))
        exam = ExamRecord(
            patient_id=pid,
            exam_id=eid,
            acquisition_time=_parse_int(row[col["acquisition_day"]], "acquisition_day", ln),
            features=np.array([_parse_float(row[k], header[k], ln) for k in fidx]),
            density=row[col["density"]],
        )
        event = _parse_int(row[col["event"]], "event", ln)
        if event not in (0, 1):
            raise SchemaError(f"line {ln}: event must be 0 or 1")
        outcome_day = _parse_int(row[col["outcome_day"]], "outcome_day", ln)
        truth = None
        if has_truth and row[col["true_hazard"]] != "":
            truth = _parse_float(row[col["true_hazard"]], "true_hazard", ln)
        rec = by_patient.setdefault(pid, {"exams": [], "event": event, "outcome_day": outcome_day, "truth": truth})
        if rec["event"] != event or rec["outcome_day"] != outcome_day:
            raise DataError(f"line {ln}: inconsistent outcome for patient {pid}")
        rec["exams"].append(exam)

    patients = []
    for pid, rec in by_patient.items():
        exams = sorted(rec["exams"], key=lambda e: (e.acquisition_time, e.exam_id))
        p = Patient(pid, exams, bool(rec["event"]), rec["outcome_day"], rec["truth"])
        if p.time_days < 1:
            raise DataError(f"patient {pid}: outcome_day must follow the current exam")
        patients.append(p)
    # single-exam patients load untagged; pairing-based commands reject them
    patients = [tag_groups([p])[0] if p.priors else p for p in patients]
    return Cohort(patients, D)
