"""Domain types, survival label construction and prior-exam pairing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DENSITIES = ("A", "B", "C", "D")
FATTY = frozenset({"A", "B"})
DEFAULT_HORIZON = 5


class PriorRiskError(Exception):
    """Base class for all package errors."""


class ConfigError(PriorRiskError, ValueError):
    pass


class DataError(PriorRiskError, ValueError):
    pass


class SchemaError(DataError):
    pass


class InvalidLabelError(DataError):
    pass


class MissingPriorError(DataError):
    pass


class NumericError(PriorRiskError, ArithmeticError):
    pass


@dataclass(frozen=True)
class ExamRecord:
    patient_id: str
    exam_id: str
    acquisition_time: int
    features: np.ndarray = field(repr=False)
    density: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise DataError(f"exam {self.exam_id}: features must be a vector")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"exam {self.exam_id}: non-finite feature value")
        if self.acquisition_time < 0:
            raise DataError(f"exam {self.exam_id}: negative acquisition_time")
        if self.density not in DENSITIES:
            raise DataError(f"exam {self.exam_id}: unknown density {self.density!r}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    def __eq__(self, other):
        if not isinstance(other, ExamRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.exam_id == other.exam_id
            and self.acquisition_time == other.acquisition_time
            and self.density == other.density
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class SurvivalOutcome:
    event: bool
    time_years: int


@dataclass(frozen=True)
class LabelPair:
    h: np.ndarray
    mask: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.h)


def years_from_days(days: int) -> int:
    """Year index of a day offset: days 1..365 fall in year 1, and so on."""
    return max(1, -(-int(days) // 365))


def build_label(outcome: SurvivalOutcome, T: int = DEFAULT_HORIZON) -> LabelPair:
    """Ground-truth cumulative vector and loss mask over horizons 1..T.

    An event at year ``t_e`` gives ``h(t) = 1`` for ``t >= t_e`` and a full
    mask. A subject censored at year ``C`` has ``h = 0`` and contributes only
    at horizons ``t < C``.
    """
    if T < 1:
        raise InvalidLabelError(f"horizon T must be >= 1, got {T}")
    if outcome.time_years < 1:
        raise InvalidLabelError(f"time_years must be >= 1, got {outcome.time_years}")
    t = np.arange(1, T + 1)
    if outcome.event:
        h = (t >= outcome.time_years).astype(np.float64)
        mask = np.ones(T)
    else:
        h = np.zeros(T)
        mask = (t < outcome.time_years).astype(np.float64)
    return LabelPair(h=h, mask=mask)


def _check_priors(current: ExamRecord, priors: Sequence[ExamRecord]) -> None:
    if not priors:
        raise MissingPriorError(f"exam {current.exam_id} has no prior exam")
    for p in priors:
        if p.patient_id != current.patient_id:
            raise MissingPriorError(
                f"prior {p.exam_id} belongs to patient {p.patient_id}, "
                f"not {current.patient_id}"
            )
        if p.acquisition_time >= current.acquisition_time:
            raise MissingPriorError(
                f"prior {p.exam_id} (day {p.acquisition_time}) does not precede "
                f"current exam {current.exam_id} (day {current.acquisition_time})"
            )


def pair_prior_training(current, priors, rng_seed=None) -> ExamRecord:
    """Uniformly random prior, as used while training.

    ``rng_seed`` may be an int seed or an existing ``numpy.random.Generator``.
    """
    _check_priors(current, priors)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return priors[int(rng.integers(len(priors)))]


def pair_prior_inference(current, priors) -> ExamRecord:
    """Closest preceding prior; equal dates resolve to the smallest exam_id."""
    _check_priors(current, priors)
    return min(priors, key=lambda p: (-p.acquisition_time, p.exam_id))


def is_fatty(density: str) -> bool:
    return density in FATTY
