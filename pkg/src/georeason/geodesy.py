"""Great-circle distance, GeoGuessr scoring and multi-level accuracy."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

EARTH_RADIUS_KM = 6371.0
SCORE_MAX = 5000.0
SCORE_SCALE_KM = 1492.7


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lon)


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180]; values already in range are untouched."""
    if -180.0 <= lon <= 180.0:
        return lon
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped < 0:
        wrapped += 360.0
    return wrapped - 180.0


class AccuracyLevel(enum.Enum):
    STREET = ("Street", 1.0)
    CITY = ("City", 25.0)
    REGION = ("Region", 200.0)
    COUNTRY = ("Country", 750.0)
    CONTINENT = ("Continent", 2500.0)

    def __init__(self, label: str, threshold_km: float):
        self.label = label
        self.threshold_km = threshold_km


LEVELS: tuple[AccuracyLevel, ...] = tuple(AccuracyLevel)


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    delta = min(1.0, max(0.0, math.sqrt(h)))
    return 2.0 * EARTH_RADIUS_KM * math.asin(delta)


def geoguessr_score(d: float) -> float:
    if math.isnan(d) or d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    return SCORE_MAX * math.exp(-d / SCORE_SCALE_KM)


def level_hits(d: float) -> frozenset[AccuracyLevel]:
    """Levels whose threshold is at least ``d`` (the boundary counts as a hit)."""
    if math.isnan(d) or d < 0:
        raise ValueError(f"distance must be >= 0, got {d}")
    return frozenset(level for level in LEVELS if d <= level.threshold_km)


@dataclass(frozen=True)
class ScoredRecord:
    """Minimal view of a prediction used for aggregation.

    ``distance_km`` is ``math.inf`` for failed guesses.
    """

    distance_km: float
    score: float

    @classmethod
    def failed(cls) -> "ScoredRecord":
        return cls(math.inf, 0.0)

    @property
    def is_failed(self) -> bool:
        return math.isinf(self.distance_km)


@dataclass
class EvaluationReport:
    accuracy_pct: dict[AccuracyLevel, float]
    mean_distance_km: Optional[float]
    mean_score: float
    n: int
    n_failed: int = 0
    median_distance_km: Optional[float] = field(default=None)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_failed": self.n_failed,
            "accuracy_pct": {level.label: self.accuracy_pct[level] for level in LEVELS},
            "mean_distance_km": self.mean_distance_km,
            "median_distance_km": self.median_distance_km,
            "mean_score": self.mean_score,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        by_label = {level.label: level for level in LEVELS}
        return cls(
            accuracy_pct={by_label[k]: float(v) for k, v in data["accuracy_pct"].items()},
            mean_distance_km=data.get("mean_distance_km"),
            mean_score=float(data["mean_score"]),
            n=int(data["n"]),
            n_failed=int(data.get("n_failed", 0)),
            median_distance_km=data.get("median_distance_km"),
        )


def _as_scored(record) -> ScoredRecord:
    if isinstance(record, ScoredRecord):
        return record
    distance = getattr(record, "distance_km", None)
    score = getattr(record, "score", None)
    if distance is None or score is None:
        return ScoredRecord.failed()
    return ScoredRecord(float(distance), float(score))


def aggregate(records: Iterable) -> EvaluationReport:
    """Summarize scored predictions into per-level accuracy, mean distance and score.

    Accepts :class:`ScoredRecord` or anything with ``distance_km``/``score``
    attributes; a missing distance marks the record as a failed guess, which
    misses every level, scores 0, and is left out of the distance mean.
    """
    scored: Sequence[ScoredRecord] = [_as_scored(r) for r in records]
    n = len(scored)
    if n == 0:
        raise ValueError("cannot aggregate an empty record set")

    hits = {level: 0 for level in LEVELS}
    finite: list[float] = []
    score_sum = 0.0
    for rec in scored:
        if rec.is_failed:
            continue
        finite.append(rec.distance_km)
        score_sum += rec.score
        for level in level_hits(rec.distance_km):
            hits[level] += 1

    finite.sort()
    if finite:
        mean_d = math.fsum(finite) / len(finite)
        mid = len(finite) // 2
        median_d = finite[mid] if len(finite) % 2 else (finite[mid - 1] + finite[mid]) / 2.0
    else:
        mean_d = median_d = None

    return EvaluationReport(
        accuracy_pct={level: 100.0 * hits[level] / n for level in LEVELS},
        mean_distance_km=mean_d,
        mean_score=score_sum / n,
        n=n,
        n_failed=n - len(finite),
        median_distance_km=median_d,
    )


def score_prediction(prediction: GeoPoint, truth: GeoPoint) -> ScoredRecord:
    d = haversine_km(truth, prediction)
    return ScoredRecord(d, geoguessr_score(d))
