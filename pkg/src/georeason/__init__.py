"""Reasoning-based image geo-localization: pipeline orchestration and evaluation."""

from georeason.geodesy import (
    AccuracyLevel,
    EvaluationReport,
    GeoPoint,
    aggregate,
    geoguessr_score,
    haversine_km,
    level_hits,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyLevel",
    "EvaluationReport",
    "GeoPoint",
    "aggregate",
    "geoguessr_score",
    "haversine_km",
    "level_hits",
]
