"""Record files, prediction scoring, and report rendering (text / json / csv + figures)."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Optional, Sequence

from georeason import plots
from georeason.corpus import Sample
from georeason.geodesy import LEVELS, EvaluationReport, GeoPoint, ScoredRecord, aggregate, score_prediction
from georeason.pipeline import PredictionRecord, evaluate_records

TABLE_LEVELS = tuple(reversed(LEVELS))  # Continent ... Street


class RecordFileError(ValueError):
    pass


def load_records(path) -> list[PredictionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(PredictionRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordFileError(f"{path}:{lineno}: malformed record: {exc}") from None
    if not records:
        raise RecordFileError(f"{path}: no records")
    return records


def write_records(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def report_from_records(records: Sequence[PredictionRecord]) -> EvaluationReport:
    report = evaluate_records(records)
    if report is None:
        raise RecordFileError("no records carry ground truth; nothing to score")
    return report


# --- scoring external predictions ---------------------------------------


def _prediction_point(row: dict) -> Optional[GeoPoint]:
    g = row.get("guess") if "guess" in row else row
    if not isinstance(g, dict):
        return None
    lat = g.get("latitude", g.get("lat"))
    lon = g.get("longitude", g.get("lon"))
    try:
        lat, lon = float(lat), float(lon)
        return GeoPoint(lat, lon)
    except (TypeError, ValueError):
        return None


def score_predictions(pred_path, truth: Sequence[Sample]) -> tuple[EvaluationReport, list[dict]]:
    """Join predictions to truth by id and score them.

    Prediction lines are either pipeline records (``sample_id`` + ``guess``)
    or flat ``{"id", "latitude", "longitude"}`` objects. Unusable coordinates
    count as failed guesses.
    """
    by_id = {s.id: s for s in truth}
    rows = []
    with open(pred_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise RecordFileError(f"{pred_path}:{lineno}: invalid JSON: {exc}") from None
            pid = row.get("sample_id", row.get("id")) if isinstance(row, dict) else None
            if not isinstance(pid, str):
                raise RecordFileError(f"{pred_path}:{lineno}: missing id")
            rows.append((lineno, pid, row))
    if not rows:
        raise RecordFileError(f"{pred_path}: no predictions")
    unknown = [pid for _, pid, _ in rows if pid not in by_id]
    if unknown:
        raise RecordFileError(f"prediction ids missing from truth: {', '.join(unknown)}")
    no_coords = [pid for _, pid, _ in rows if by_id[pid].truth is None]
    if no_coords:
        raise RecordFileError(f"truth has no coordinates for: {', '.join(no_coords)}")

    scored, details = [], []
    for _, pid, row in rows:
        point = _prediction_point(row)
        rec = score_prediction(point, by_id[pid].truth) if point else ScoredRecord.failed()
        scored.append(rec)
        details.append(
            {
                "id": pid,
                "distance_km": None if rec.is_failed else rec.distance_km,
                "score": rec.score,
                "levels": [lv.label for lv in LEVELS if not rec.is_failed and rec.distance_km <= lv.threshold_km],
            }
        )
    return aggregate(scored), details


# --- rendering ----------------------------------------------------------


def render_json(report: EvaluationReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


CSV_COLUMNS = (
    ["n", "n_failed"]
    + [f"{lv.label.lower()}_pct" for lv in TABLE_LEVELS]
    + ["mean_distance_km", "mean_score"]
)


def render_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    row = [report.n, report.n_failed] + [repr(report.accuracy_pct[lv]) for lv in TABLE_LEVELS]
    row += ["" if report.mean_distance_km is None else repr(report.mean_distance_km), repr(report.mean_score)]
    w.writerow(row)
    return buf.getvalue()


def parse_csv_report(text: str) -> dict:
    row = next(csv.DictReader(io.StringIO(text)))
    return {k: (float(v) if v != "" else None) for k, v in row.items()}


def render_text(report: EvaluationReport) -> str:
    head = [f"{lv.label} ({lv.threshold_km:g} km)" for lv in TABLE_LEVELS] + ["Distance (km)", "Score"]
    dist = "-" if report.mean_distance_km is None else f"{report.mean_distance_km:,.1f}"
    vals = [f"{report.accuracy_pct[lv]:.1f}" for lv in TABLE_LEVELS] + [dist, f"{report.mean_score:,.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(head, widths)),
        "  ".join(v.rjust(w) for v, w in zip(vals, widths)),
        f"n={report.n} failed={report.n_failed}",
    ]
    return "\n".join(lines) + "\n"


def write_figures(records: Sequence[PredictionRecord], report: EvaluationReport, out_dir, stem: str = "report") -> list[Path]:
    out_dir = Path(out_dir)
    distances = [r.distance_km for r in records if r.distance_km is not None and math.isfinite(r.distance_km)]
    paths = [
        plots.plot_accuracy(report, out_dir / f"{stem}_accuracy.png"),
        plots.plot_distance_histogram(distances, out_dir / f"{stem}_distance.png"),
    ]
    lengths = [len(r.reasoning.split()) for r in records if r.reasoning.strip()]
    if lengths:
        paths.append(plots.plot_reasoning_lengths(lengths, out_dir / f"{stem}_reasoning_length.png"))
    return paths
