"""Evaluation datasets, guidebook corpora, panorama composition and round filtering.

Dataset JSONL, one sample per line::

    {"id": "s1", "image": "images/s1.png", "lat": 48.1, "lon": -3.2, "country": "France"}

``lat``/``lon``/``country`` may be omitted for unlabeled samples. Image paths
are relative to the JSONL file. Guidebook JSONL::

    {"id": "gb1", "image": "gb/brittany.png", "clue": "Houses in Brittany ...", "source": "toptips"}
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from georeason.geodesy import GeoPoint

GUIDEBOOK_SOURCES = ("toptips", "plonkit", "other")
PANORAMA_HEADINGS = (0, 90, 180, 270)

MIN_TIME_LIMIT_S = 30
MIN_TRANSCRIPT_WORDS = 100
MIN_SCORE = 3400


class DatasetError(ValueError):
    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    country: Optional[str] = None
    truth: Optional[GeoPoint] = None


@dataclass(frozen=True)
class GuidebookEntry:
    id: str
    image_path: str
    clue: str
    source: str = "other"


def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", path, lineno) from None
            if not isinstance(row, dict):
                raise DatasetError("line is not a JSON object", path, lineno)
            yield lineno, row


def _number(row: dict, key: str, path, lineno: int) -> float:
    value = row[key]
    if isinstance(value, bool):
        raise DatasetError(f"{key} is not a number", path, lineno)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DatasetError(f"{key} is not a number: {value!r}", path, lineno) from None


def _sample_from_row(row: dict, base: Path, path, lineno: int, check_images: bool) -> Sample:
    sid = row.get("id")
    image = row.get("image")
    if not isinstance(sid, str) or not sid:
        raise DatasetError("missing or empty 'id'", path, lineno)
    if not isinstance(image, str) or not image:
        raise DatasetError(f"sample {sid!r}: missing 'image'", path, lineno)
    has_lat, has_lon = "lat" in row and row["lat"] is not None, "lon" in row and row["lon"] is not None
    if has_lat != has_lon:
        raise DatasetError(f"sample {sid!r}: lat and lon must be given together", path, lineno)
    truth = None
    if has_lat:
        lat, lon = _number(row, "lat", path, lineno), _number(row, "lon", path, lineno)
        if not -90 <= lat <= 90:
            raise DatasetError(f"sample {sid!r}: latitude {lat} outside [-90, 90]", path, lineno)
        if not -180 <= lon <= 180:
            raise DatasetError(f"sample {sid!r}: longitude {lon} outside [-180, 180]", path, lineno)
        truth = GeoPoint(lat, lon)
    country = row.get("country")
    if country is not None and not isinstance(country, str):
        raise DatasetError(f"sample {sid!r}: country must be a string", path, lineno)
    image_path = os.path.normpath(image if os.path.isabs(image) else base / image)
    if check_images and not os.path.isfile(image_path):
        raise DatasetError(f"sample {sid!r}: image not found: {image_path}", path, lineno)
    return Sample(sid, image_path, country, truth)


def load_dataset(path, check_images: bool = True) -> list[Sample]:
    base = Path(path).resolve().parent
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, row in _read_jsonl(path):
        sample = _sample_from_row(row, base, path, lineno, check_images)
        if sample.id in seen:
            raise DatasetError(f"duplicate id {sample.id!r} (first seen on line {seen[sample.id]})", path, lineno)
        seen[sample.id] = lineno
        samples.append(sample)
    if not samples:
        raise DatasetError("dataset is empty", path)
    return samples


def sample_to_row(sample: Sample, base: Path) -> dict:
    row: dict = {"id": sample.id, "image": os.path.relpath(sample.image_path, base)}
    if sample.truth is not None:
        row["lat"] = sample.truth.lat
        row["lon"] = sample.truth.lon
    if sample.country is not None:
        row["country"] = sample.country
    return row


def save_dataset(samples: Sequence[Sample], path) -> None:
    base = Path(path).resolve().parent
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_row(s, base), ensure_ascii=False) + "\n")


def load_guidebook(path, check_images: bool = True) -> list[GuidebookEntry]:
    base = Path(path).resolve().parent
    entries: list[GuidebookEntry] = []
    seen: set[str] = set()
    for lineno, row in _read_jsonl(path):
        clue = row.get("clue")
        if not isinstance(clue, str) or not clue.strip():
            raise DatasetError("empty clue text", path, lineno)
        image = row.get("image")
        if not isinstance(image, str) or not image:
            raise DatasetError("missing 'image'", path, lineno)
        source = str(row.get("source", "other")).lower()
        if source not in GUIDEBOOK_SOURCES:
            raise DatasetError(f"unknown source {source!r}; expected one of {GUIDEBOOK_SOURCES}", path, lineno)
        gid = str(row.get("id") or f"gb{lineno}")
        if gid in seen:
            raise DatasetError(f"duplicate id {gid!r}", path, lineno)
        seen.add(gid)
        image_path = os.path.normpath(image if os.path.isabs(image) else base / image)
        if check_images and not os.path.isfile(image_path):
            raise DatasetError(f"image not found: {image_path}", path, lineno)
        entries.append(GuidebookEntry(gid, image_path, clue.strip(), source))
    if not entries:
        raise DatasetError("guidebook is empty", path)
    return entries


_CSV_ALIASES = {
    "id": ("id", "sample_id", "image_id"),
    "image": ("image", "image_path", "path", "file", "filename"),
    "lat": ("lat", "latitude"),
    "lon": ("lon", "lng", "long", "longitude"),
    "country": ("country", "country_name"),
}


def ingest_csv(csv_path, out_path, check_images: bool = True) -> list[Sample]:
    """Normalize a third-party CSV manifest into dataset JSONL.

    Image paths in the CSV are taken relative to the CSV file and rewritten
    relative to ``out_path``.
    """
    base = Path(csv_path).resolve().parent
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = {h.strip().lower(): h for h in (reader.fieldnames or [])}
        columns = {}
        for key, aliases in _CSV_ALIASES.items():
            columns[key] = next((header[a] for a in aliases if a in header), None)
        for required in ("id", "image"):
            if columns[required] is None:
                raise DatasetError(f"CSV has no {required!r} column (accepted: {_CSV_ALIASES[required]})", csv_path)
        for lineno, raw in enumerate(reader, start=2):
            row = {}
            for key, col in columns.items():
                if col is None:
                    continue
                value = (raw.get(col) or "").strip()
                if value:
                    row[key] = value
            sample = _sample_from_row(row, base, csv_path, lineno, check_images)
            if sample.id in seen:
                raise DatasetError(f"duplicate id {sample.id!r} (first seen on line {seen[sample.id]})", csv_path, lineno)
            seen[sample.id] = lineno
            samples.append(sample)
    if not samples:
        raise DatasetError("CSV manifest has no rows", csv_path)
    save_dataset(samples, out_path)
    return samples


# --- panorama -----------------------------------------------------------


def stitch_panorama(images: Sequence[Image.Image]) -> Image.Image:
    """Concatenate four equal-size views left to right in heading order 0, 90, 180, 270."""
    if len(images) != len(PANORAMA_HEADINGS):
        raise ValueError(f"expected {len(PANORAMA_HEADINGS)} images, got {len(images)}")
    size = images[0].size
    for i, im in enumerate(images):
        if im.size != size:
            raise ValueError(f"image {i} is {im.size[0]}x{im.size[1]}, expected {size[0]}x{size[1]}")
    mode = images[0].mode
    w, h = size
    out = Image.new(mode, (w * len(images), h))
    for i, im in enumerate(images):
        out.paste(im if im.mode == mode else im.convert(mode), (i * w, 0))
    return out


def stitch_files(paths: Sequence, out_path) -> Image.Image:
    views = []
    for p in paths:
        with Image.open(p) as im:
            im.load()
            views.append(im.copy())
    pano = stitch_panorama(views)
    pano.save(out_path)
    return pano


# --- round filtering ----------------------------------------------------


@dataclass(frozen=True)
class RoundMeta:
    score: float
    transcript_words: int
    time_limit_s: float

    def __post_init__(self):
        if not 0 <= self.score <= 5000:
            raise ValueError(f"score {self.score} outside [0, 5000]")
        if self.transcript_words < 0:
            raise ValueError("transcript_words must be >= 0")


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    reason: Optional[str] = None


def filter_round(meta: RoundMeta) -> FilterVerdict:
    if meta.time_limit_s < MIN_TIME_LIMIT_S:
        return FilterVerdict(False, "time")
    if meta.transcript_words < MIN_TRANSCRIPT_WORDS:
        return FilterVerdict(False, "transcript")
    if meta.score < MIN_SCORE:
        return FilterVerdict(False, "score")
    return FilterVerdict(True)


# --- statistics ---------------------------------------------------------


@dataclass
class DatasetStats:
    n: int
    bucket_edges: list[float]
    bucket_counts: list[int]
    reasoning_mean_words: Optional[float] = None
    reasoning_word_counts: Optional[list[int]] = None

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "histogram": [
                {"lo": lo, "hi": hi, "count": c}
                for lo, hi, c in zip(self.bucket_edges[:-1], self.bucket_edges[1:], self.bucket_counts)
            ],
        }
        if self.reasoning_mean_words is not None:
            out["reasoning_mean_words"] = self.reasoning_mean_words
        return out


def word_count(text: str) -> int:
    return len(text.split())


def dataset_stats(
    distances_km: Sequence[float],
    reasonings: Optional[Sequence[str]] = None,
    bucket_edges: Optional[Sequence[float]] = None,
) -> DatasetStats:
    """Distance histogram plus mean reasoning length in words.

    Without explicit ``bucket_edges`` numpy's ``"auto"`` binning is used.
    """
    data = np.asarray(list(distances_km), dtype=float)
    if data.size == 0 and not reasonings:
        raise ValueError("no distances or reasonings given")
    if data.size:
        edges = np.asarray(bucket_edges, dtype=float) if bucket_edges is not None else np.histogram_bin_edges(data, "auto")
        counts, edges = np.histogram(data, bins=edges)
        edges_l, counts_l = [float(e) for e in edges], [int(c) for c in counts]
    else:
        edges_l, counts_l = [], []
    stats = DatasetStats(n=int(data.size), bucket_edges=edges_l, bucket_counts=counts_l)
    if reasonings:
        lengths = [word_count(t) for t in reasonings]
        stats.reasoning_word_counts = lengths
        stats.reasoning_mean_words = sum(lengths) / len(lengths)
    return stats
