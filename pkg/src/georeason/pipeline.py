"""Reasoner -> Searcher -> Guesser orchestration."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from georeason import prompts
from georeason.corpus import Sample
from georeason.embedindex import Index
from georeason.gateway import (
    Detection,
    EndpointConfig,
    Gateway,
    GatewayConfigError,
    GatewayError,
    check_image,
    crop,
)
from georeason.geodesy import EvaluationReport, GeoPoint, aggregate, geoguessr_score, haversine_km
from georeason.osm import OsmClient

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOURCES = ("guidebook", "map", "vlm")


@dataclass(frozen=True)
class ElementSet:
    elements: tuple[str, ...] = ("house", "road sign", "building sign")
    sign_labels: tuple[str, ...] = ("road sign", "building sign")

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "sign_labels", tuple(self.sign_labels))
        if not self.elements:
            raise ValueError("element set is empty")
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("duplicate element labels")
        extra = set(self.sign_labels) - set(self.elements)
        if extra:
            raise ValueError(f"sign labels not in element set: {sorted(extra)}")


GROUNDING_PRESETS = {"gws": (0.5, 0.5), "im2gps": (0.8, 0.6)}


@dataclass(frozen=True)
class Prompts:
    reasoner: str = prompts.REASONER
    searcher: str = prompts.SEARCHER
    guesser: str = prompts.GUESSER


@dataclass(frozen=True)
class Endpoints:
    reasoner: Optional[EndpointConfig] = None
    guesser: Optional[EndpointConfig] = None
    searcher: Optional[EndpointConfig] = None
    embed: Optional[EndpointConfig] = None
    ground: Optional[EndpointConfig] = None
    ocr: Optional[EndpointConfig] = None
    osm: Optional[EndpointConfig] = None
    reasoner_untrained: Optional[EndpointConfig] = None


@dataclass(frozen=True)
class PipelineConfig:
    endpoints: Endpoints
    element_set: ElementSet = ElementSet()
    box_threshold: float = 0.5
    text_threshold: float = 0.5
    retrieval_k: int = 3
    retrieval_d_t: float = 30.0
    top_crops: int = 3
    map_limit: int = 3
    enable_reasoner: bool = True
    enable_searcher: bool = True
    untrained_reasoner: bool = False
    geocode_fallback: bool = True
    prompts: Prompts = Prompts()

    def __post_init__(self):
        if self.top_crops < 1:
            raise ValueError("top_crops must be >= 1")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1")
        if not self.retrieval_d_t > 0:
            raise ValueError("retrieval_d_t must be > 0")
        for name in ("box_threshold", "text_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.guesser_endpoint is None:
            raise ValueError("a guesser endpoint is required")
        if self.enable_reasoner and self.reasoner_endpoint is None:
            which = "reasoner_untrained" if self.untrained_reasoner else "reasoner"
            raise ValueError(f"reasoner enabled but endpoint {which!r} is not configured")

    @property
    def reasoner_endpoint(self) -> Optional[EndpointConfig]:
        return self.endpoints.reasoner_untrained if self.untrained_reasoner else self.endpoints.reasoner

    @property
    def guesser_endpoint(self) -> Optional[EndpointConfig]:
        return self.endpoints.guesser

    def to_dict(self) -> dict:
        eps = {
            name: (ep.describe() if ep else None)
            for name, ep in sorted(vars(self.endpoints).items())
        }
        return {
            "endpoints": eps,
            "element_set": {"elements": list(self.element_set.elements), "sign_labels": list(self.element_set.sign_labels)},
            "box_threshold": self.box_threshold,
            "text_threshold": self.text_threshold,
            "retrieval_k": self.retrieval_k,
            "retrieval_d_t": self.retrieval_d_t,
            "top_crops": self.top_crops,
            "map_limit": self.map_limit,
            "ablations": {
                "enable_reasoner": self.enable_reasoner,
                "enable_searcher": self.enable_searcher,
                "untrained_reasoner": self.untrained_reasoner,
            },
            "geocode_fallback": self.geocode_fallback,
            "prompts": vars(self.prompts),
        }


# --- data carried between stages ----------------------------------------


@dataclass(frozen=True)
class KnowledgeItem:
    source: str
    query_ref: str
    content: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown knowledge source {self.source!r}")
        if not self.content.strip():
            raise ValueError("knowledge content is empty")

    def to_dict(self) -> dict:
        return {"source": self.source, "query_ref": self.query_ref, "content": self.content}


@dataclass(frozen=True)
class ImageQuery:
    ref: str
    label: str
    detection: Detection
    image: bytes = field(repr=False)


@dataclass(frozen=True)
class TextQuery:
    ref: str
    text: str
    crop_ref: str


@dataclass
class QuerySet:
    images: list[ImageQuery] = field(default_factory=list)
    texts: list[TextQuery] = field(default_factory=list)
    degraded: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images) + len(self.texts)

    def summary(self) -> list[dict]:
        out = [
            {"ref": q.ref, "label": q.label, "box": list(q.detection.box), "confidence": q.detection.confidence}
            for q in self.images
        ]
        return out + [{"ref": t.ref, "text": t.text} for t in self.texts]


@dataclass(frozen=True)
class Guess:
    country: str
    city: str
    location: GeoPoint
    location_source: str = "model"

    def to_dict(self) -> dict:
        return {
            "country": self.country,
            "city": self.city,
            "latitude": self.location.lat,
            "longitude": self.location.lon,
            "location_source": self.location_source,
        }


@dataclass(frozen=True)
class ParseFailure:
    kind: str
    message: str
    country: Optional[str] = None
    city: Optional[str] = None

    def __bool__(self) -> bool:
        return False


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


# --- guess parsing ------------------------------------------------------


def _balanced_objects(text: str):
    """Yield each balanced ``{...}`` span, outermost first, in order of its opening brace."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        end = None
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    end = i
                    break
        if end is None:
            start = text.find("{", start + 1)
            continue
        yield text[start : end + 1]
        start = text.find("{", end + 1)


def _coerce_number(value) -> Optional[float]:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        try:
            out = float(value.strip())
        except ValueError:
            return None
    else:
        return None
    return out if math.isfinite(out) else None


def parse_guess(text: str) -> Union[Guess, ParseFailure]:
    """Extract a country/city/latitude/longitude guess from a model completion.

    Never raises: anything unusable becomes a :class:`ParseFailure`.
    """
    if not isinstance(text, str):
        return ParseFailure("no_json", "completion is not text")
    obj = None
    for span in _balanced_objects(text):
        try:
            candidate = json.loads(span)
        except (ValueError, RecursionError):
            continue
        if isinstance(candidate, dict):
            obj = candidate
            break
    if obj is None:
        return ParseFailure("no_json", "no JSON object found")

    country, city = obj.get("country"), obj.get("city")
    country = country if isinstance(country, str) else None
    city = city if isinstance(city, str) else None
    missing = [k for k in ("country", "city", "latitude", "longitude") if k not in obj]
    if missing:
        return ParseFailure("missing_key", f"missing keys: {', '.join(missing)}", country, city)
    if country is None or city is None:
        return ParseFailure("bad_type", "country and city must be strings", country, city)
    lat = _coerce_number(obj["latitude"])
    lon = _coerce_number(obj["longitude"])
    if lat is None or lon is None:
        return ParseFailure("bad_number", "latitude/longitude are not numbers", country, city)
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        return ParseFailure("out_of_bounds", f"coordinate ({lat}, {lon}) out of bounds", country, city)
    return Guess(country.strip(), city.strip(), GeoPoint(lat, lon))


# --- records ------------------------------------------------------------


@dataclass
class PredictionRecord:
    sample_id: str
    reasoning: str = ""
    knowledge: list[KnowledgeItem] = field(default_factory=list)
    queries: list[dict] = field(default_factory=list)
    raw_guess: str = ""
    guess: Optional[Guess] = None
    failure: Optional[dict] = None
    truth: Optional[GeoPoint] = None
    distance_km: Optional[float] = None
    score: Optional[float] = None
    degraded: list[str] = field(default_factory=list)
    latencies: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.guess is None

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "reasoning": self.reasoning,
            "queries": self.queries,
            "knowledge": [k.to_dict() for k in self.knowledge],
            "raw_guess": self.raw_guess,
            "guess": self.guess.to_dict() if self.guess else None,
            "failure": self.failure,
            "truth": {"latitude": self.truth.lat, "longitude": self.truth.lon} if self.truth else None,
            "distance_km": self.distance_km,
            "score": self.score,
            "degraded": list(self.degraded),
        }
        if include_timings:
            out["latencies"] = dict(self.latencies)
        return out

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema_version {d.get('schema_version')!r}")
        g = d.get("guess")
        guess = None
        if g is not None:
            guess = Guess(
                str(g["country"]),
                str(g["city"]),
                GeoPoint(float(g["latitude"]), float(g["longitude"])),
                g.get("location_source", "model"),
            )
        t = d.get("truth")
        truth = GeoPoint(float(t["latitude"]), float(t["longitude"])) if t else None
        if (guess is None) == (d.get("failure") is None):
            raise ValueError("record must carry exactly one of guess / failure")
        return cls(
            sample_id=str(d["sample_id"]),
            reasoning=d.get("reasoning", ""),
            knowledge=[KnowledgeItem(**k) for k in d.get("knowledge", [])],
            queries=list(d.get("queries", [])),
            raw_guess=d.get("raw_guess", ""),
            guess=guess,
            failure=d.get("failure"),
            truth=truth,
            distance_km=d.get("distance_km"),
            score=d.get("score"),
            degraded=list(d.get("degraded", [])),
            latencies=dict(d.get("latencies", {})),
        )


def serialize_information(reasoning: str, knowledge: Sequence[KnowledgeItem]) -> str:
    """Deterministic text block fed to the guesser: reasoning first, then tagged knowledge."""
    parts = []
    if reasoning.strip():
        parts.append(f"Reasoning: {reasoning.strip()}")
    if knowledge:
        lines = ["Additional information:"]
        lines += [f"[{k.source}] {k.content.strip()}" for k in knowledge]
        parts.append("\n".join(lines))
    return "\n\n".join(parts)


@dataclass
class BatchResult:
    records: list[PredictionRecord]
    report: Optional[EvaluationReport]
    counters: dict[str, int]

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.records)


class Pipeline:
    """Runs samples through the three stages against shared service clients."""

    def __init__(
        self,
        config: PipelineConfig,
        gateway: Gateway,
        *,
        index: Optional[Index] = None,
        osm: Optional[OsmClient] = None,
    ):
        self.config = config
        self.gateway = gateway
        self.index = index
        self.osm = osm
        ep = config.endpoints
        if config.enable_searcher:
            if ep.ground is None:
                raise ValueError("searcher enabled but no ground endpoint configured")
            if config.element_set.sign_labels and ep.ocr is None:
                raise ValueError("searcher enabled with sign labels but no ocr endpoint configured")
            if index is not None and ep.embed is None:
                raise ValueError("guidebook index given but no embed endpoint configured")

    # reasoner ----------------------------------------------------------

    def reason(self, image: bytes) -> str:
        if not self.config.enable_reasoner:
            raise RuntimeError("reasoner is disabled in this configuration")
        prompt = prompts.render_reasoner(self.config.prompts.reasoner)
        try:
            return self.gateway.chat_vision(self.config.reasoner_endpoint, prompt, [image], tag="reasoner")
        except GatewayError as exc:
            raise StageError("reasoner", exc) from exc

    # searcher ----------------------------------------------------------

    def select_crops(self, detections: Sequence[Detection]) -> list[tuple[str, int, Detection]]:
        """Top ``top_crops`` detections per element label by confidence, ties in detection order."""
        kept = []
        for label in self.config.element_set.elements:
            mine = [d for d in detections if d.label == label]
            mine.sort(key=lambda d: -d.confidence)
            kept += [(label, rank, d) for rank, d in enumerate(mine[: self.config.top_crops])]
        return kept

    def build_queries(self, image: bytes) -> QuerySet:
        cfg = self.config
        ep = cfg.endpoints
        try:
            detections = self.gateway.ground(
                ep.ground, image, list(cfg.element_set.elements), cfg.box_threshold, cfg.text_threshold, tag="ground"
            )
        except GatewayError as exc:
            raise StageError("searcher", exc) from exc
        unknown = sorted({d.label for d in detections} - set(cfg.element_set.elements))
        if unknown:
            logger.info("ignoring detections with labels outside the element set: %s", unknown)

        qs = QuerySet()
        for label, rank, det in self.select_crops(detections):
            ref = f"{label}#{rank}"
            try:
                piece = crop(image, det.box)
            except ValueError as exc:
                raise StageError("searcher", exc) from exc
            qs.images.append(ImageQuery(ref, label, det, piece))
            if label in cfg.element_set.sign_labels:
                try:
                    text = self.gateway.ocr(ep.ocr, piece, tag="ocr")
                except GatewayConfigError:
                    raise
                except GatewayError as exc:
                    logger.warning("ocr failed for %s: %s", ref, exc)
                    if "ocr" not in qs.degraded:
                        qs.degraded.append("ocr")
                    continue
                if text:
                    qs.texts.append(TextQuery(f"{ref}:ocr", text, ref))
        return qs

    def _guidebook(self, queries: QuerySet, degraded: list[str]) -> list[KnowledgeItem]:
        if self.index is None:
            return []
        items = []
        for q in queries.images:
            try:
                vec = self.gateway.embed_image(
                    self.config.endpoints.embed, q.image, expected_dim=self.index.dim, tag="embed"
                )
            except GatewayConfigError:
                raise
            except GatewayError as exc:
                logger.warning("guidebook tool failed for %s: %s", q.ref, exc)
                if "guidebook" not in degraded:
                    degraded.append("guidebook")
                continue
            for hit in self.index.query(vec, k=self.config.retrieval_k, d_t=self.config.retrieval_d_t):
                items.append(KnowledgeItem("guidebook", q.ref, hit.clue))
        return items

    def _map(self, queries: QuerySet, degraded: list[str]) -> list[KnowledgeItem]:
        if self.osm is None:
            return []
        items = []
        for q in queries.texts:
            try:
                places = self.osm.search(q.text, limit=self.config.map_limit, tag="map")
            except GatewayError as exc:
                logger.warning("map tool failed for %r: %s", q.text, exc)
                if "map" not in degraded:
                    degraded.append("map")
                continue
            items += [KnowledgeItem("map", q.ref, f"{q.text}: {p.render()}") for p in places]
        return items

    def _vlm(self, queries: QuerySet, degraded: list[str]) -> list[KnowledgeItem]:
        ep = self.config.endpoints.searcher
        if ep is None:
            return []
        items = []
        for label in self.config.element_set.elements:
            crops = [q.image for q in queries.images if q.label == label]
            if not crops:
                continue
            prompt = prompts.render_searcher(self.config.prompts.searcher, label)
            try:
                text = self.gateway.chat_vision(ep, prompt, crops, tag="searcher")
            except GatewayError as exc:
                logger.warning("vlm tool failed for %s: %s", label, exc)
                if "vlm" not in degraded:
                    degraded.append("vlm")
                continue
            if text.strip():
                items.append(KnowledgeItem("vlm", label, text.strip()))
        return items

    def dispatch_tools(self, queries: QuerySet) -> tuple[list[KnowledgeItem], list[str]]:
        """Run every tool over the query set; failing tools are skipped and reported."""
        degraded: list[str] = []
        knowledge = self._guidebook(queries, degraded)
        knowledge += self._map(queries, degraded)
        knowledge += self._vlm(queries, degraded)
        return knowledge, degraded

    # guesser -----------------------------------------------------------

    def guess(
        self, image: bytes, reasoning: str, knowledge: Sequence[KnowledgeItem]
    ) -> tuple[str, Union[Guess, ParseFailure]]:
        ep = self.config.guesser_endpoint
        prompt = prompts.render_guesser(self.config.prompts.guesser, serialize_information(reasoning, knowledge))
        try:
            raw = self.gateway.chat_vision(ep, prompt, [image], tag="guesser")
            parsed = parse_guess(raw)
            if isinstance(parsed, ParseFailure):
                retry_prompt = f"{prompt}\n\n{prompts.FORMAT_REMINDER}"
                raw = self.gateway.chat_vision(ep, retry_prompt, [image], tag="guesser")
                parsed = parse_guess(raw)
        except GatewayError as exc:
            raise StageError("guesser", exc) from exc
        return raw, parsed

    # one sample --------------------------------------------------------

    def run_one(self, sample: Sample) -> PredictionRecord:
        rec = PredictionRecord(sample_id=sample.id, truth=sample.truth)
        clock = time.perf_counter
        try:
            with open(sample.image_path, "rb") as fh:
                image = fh.read()
            check_image(image)
        except (OSError, ValueError) as exc:
            rec.failure = {"stage": "input", "kind": "image", "message": str(exc)}
            return rec

        try:
            if self.config.enable_reasoner:
                t0 = clock()
                rec.reasoning = self.reason(image)
                rec.latencies["reasoner"] = clock() - t0
            if self.config.enable_searcher:
                t0 = clock()
                try:
                    queries = self.build_queries(image)
                    rec.queries = queries.summary()
                    rec.degraded += queries.degraded
                    knowledge, degraded = self.dispatch_tools(queries)
                    rec.knowledge = knowledge
                    rec.degraded += degraded
                except StageError as exc:
                    logger.warning("sample %s: searcher skipped: %s", sample.id, exc)
                    rec.degraded.append("searcher")
                rec.latencies["searcher"] = clock() - t0
            t0 = clock()
            rec.raw_guess, parsed = self.guess(image, rec.reasoning, rec.knowledge)
            rec.latencies["guesser"] = clock() - t0
        except StageError as exc:
            rec.failure = {"stage": exc.stage, "kind": type(exc.cause).__name__, "message": str(exc.cause)}
            return rec

        if isinstance(parsed, ParseFailure):
            parsed = self._geocode_fallback(parsed)
        if isinstance(parsed, ParseFailure):
            rec.failure = {"stage": "guesser", "kind": f"parse:{parsed.kind}", "message": parsed.message}
            return rec
        rec.guess = parsed
        if sample.truth is not None:
            rec.distance_km = haversine_km(sample.truth, parsed.location)
            rec.score = geoguessr_score(rec.distance_km)
        return rec

    def _geocode_fallback(self, failure: ParseFailure) -> Union[Guess, ParseFailure]:
        if not (self.config.geocode_fallback and self.osm is not None):
            return failure
        if failure.kind not in ("missing_key", "bad_number", "out_of_bounds") or not failure.country:
            return failure
        try:
            point = self.osm.geocode_city(failure.country, failure.city or "")
        except GatewayError as exc:
            logger.warning("geocode fallback failed: %s", exc)
            return failure
        if point is None:
            return failure
        return Guess(failure.country.strip(), (failure.city or "").strip(), point, "geocode")

    # batch -------------------------------------------------------------

    def run_batch(self, samples: Sequence[Sample], parallelism: int = 1) -> BatchResult:
        if not samples:
            raise ValueError("dataset is empty")
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if parallelism == 1:
            records = [self.run_one(s) for s in samples]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                records = list(pool.map(self.run_one, samples))
        return BatchResult(records, evaluate_records(records), self.gateway.counter.snapshot())


def evaluate_records(records: Sequence[PredictionRecord]) -> Optional[EvaluationReport]:
    """Aggregate records that have ground truth; failed ones count as misses."""
    scorable = [r for r in records if r.truth is not None]
    if not scorable:
        return None
    return aggregate(scorable)
