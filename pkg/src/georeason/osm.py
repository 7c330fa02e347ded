"""Nominatim text search with an on-disk response cache and request pacing."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from georeason.gateway import EndpointConfig, Gateway, GatewayError, MalformedResponse, RequestSpec, TransportError
from georeason.geodesy import GeoPoint

logger = logging.getLogger(__name__)

PUBLIC_HOST = "nominatim.openstreetmap.org"
DEFAULT_LIMIT = 3
USER_AGENT = "georeason/0.1 (research evaluation harness)"


class RateLimitError(GatewayError):
    """The service kept answering 429 after every retry."""


@dataclass(frozen=True)
class Place:
    name: str
    address: str
    location: GeoPoint
    importance_rank: int
    importance: Optional[float] = None

    def render(self) -> str:
        return f"{self.name} | {self.address} | ({self.location.lat:.6f}, {self.location.lon:.6f})"


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


class RateLimiter:
    """Spaces request start times at least ``interval`` seconds apart."""

    def __init__(
        self,
        interval: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = interval
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._last: Optional[float] = None

    def acquire(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            if self._last is not None:
                wait = self._last + self.interval - self._clock()
                if wait > 0:
                    self._sleep(wait)
            self._last = self._clock()


class SearchCache:
    """Append-only JSONL cache of raw search responses keyed on (normalized query, limit)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, int], str] = {}
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self._entries[(row["key"], int(row["limit"]))] = row["response"]

    def get(self, query: str, limit: int) -> Optional[str]:
        return self._entries.get((normalize_query(query), limit))

    def put(self, query: str, limit: int, response: str) -> None:
        key = (normalize_query(query), limit)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                row = {"key": key[0], "limit": limit, "query": query, "response": response}
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def search_request(endpoint: EndpointConfig, query: str, limit: int) -> RequestSpec:
    return RequestSpec("GET", f"{endpoint.base_url}/search", params={"q": query, "format": "json", "limit": limit})


def parse_places(text: str, limit: int) -> list[Place]:
    try:
        rows = json.loads(text)
    except ValueError:
        raise MalformedResponse("search response is not JSON", endpoint="osm", operation="search") from None
    if not isinstance(rows, list):
        raise MalformedResponse("search response is not a list", endpoint="osm", operation="search")
    places = []
    for rank, row in enumerate(rows[:limit]):
        try:
            display = str(row["display_name"])
            location = GeoPoint(float(row["lat"]), float(row["lon"]))
            importance = row.get("importance")
            places.append(
                Place(
                    name=str(row.get("name") or display.split(",")[0]).strip(),
                    address=display,
                    location=location,
                    importance_rank=rank,
                    importance=None if importance is None else float(importance),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad place at position {rank}: {exc}", endpoint="osm", operation="search") from None
    return places


class OsmClient:
    def __init__(
        self,
        gateway: Gateway,
        endpoint: EndpointConfig,
        *,
        cache: Optional[SearchCache] = None,
        min_interval: Optional[float] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.gateway = gateway
        self.endpoint = endpoint
        self.cache = cache if cache is not None else SearchCache()
        if min_interval is None:
            min_interval = 1.0 if PUBLIC_HOST in endpoint.base_url else 0.0
        self.limiter = RateLimiter(min_interval, clock=clock, sleep=sleep)

    def search(self, query: str, limit: int = DEFAULT_LIMIT, *, tag: str = "map") -> list[Place]:
        query = query.strip()
        if not query:
            raise ValueError("search query is empty")
        if limit < 1:
            raise ValueError(f"limit must be >= 1, got {limit}")
        text = self.cache.get(query, limit)
        if text is None:
            self.limiter.acquire()
            try:
                text = self.gateway.send(
                    self.endpoint,
                    "search",
                    search_request(self.endpoint, query, limit),
                    tag=tag,
                    headers={"User-Agent": USER_AGENT},
                    raw=True,
                )
            except TransportError as exc:
                if exc.status == 429:
                    raise RateLimitError(exc.detail, endpoint=exc.endpoint, operation="search", attempts=exc.attempts) from exc
                raise
            places = parse_places(text, limit)
            self.cache.put(query, limit, text)
            return places
        return parse_places(text, limit)

    def geocode_city(self, country: str, city: str = "") -> Optional[GeoPoint]:
        country, city = country.strip(), city.strip()
        if not country:
            raise ValueError("country is required")
        query = f"{city}, {country}" if city else country
        places = self.search(query, limit=1, tag="geocode")
        return places[0].location if places else None
