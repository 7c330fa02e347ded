"""TOML run configuration.

Example::

    [endpoints.reasoner]
    base_url = "http://localhost:8000"
    model = "qwen2-vl-7b-reasoner"

    [endpoints.guesser]
    base_url = "http://localhost:8001"
    model = "qwen2-vl-7b"

    [searcher]
    preset = "gws"            # or "im2gps"; explicit thresholds win
    elements = ["house", "road sign", "building sign"]
    sign_labels = ["road sign", "building sign"]
    top_crops = 3

    [retrieval]
    index = "guidebook.gbix"
    k = 3
    d_t = 30.0

    [osm]
    cache = "osm_cache.jsonl"

    [ablations]
    enable_reasoner = true
    enable_searcher = true
    untrained_reasoner = false

    [prompts]
    guesser = "prompts/guesser.txt"

    [mock]
    fixtures = "fixtures"

Relative paths resolve against the config file's directory. Endpoint URLs
and bearer tokens can be overridden with ``GEOREASON_<NAME>_URL`` and
``GEOREASON_<NAME>_TOKEN``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from georeason import embedindex
from georeason.gateway import CallCounter, EndpointConfig, FixtureTransport, Gateway
from georeason.osm import OsmClient, SearchCache
from georeason.pipeline import (
    GROUNDING_PRESETS,
    ElementSet,
    Endpoints,
    Pipeline,
    PipelineConfig,
    Prompts,
)

ENDPOINT_NAMES = ("reasoner", "reasoner_untrained", "searcher", "guesser", "embed", "ground", "ocr", "osm")
SECTIONS = ("endpoints", "searcher", "retrieval", "osm", "ablations", "prompts", "mock")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    index_path: Optional[Path] = None
    osm_cache: Optional[Path] = None
    osm_min_interval: Optional[float] = None
    fixtures: Optional[Path] = None
    source: Optional[Path] = None

    def digest(self) -> str:
        doc = {
            "pipeline": self.pipeline.to_dict(),
            "index": _file_digest(self.index_path) if self.index_path else None,
            "osm_min_interval": self.osm_min_interval,
            "mock": self.fixtures is not None,
        }
        blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_ablations(self, *, reasoner: bool = False, searcher: bool = False, training: bool = False) -> "RunConfig":
        p = self.pipeline
        p = replace(
            p,
            enable_reasoner=p.enable_reasoner and not reasoner,
            enable_searcher=p.enable_searcher and not searcher,
            untrained_reasoner=p.untrained_reasoner or training,
        )
        return replace(self, pipeline=p)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _endpoint(name: str, table: Mapping, env: Mapping[str, str]) -> EndpointConfig:
    if not isinstance(table, Mapping):
        raise ConfigError(f"[endpoints.{name}] must be a table")
    known = {"base_url", "model", "timeout", "max_retries", "temperature", "max_output", "token", "concurrency", "backoff"}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[endpoints.{name}] unknown keys: {sorted(unknown)}")
    prefix = f"GEOREASON_{name.upper()}_"
    base_url = env.get(prefix + "URL") or table.get("base_url")
    if not base_url:
        raise ConfigError(f"[endpoints.{name}] needs base_url")
    try:
        return EndpointConfig(
            name=name,
            base_url=str(base_url),
            model_name=str(table.get("model", "")),
            timeout=float(table.get("timeout", 60.0)),
            max_retries=int(table.get("max_retries", 2)),
            temperature=float(table.get("temperature", 0.0)),
            max_output=int(table.get("max_output", 2048)),
            token=env.get(prefix + "TOKEN") or table.get("token"),
            concurrency=int(table.get("concurrency", 4)),
            backoff=float(table.get("backoff", 0.5)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[endpoints.{name}] {exc}") from None


def parse_config(doc: Mapping, base_dir: Path, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    env = os.environ if env is None else env
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    def resolve(p) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else base_dir / p

    eps_doc = doc.get("endpoints", {})
    bad = set(eps_doc) - set(ENDPOINT_NAMES)
    if bad:
        raise ConfigError(f"unknown endpoints: {sorted(bad)}; expected some of {ENDPOINT_NAMES}")
    endpoints = Endpoints(**{name: _endpoint(name, tbl, env) for name, tbl in eps_doc.items()})

    s = doc.get("searcher", {})
    preset = s.get("preset", "gws")
    if preset not in GROUNDING_PRESETS:
        raise ConfigError(f"unknown grounding preset {preset!r}; expected one of {sorted(GROUNDING_PRESETS)}")
    box_t, text_t = GROUNDING_PRESETS[preset]
    element_kw = {}
    if "elements" in s:
        element_kw["elements"] = tuple(s["elements"])
    if "sign_labels" in s:
        element_kw["sign_labels"] = tuple(s["sign_labels"])

    r = doc.get("retrieval", {})
    a = doc.get("ablations", {})
    pr = doc.get("prompts", {})
    prompt_kw = {}
    for role in ("reasoner", "searcher", "guesser"):
        if role in pr:
            try:
                prompt_kw[role] = resolve(pr[role]).read_text(encoding="utf-8").strip()
            except OSError as exc:
                raise ConfigError(f"[prompts] cannot read {role} template: {exc}") from None

    try:
        pipeline = PipelineConfig(
            endpoints=endpoints,
            element_set=ElementSet(**element_kw),
            box_threshold=float(s.get("box_threshold", box_t)),
            text_threshold=float(s.get("text_threshold", text_t)),
            top_crops=int(s.get("top_crops", 3)),
            retrieval_k=int(r.get("k", 3)),
            retrieval_d_t=float(r.get("d_t", 30.0)),
            map_limit=int(doc.get("osm", {}).get("limit", 3)),
            enable_reasoner=bool(a.get("enable_reasoner", True)),
            enable_searcher=bool(a.get("enable_searcher", True)),
            untrained_reasoner=bool(a.get("untrained_reasoner", False)),
            geocode_fallback=bool(a.get("geocode_fallback", True)),
            prompts=Prompts(**prompt_kw),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    o = doc.get("osm", {})
    m = doc.get("mock", {})
    return RunConfig(
        pipeline=pipeline,
        index_path=resolve(r["index"]) if r.get("index") else None,
        osm_cache=resolve(o["cache"]) if o.get("cache") else None,
        osm_min_interval=float(o["min_interval"]) if "min_interval" in o else None,
        fixtures=resolve(m["fixtures"]) if m.get("fixtures") else None,
    )


def load_config(path, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = parse_config(doc, path.resolve().parent, env)
    return replace(cfg, source=path)


@dataclass
class Runtime:
    pipeline: Pipeline
    gateway: Gateway
    transport: Optional[FixtureTransport]

    def close(self) -> None:
        self.gateway.close()


def build_runtime(cfg: RunConfig, *, transport=None, sleep=None) -> Runtime:
    """Wire clients, index and OSM search for a run. Raises ``ConfigError`` on bad wiring."""
    if transport is None and cfg.fixtures is not None:
        if not cfg.fixtures.is_dir():
            raise ConfigError(f"fixtures directory not found: {cfg.fixtures}")
        transport = FixtureTransport(cfg.fixtures)
    kw = {"sleep": sleep} if sleep is not None else {}
    gateway = Gateway(transport, counter=CallCounter(), **kw)
    p = cfg.pipeline
    index = None
    if p.enable_searcher and cfg.index_path is not None:
        try:
            index = embedindex.load(cfg.index_path)
        except (OSError, embedindex.EmbedIndexError) as exc:
            raise ConfigError(f"cannot load guidebook index: {exc}") from None
    osm = None
    ep = p.endpoints.osm
    if ep is not None:
        osm = OsmClient(
            gateway,
            ep,
            cache=SearchCache(cfg.osm_cache),
            min_interval=cfg.osm_min_interval,
            **({"sleep": sleep} if sleep is not None else {}),
        )
    try:
        pipeline = Pipeline(p, gateway, index=index, osm=osm)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return Runtime(pipeline, gateway, transport if isinstance(transport, FixtureTransport) else None)
