"""A small scripted world for offline runs.

:func:`build_demo` writes three synthetic street scenes, a guidebook, a run
config and a fixture directory. Fixtures are produced by running the real
clients against :func:`make_handler` through a
:class:`~georeason.gateway.RecordingTransport`, so replay sees exactly the
requests the pipeline sends.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import parse_qs

import httpx
import numpy as np
from PIL import Image, ImageDraw

from georeason import embedindex
from georeason.gateway import CallCounter, Gateway, RecordingTransport, crop, encode_png
from georeason.osm import normalize_query

EMBED_DIM = 512
HOSTS = {
    "reasoner": "http://reasoner.mock",
    "reasoner_untrained": "http://reasoner-base.mock",
    "searcher": "http://searcher.mock",
    "guesser": "http://guesser.mock",
    "embed": "http://embed.mock",
    "ground": "http://ground.mock",
    "ocr": "http://ocr.mock",
    "osm": "http://osm.mock",
}
MODELS = {
    "reasoner": "qwen2-vl-7b-reasoner",
    "reasoner_untrained": "qwen2-vl-7b",
    "searcher": "qwen2-vl-7b",
    "guesser": "qwen2-vl-7b",
    "embed": "clip-vit-b-32",
}


@dataclass
class Obj:
    label: str
    box: tuple[int, int, int, int]
    score: float
    color: tuple[int, int, int]
    ocr: str = ""


@dataclass
class Scene:
    id: str
    country: str
    lat: float
    lon: float
    sky: tuple[int, int, int]
    objects: list[Obj]
    reasoning: str
    base_reasoning: str
    guess: str
    size: tuple[int, int] = (160, 64)
    image: bytes = field(default=b"", repr=False)


def _scenes() -> list[Scene]:
    return [
        Scene(
            id="s1-lower-mill",
            country="United Kingdom",
            lat=50.72361,
            lon=-3.52694,
            sky=(150, 180, 215),
            objects=[
                Obj("house", (2, 20, 22, 44), 0.9, (240, 240, 235)),
                Obj("house", (24, 20, 44, 44), 0.8, (200, 190, 170)),
                Obj("house", (46, 20, 66, 44), 0.7, (180, 90, 70)),
                Obj("house", (68, 20, 88, 44), 0.6, (120, 120, 110)),
                Obj("house", (90, 20, 110, 44), 0.5, (220, 210, 120)),
                Obj("building sign", (112, 10, 140, 20), 0.75, (20, 60, 30), ocr="Lower Mill"),
                Obj("road sign", (142, 30, 156, 44), 0.65, (250, 250, 250), ocr=""),
            ],
            reasoning=(
                "Narrow lanes bordered by dense hedgerows and a temperate, overcast sky suggest a maritime "
                "climate. Traffic keeps to the left and the stone cottages with slate roofs are typical of "
                "south-west England."
            ),
            base_reasoning="A small village with old houses; it could be somewhere in northern Europe.",
            guess='{"country": "United Kingdom", "city": "Exeter", "latitude": 50.72365, "longitude": -3.52701}',
        ),
        Scene(
            id="s2-bradesco",
            country="Brazil",
            lat=-23.5505,
            lon=-46.6333,
            sky=(120, 170, 230),
            objects=[
                Obj("building sign", (10, 8, 60, 22), 0.8, (200, 20, 40), ocr="Bradesco"),
                Obj("house", (70, 24, 110, 56), 0.6, (230, 200, 160)),
            ],
            reasoning=(
                "Dense tropical vegetation and a busy urban avenue with Portuguese-language shopfronts point "
                "toward a Lusophone country."
            ),
            base_reasoning="A busy street with shops in a warm city.",
            guess=(
                'Based on the map results the bank branch is in Lisbon.\n'
                '{"country": "Portugal", "city": "Lisbon", "latitude": 38.7223, "longitude": -9.1393}'
            ),
        ),
        Scene(
            id="s3-ashkelon",
            country="Israel",
            lat=31.66671,
            lon=34.59127,
            sky=(200, 215, 235),
            objects=[],
            reasoning=(
                "The scene reveals a blend of urban and natural features typical of a Mediterranean climate. "
                "Palm trees and flat-roofed buildings in earth tones point to a location consistent with "
                "Israel's landscape and architectural style."
            ),
            base_reasoning="A sunny coastal town with palm trees.",
            guess=(
                '```json\n{"country": "Israel", "city": "Ashkelon", "latitude": 31.66671, '
                '"longitude": 34.59127}\n```'
            ),
        ),
    ]


GUIDEBOOK_EXTRA = [
    ("gb-tunisia-stop", "plonkit", "Tunisia has a fairly unique stop sign with Arabic and Latin script.", (200, 30, 30)),
    ("gb-uk-chevrons", "toptips", "The chevrons are black with white arrows in the U.K.", (20, 20, 20)),
]
BRITTANY_CLUE = "Houses in Brittany, a western region of France, are coloured white with dark roofs."

PLACES = {
    "lower mill": [
        {
            "name": "Lower Mill",
            "display_name": "Lower Mill, Exeter, Devon, England, United Kingdom",
            "lat": "50.7236100",
            "lon": "-3.5269400",
            "importance": 0.21,
        }
    ],
    "bradesco": [
        {
            "name": "Bradesco",
            "display_name": "Bradesco, Avenida Paulista, São Paulo, Brazil",
            "lat": "-23.5614000",
            "lon": "-46.6559000",
            "importance": 0.35,
        },
        {
            "name": "Bradesco",
            "display_name": "Bradesco, Avenida da Liberdade, Lisboa, Portugal",
            "lat": "38.7223000",
            "lon": "-9.1393000",
            "importance": 0.2,
        },
        {
            "name": "Bradesco",
            "display_name": "Bradesco, Rua Rainha Ginga, Luanda, Angola",
            "lat": "-8.8147000",
            "lon": "13.2302000",
            "importance": 0.12,
        },
    ],
    "paris, france": [
        {"name": "Paris", "display_name": "Paris, Île-de-France, France", "lat": "48.8588897", "lon": "2.3200410"}
    ],
    "chile": [{"name": "Chile", "display_name": "Chile", "lat": "-31.7613365", "lon": "-71.3187697"}],
    "exeter, united kingdom": [
        {"name": "Exeter", "display_name": "Exeter, Devon, England, United Kingdom", "lat": "50.7255", "lon": "-3.5269"}
    ],
}

SEARCHER_SENTENCES = {
    "house": "White walls with dark slate roofs are most common in Brittany and south-west England.",
    "building sign": "Green lettering on a painted board is typical of an English pub or mill restaurant.",
    "road sign": "A blank white rectangular plate matches British and Irish supplementary signs.",
}


def _draw(scene: Scene) -> bytes:
    im = Image.new("RGB", scene.size, scene.sky)
    d = ImageDraw.Draw(im)
    w, h = scene.size
    d.rectangle((0, h - 12, w - 1, h - 1), fill=(90, 90, 90))
    for i, obj in enumerate(scene.objects):
        d.rectangle((obj.box[0], obj.box[1], obj.box[2] - 1, obj.box[3] - 1), fill=obj.color)
        # marker pixel keeps every crop visually distinct
        d.point((obj.box[0], obj.box[1]), fill=(i * 13 % 256, i * 29 % 256, i * 47 % 256))
    return encode_png(im)


def pixel_digest(image: bytes) -> str:
    with Image.open(io.BytesIO(image)) as im:
        im = im.convert("RGB")
        return hashlib.sha256(f"{im.size}".encode() + im.tobytes()).hexdigest()


def mock_embedding(image: bytes, dim: int = EMBED_DIM) -> list[float]:
    """Pseudo-random vector seeded by pixel content: equal pixels give equal vectors."""
    seed = int(pixel_digest(image)[:16], 16)
    return np.random.default_rng(seed).normal(0.0, 10.0, dim).astype(np.float32).tolist()


@dataclass
class World:
    scenes: list[Scene]
    by_image: dict[str, Scene]
    ocr_by_crop: dict[str, str]
    guidebook_images: dict[str, bytes]


def make_world() -> World:
    scenes = _scenes()
    by_image, ocr = {}, {}
    for s in scenes:
        s.image = _draw(s)
        by_image[pixel_digest(s.image)] = s
        for obj in s.objects:
            if obj.label != "house":
                ocr[pixel_digest(crop(s.image, obj.box))] = obj.ocr
    first = scenes[0]
    top_house = max((o for o in first.objects if o.label == "house"), key=lambda o: o.score)
    gb = {"gb-brittany-house": crop(first.image, top_house.box)}
    for gid, _src, _clue, color in GUIDEBOOK_EXTRA:
        gb[gid] = encode_png(Image.new("RGB", (24, 24), color))
    return World(scenes, by_image, ocr, gb)


def _chat_parts(body: dict) -> tuple[str, list[bytes]]:
    content = body["messages"][0]["content"]
    text = "".join(p["text"] for p in content if p["type"] == "text")
    images = [base64.b64decode(p["image_url"]["url"].split(",", 1)[1]) for p in content if p["type"] == "image_url"]
    return text, images


def _chat(text: str) -> tuple[int, dict]:
    return 200, {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


def make_handler(world: World):
    """Request -> (status, JSON body) for every mock host."""

    def handler(request: httpx.Request) -> tuple[int, object]:
        host = request.url.host
        body = json.loads(request.content) if request.content else None
        if host in ("reasoner.mock", "reasoner-base.mock", "guesser.mock"):
            _text, images = _chat_parts(body)
            scene = world.by_image.get(pixel_digest(images[0]))
            if scene is None:
                return 404, {"error": "unknown scene"}
            if host == "guesser.mock":
                return _chat(scene.guess)
            return _chat(scene.reasoning if host == "reasoner.mock" else scene.base_reasoning)
        if host == "searcher.mock":
            text, images = _chat_parts(body)
            item = next((k for k in SEARCHER_SENTENCES if f"Analyze the {k} images" in text), None)
            if item is None:
                return 400, {"error": "unexpected prompt"}
            return _chat("\n".join(f"Image {i + 1}: {SEARCHER_SENTENCES[item]}" for i in range(len(images))))
        if host == "embed.mock":
            image = base64.b64decode(body["input"][0])
            return 200, {"data": [{"index": 0, "embedding": mock_embedding(image)}]}
        if host == "ground.mock":
            image = base64.b64decode(body["image_b64"])
            scene = world.by_image.get(pixel_digest(image))
            if scene is None:
                return 200, {"detections": []}
            dets = [
                {"label": o.label, "box": list(o.box), "score": o.score}
                for o in scene.objects
                if o.label in body["labels"] and o.score >= body["box_threshold"]
            ]
            return 200, {"detections": dets}
        if host == "ocr.mock":
            image = base64.b64decode(body["image_b64"])
            return 200, {"text": world.ocr_by_crop.get(pixel_digest(image), "")}
        if host == "osm.mock":
            q = parse_qs(request.url.query.decode())
            query, limit = q["q"][0], int(q["limit"][0])
            return 200, PLACES.get(normalize_query(query), [])[:limit]
        return 404, {"error": f"unknown host {host}"}

    return handler


CONFIG_TEMPLATE = """\
# Offline demo configuration: every endpoint is served from ./fixtures
{endpoints}
[searcher]
preset = "gws"
top_crops = 3

[retrieval]
index = "guidebook.gbix"
k = 3
d_t = 30.0

[ablations]
enable_reasoner = true
enable_searcher = true
untrained_reasoner = false

[mock]
fixtures = "fixtures"
"""


def _config_text() -> str:
    blocks = []
    for name, url in HOSTS.items():
        lines = [f"[endpoints.{name}]", f'base_url = "{url}"']
        if name in MODELS:
            lines.append(f'model = "{MODELS[name]}"')
        lines.append("max_retries = 0")
        blocks.append("\n".join(lines) + "\n")
    return CONFIG_TEMPLATE.format(endpoints="\n".join(blocks))


def build_demo(out_dir) -> Path:
    """Write images, dataset, guidebook, config, index and fixtures under ``out_dir``.

    Returns the config path.
    """
    from georeason.config import build_runtime, load_config
    from georeason.corpus import load_dataset, load_guidebook

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "guidebook").mkdir(exist_ok=True)
    world = make_world()

    with open(out / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for s in world.scenes:
            (out / "images" / f"{s.id}.png").write_bytes(s.image)
            row = {"id": s.id, "image": f"images/{s.id}.png", "lat": s.lat, "lon": s.lon, "country": s.country}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    clues = {"gb-brittany-house": ("toptips", BRITTANY_CLUE)}
    clues.update({gid: (src, clue) for gid, src, clue, _ in GUIDEBOOK_EXTRA})
    with open(out / "guidebook.jsonl", "w", encoding="utf-8") as fh:
        for gid, image in world.guidebook_images.items():
            (out / "guidebook" / f"{gid}.png").write_bytes(image)
            src, clue = clues[gid]
            fh.write(json.dumps({"id": gid, "image": f"guidebook/{gid}.png", "clue": clue, "source": src}) + "\n")

    config_path = out / "config.toml"
    config_path.write_text(_config_text(), encoding="utf-8")

    recorder = RecordingTransport(make_handler(world), out / "fixtures")
    cfg = load_config(config_path, env={})

    # guidebook index through the embed endpoint, recording as we go
    with Gateway(recorder, counter=CallCounter()) as gw:
        entries = []
        for e in load_guidebook(out / "guidebook.jsonl"):
            vec = gw.embed_image(cfg.pipeline.endpoints.embed, Path(e.image_path).read_bytes())
            entries.append(embedindex.IndexEntry(e.id, vec, e.clue, e.source))
        embedindex.build(entries).save(out / "guidebook.gbix")

    samples = load_dataset(out / "dataset.jsonl")
    variants = [
        {},
        {"reasoner": True},
        {"searcher": True},
        {"training": True},
        {"reasoner": True, "searcher": True},
    ]
    for flags in variants:
        rt = build_runtime(cfg.with_ablations(**flags), transport=recorder)
        try:
            rt.pipeline.run_batch(samples)
        finally:
            rt.close()
    return config_path
