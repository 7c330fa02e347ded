import json

import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from georeason.corpus import (
    DatasetError,
    RoundMeta,
    Sample,
    dataset_stats,
    filter_round,
    ingest_csv,
    load_dataset,
    load_guidebook,
    save_dataset,
    stitch_files,
    stitch_panorama,
)
from georeason.geodesy import GeoPoint


@pytest.fixture
def images(tmp_path):
    for name in ("a", "b", "c"):
        Image.new("RGB", (4, 4)).save(tmp_path / f"{name}.png")
    return tmp_path


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


def test_load_valid(images):
    p = write_lines(
        images / "d.jsonl",
        [
            {"id": "1", "image": "a.png", "lat": 1, "lon": 2, "country": "X"},
            {"id": "2", "image": "b.png"},
            {"id": "3", "image": "c.png", "lat": -90, "lon": 180},
        ],
    )
    got = load_dataset(p)
    assert [s.id for s in got] == ["1", "2", "3"]
    assert got[0].truth == GeoPoint(1, 2) and got[0].country == "X"
    assert got[1].truth is None
    assert got[0].image_path == str(images / "a.png")


def test_duplicate_id(images):
    p = write_lines(images / "d.jsonl", [{"id": "dup", "image": "a.png"}, {"id": "dup", "image": "b.png"}])
    with pytest.raises(DatasetError, match="dup") as err:
        load_dataset(p)
    assert err.value.line == 2


def test_latitude_out_of_range(images):
    p = write_lines(images / "d.jsonl", [{"id": "1", "image": "a.png"}, {"id": "2", "image": "a.png", "lat": 95, "lon": 0}])
    with pytest.raises(DatasetError) as err:
        load_dataset(p)
    assert err.value.line == 2 and ":2:" in str(err.value)


@pytest.mark.parametrize(
    "row",
    [
        {"id": "1", "image": "missing.png"},
        {"id": "1", "image": "a.png", "lat": 1},
        {"id": "1", "image": "a.png", "lat": "x", "lon": 1},
        {"id": "1", "image": "a.png", "lat": True, "lon": 1},
        {"image": "a.png"},
        "[1, 2]",
        "{broken",
    ],
)
def test_schema_errors(images, row):
    with pytest.raises(DatasetError) as err:
        load_dataset(write_lines(images / "d.jsonl", [row]))
    assert err.value.line == 1


def test_empty_dataset(images):
    with pytest.raises(DatasetError):
        load_dataset(write_lines(images / "d.jsonl", []))


def test_roundtrip(images):
    samples = [
        Sample("1", str(images / "a.png"), "France", GeoPoint(48.1, -3.2)),
        Sample("2", str(images / "b.png")),
    ]
    out = images / "rt.jsonl"
    save_dataset(samples, out)
    assert load_dataset(out) == samples


def test_guidebook(images):
    p = write_lines(
        images / "g.jsonl",
        [
            {"image": "a.png", "clue": "Houses in Brittany are coloured white with dark roofs.", "source": "toptips"},
            {"image": "b.png", "clue": "Tunisia has a fairly unique stop sign.", "source": "PlonkIt"},
        ],
    )
    gb = load_guidebook(p)
    assert gb[0].source == "toptips" and gb[0].clue.startswith("Houses in Brittany")
    assert gb[1].source == "plonkit" and "fairly unique stop sign" in gb[1].clue
    assert [e.id for e in gb] == ["gb1", "gb2"]


@pytest.mark.parametrize("row", [{"image": "a.png", "clue": "  "}, {"image": "a.png", "clue": "x", "source": "web"}])
def test_guidebook_errors(images, row):
    with pytest.raises(DatasetError):
        load_guidebook(write_lines(images / "g.jsonl", [row]))


def test_ingest_csv(images):
    (images / "m.csv").write_text("image_id,filename,latitude,lng\nx1,a.png,10,20\nx2,b.png,,\n")
    out = images / "sub" / "out.jsonl"
    out.parent.mkdir()
    got = ingest_csv(images / "m.csv", out)
    assert [s.truth for s in got] == [GeoPoint(10, 20), None]
    assert json.loads(out.read_text().splitlines()[0])["image"] == "../a.png"
    assert load_dataset(out) == got


def test_ingest_csv_missing_column(images):
    (images / "m.csv").write_text("name,lat\nx,1\n")
    with pytest.raises(DatasetError, match="id"):
        ingest_csv(images / "m.csv", images / "o.jsonl")


# --- panorama -----------------------------------------------------------

COLORS = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)]


def test_stitch_tiles():
    tiles = [Image.new("RGB", (2, 2), c) for c in COLORS]
    pano = stitch_panorama(tiles)
    assert pano.size == (8, 2)
    for x in range(8):
        for y in range(2):
            assert pano.getpixel((x, y)) == COLORS[x // 2]


def test_stitch_640():
    pano = stitch_panorama([Image.new("RGB", (640, 640), c) for c in COLORS])
    assert pano.size == (2560, 640)


def test_stitch_errors():
    with pytest.raises(ValueError):
        stitch_panorama([Image.new("RGB", (2, 2))] * 3)
    with pytest.raises(ValueError):
        stitch_panorama([Image.new("RGB", (2, 2))] * 3 + [Image.new("RGB", (3, 2))])


@given(st.integers(1, 6), st.integers(1, 4), st.randoms(use_true_random=False))
def test_stitch_pixel_mapping(w, h, rnd):
    tiles = []
    for _ in range(4):
        im = Image.new("L", (w, h))
        im.putdata([rnd.randint(0, 255) for _ in range(w * h)])
        tiles.append(im)
    pano = stitch_panorama(tiles)
    for x in range(4 * w):
        for y in range(h):
            assert pano.getpixel((x, y)) == tiles[x // w].getpixel((x % w, y))


def test_stitch_files(tmp_path):
    paths = []
    for i, c in enumerate(COLORS):
        paths.append(tmp_path / f"h{i}.png")
        Image.new("RGB", (3, 2), c).save(paths[-1])
    stitch_files(paths, tmp_path / "pano.png")
    assert Image.open(tmp_path / "pano.png").size == (12, 2)


# --- round filter -------------------------------------------------------


@pytest.mark.parametrize(
    "meta,verdict",
    [
        ((4800, 500, 120), (True, None)),
        ((3399, 500, 120), (False, "score")),
        ((5000, 99, 120), (False, "transcript")),
        ((3400, 100, 30), (True, None)),
        ((3400, 100, 29.999), (False, "time")),
        ((0, 0, 0), (False, "time")),
        ((0, 0, 30), (False, "transcript")),
    ],
)
def test_filter_examples(meta, verdict):
    v = filter_round(RoundMeta(*meta))
    assert (v.keep, v.reason) == verdict


def test_round_meta_validation():
    with pytest.raises(ValueError):
        RoundMeta(5001, 100, 30)
    with pytest.raises(ValueError):
        RoundMeta(100, -1, 30)


@given(st.floats(0, 5000), st.integers(0, 1000), st.floats(0, 600))
def test_filter_is_conjunction(score, words, time):
    v = filter_round(RoundMeta(score, words, time))
    assert v.keep == (time >= 30 and words >= 100 and score >= 3400)
    if not v.keep:
        first = next(r for r, bad in (("time", time < 30), ("transcript", words < 100), ("score", score < 3400)) if bad)
        assert v.reason == first


# --- stats --------------------------------------------------------------


def test_reasoning_mean():
    s = dataset_stats([10.0, 20.0], ["w " * 800, "w " * 884])
    assert s.reasoning_mean_words == 842


def test_single_sample_one_bucket():
    s = dataset_stats([5.0])
    assert sum(s.bucket_counts) == 1 and len(s.bucket_counts) == 1


def test_no_reasonings_omitted():
    d = dataset_stats([1.0, 2.0, 3.0], bucket_edges=[0, 2, 10]).to_dict()
    assert "reasoning_mean_words" not in d
    assert [b["count"] for b in d["histogram"]] == [1, 2]


def test_stats_empty():
    with pytest.raises(ValueError):
        dataset_stats([])
