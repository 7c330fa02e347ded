import json

import pytest
from click.testing import CliRunner
from PIL import Image

from georeason.cli import main
from georeason.reporting import parse_csv_report

from conftest import read_jsonl


@pytest.fixture
def runner():
    return CliRunner()


def run_cli(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_run_writes_outputs(runner, demo_dir, tmp_path):
    out = tmp_path / "out"
    res = run_cli(runner, "run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", out)
    assert res.exit_code == 0, res.output
    assert {p.name for p in out.iterdir()} == {"records.jsonl", "report.json", "manifest.json", "timings.jsonl"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_samples"] == 3 and manifest["n_failed"] == 0
    assert manifest["tool_calls"]["reasoner"] == 3 and manifest["tool_calls"]["guesser"] == 3
    assert manifest["grounded_items"] == {"building sign": 2, "house": 4, "road sign": 1}
    assert len(read_jsonl(out / "timings.jsonl")) == 3
    assert "Continent (2500 km)" in res.stdout


def test_run_refuses_overwrite(runner, demo_dir, tmp_path):
    args = ("run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", tmp_path)
    assert run_cli(runner, *args).exit_code == 0
    assert run_cli(runner, *args).exit_code == 2
    assert run_cli(runner, *args, "--force").exit_code == 0


def test_run_bad_config_exits_2(runner, demo_dir, tmp_path):
    (tmp_path / "c.toml").write_text("[nonsense]\n")
    res = run_cli(runner, "run", "--config", tmp_path / "c.toml", demo_dir / "dataset.jsonl", tmp_path / "o")
    assert res.exit_code == 2 and "unknown sections" in res.output


def test_run_partial_exits_1(runner, demo_dir, tmp_path):
    ds = tmp_path / "ds.jsonl"
    rows = read_jsonl(demo_dir / "dataset.jsonl")
    (tmp_path / "bad.png").write_bytes(b"junk")
    rows.append({"id": "junk", "image": str(tmp_path / "bad.png"), "lat": 0, "lon": 0})
    for r in rows[:-1]:
        r["image"] = str(demo_dir / r["image"])
    ds.write_text("".join(json.dumps(r) + "\n" for r in rows))
    res = run_cli(runner, "run", "--config", demo_dir / "config.toml", ds, tmp_path / "o")
    assert res.exit_code == 1
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["n_failed"] == 1


@pytest.mark.parametrize(
    "ablate,zero",
    [("searcher", ["ground", "ocr", "embed", "map"]), ("reasoner", ["reasoner"])],
)
def test_ablation_counters(runner, demo_dir, tmp_path, ablate, zero):
    out = tmp_path / ablate
    res = run_cli(runner, "run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", out, "--ablate", ablate)
    assert res.exit_code == 0, res.output
    calls = json.loads((out / "manifest.json").read_text())["tool_calls"]
    assert all(calls.get(k, 0) == 0 for k in zero)
    assert all(r["guess"] is not None for r in read_jsonl(out / "records.jsonl"))


def test_training_ablation_uses_base_reasoner(runner, demo_dir, tmp_path):
    res = run_cli(runner, "run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", tmp_path, "--ablate", "training")
    assert res.exit_code == 0
    recs = read_jsonl(tmp_path / "records.jsonl")
    assert recs[2]["reasoning"] == "A sunny coastal town with palm trees."


def test_report_formats(runner, demo_dir, tmp_path):
    out = tmp_path / "run"
    run_cli(runner, "run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", out)
    res = run_cli(runner, "report", out / "records.jsonl", "--format", "csv", "--out", tmp_path / "rep.csv")
    assert res.exit_code == 0
    row = parse_csv_report((tmp_path / "rep.csv").read_text())
    assert row["n"] == 3 and row["street_pct"] == pytest.approx(200 / 3)
    for suffix in ("accuracy", "distance", "reasoning_length"):
        png = tmp_path / f"rep_{suffix}.png"
        assert png.exists() and Image.open(png).size[0] > 100
    js = run_cli(runner, "report", out / "records.jsonl", "--format", "json")
    assert json.loads(js.stdout)["accuracy_pct"]["Street"] == pytest.approx(200 / 3)
    txt = run_cli(runner, "report", out / "records.jsonl", "--no-figures")
    assert "66.7" in txt.stdout


def test_report_bad_file(runner, tmp_path):
    (tmp_path / "r.jsonl").write_text('{"schema_version": 1}\n')
    res = run_cli(runner, "report", tmp_path / "r.jsonl")
    assert res.exit_code == 2 and "r.jsonl:1" in res.output


def test_score_flat_predictions(runner, demo_dir, tmp_path):
    preds = tmp_path / "p.jsonl"
    preds.write_text(
        '{"id": "s1-lower-mill", "latitude": 50.72361, "longitude": -3.52694}\n'
        '{"id": "s3-ashkelon", "lat": "bad"}\n'
    )
    res = run_cli(runner, "score", preds, demo_dir / "dataset.jsonl")
    assert res.exit_code == 0
    rep = json.loads(res.stdout)
    assert rep["n"] == 2 and rep["n_failed"] == 1 and rep["accuracy_pct"]["Street"] == 50


def test_score_unknown_id(runner, demo_dir, tmp_path):
    (tmp_path / "p.jsonl").write_text('{"id": "ghost", "latitude": 0, "longitude": 0}\n')
    res = run_cli(runner, "score", tmp_path / "p.jsonl", demo_dir / "dataset.jsonl")
    assert res.exit_code == 2 and "ghost" in res.output


def test_score_reasoning(runner, tmp_path):
    p = tmp_path / "pairs.jsonl"
    p.write_text(json.dumps({"id": "1", "candidate": "The cat sat", "reference": "the cat"}) + "\n")
    res = run_cli(runner, "score-reasoning", p)
    out = json.loads(res.stdout)
    assert out["n"] == 1 and abs(out["rouge1_f1"] - 0.8) < 1e-9 and abs(out["rougeL_f1"] - 0.8) < 1e-9


def test_build_index_matches_demo(runner, demo_dir, tmp_path):
    out = tmp_path / "i.gbix"
    res = run_cli(runner, "build-index", demo_dir / "guidebook.jsonl", out, "--config", demo_dir / "config.toml")
    assert res.exit_code == 0 and "n=3 dim=512" in res.stdout
    assert out.read_bytes() == (demo_dir / "guidebook.gbix").read_bytes()
    assert run_cli(runner, "build-index", demo_dir / "guidebook.jsonl", out, "--config", demo_dir / "config.toml").exit_code == 2


def test_build_index_unreachable(runner, demo_dir, tmp_path):
    res = run_cli(
        runner, "build-index", demo_dir / "guidebook.jsonl", tmp_path / "i.gbix", "--embed-url", "http://127.0.0.1:9"
    )
    assert res.exit_code == 2


def test_ingest_and_stitch(runner, tmp_path):
    colors = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (0, 0, 0)]
    views = []
    for i, c in enumerate(colors):
        views.append(tmp_path / f"v{i}.png")
        Image.new("RGB", (640, 640), c).save(views[-1])
    res = run_cli(runner, "stitch", *views, tmp_path / "pano.png")
    assert res.exit_code == 0 and "2560x640" in res.stdout
    (tmp_path / "m.csv").write_text("id,image,lat,lon\np1,pano.png,1,2\n")
    res = run_cli(runner, "ingest", tmp_path / "m.csv", tmp_path / "ds.jsonl")
    assert res.exit_code == 0 and read_jsonl(tmp_path / "ds.jsonl")[0]["image"] == "pano.png"


def test_stats(runner, demo_dir, tmp_path):
    run_cli(runner, "run", "--config", demo_dir / "config.toml", demo_dir / "dataset.jsonl", tmp_path)
    res = run_cli(runner, "stats", tmp_path / "records.jsonl", "--edges", "0,1,1000,20000", "--figures", tmp_path)
    stats = json.loads(res.stdout)
    assert [b["count"] for b in stats["histogram"]] == [2, 0, 1]
    assert (tmp_path / "stats_distance.png").exists()


def test_demo_command(runner, tmp_path):
    res = run_cli(runner, "demo", tmp_path / "d")
    assert res.exit_code == 0 and (tmp_path / "d" / "config.toml").exists()
