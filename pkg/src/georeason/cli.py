"""Command-line entry points.

Exit codes: 0 success, 1 partial (some samples failed), 2 configuration or I/O failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import click

from georeason import embedindex
from georeason.config import ConfigError, build_runtime, load_config
from georeason.corpus import DatasetError, dataset_stats, ingest_csv, load_dataset, load_guidebook, stitch_files
from georeason.gateway import CallCounter, EndpointConfig, FixtureTransport, Gateway, GatewayError
from georeason.reporting import (
    RecordFileError,
    load_records,
    render_csv,
    render_json,
    render_text,
    report_from_records,
    score_predictions,
    write_figures,
    write_records,
)
from georeason.textmetrics import score_texts

EXIT_OK, EXIT_PARTIAL, EXIT_FAIL = 0, 1, 2


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_FAIL)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Reasoning-based image geo-localization pipeline and evaluation harness."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("demo")
@click.argument("out_dir", type=click.Path(file_okay=False))
def cmd_demo(out_dir):
    """Write a self-contained offline demo (images, dataset, guidebook, fixtures, config)."""
    from georeason.demo import build_demo

    path = build_demo(out_dir)
    click.echo(f"wrote {path}")


@main.command("build-index")
@click.argument("guidebook", type=click.Path(dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Use [endpoints.embed] and [mock] from this config.")
@click.option("--embed-url", help="Embedding service base URL (instead of --config).")
@click.option("--embed-model", default="", help="Model name sent to the embedding service.")
@click.option("--fixtures", type=click.Path(file_okay=False), help="Replay embeddings from a fixture directory.")
@click.option("--force", is_flag=True, help="Overwrite an existing index file.")
def cmd_build_index(guidebook, out, config_path, embed_url, embed_model, fixtures, force):
    """Embed every guidebook image and write an index file."""
    if Path(out).exists() and not force:
        _fail(f"{out} exists; pass --force to overwrite")
    try:
        if config_path:
            cfg = load_config(config_path)
            endpoint = cfg.pipeline.endpoints.embed
            if endpoint is None:
                raise ConfigError("config has no [endpoints.embed]")
            fixtures = fixtures or cfg.fixtures
        elif embed_url:
            endpoint = EndpointConfig("embed", embed_url, embed_model)
        else:
            raise ConfigError("give --config or --embed-url")
        entries = load_guidebook(guidebook)
    except (ConfigError, DatasetError, OSError) as exc:
        _fail(str(exc))

    transport = FixtureTransport(fixtures) if fixtures else None
    items = []
    try:
        with Gateway(transport, counter=CallCounter()) as gw:
            for e in entries:
                vec = gw.embed_image(endpoint, Path(e.image_path).read_bytes())
                items.append(embedindex.IndexEntry(e.id, vec, e.clue, e.source))
        index = embedindex.build(items)
        index.save(out)
    except (GatewayError, OSError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"n={index.n} dim={index.dim}")


ABLATIONS = ("reasoner", "searcher", "training")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.argument("dataset", type=click.Path(dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--parallelism", "-j", default=1, show_default=True, type=click.IntRange(min=1))
@click.option(
    "--ablate",
    multiple=True,
    type=click.Choice(ABLATIONS),
    help="Disable the reasoner or searcher, or swap in the untrained reasoner endpoint (training).",
)
@click.option("--force", is_flag=True, help="Overwrite existing outputs in OUT_DIR.")
def cmd_run(config_path, dataset, out_dir, parallelism, ablate, force):
    """Run the pipeline over DATASET and write records, report and manifest to OUT_DIR."""
    out = Path(out_dir)
    records_path = out / "records.jsonl"
    if records_path.exists() and not force:
        _fail(f"{records_path} exists; pass --force to overwrite")
    try:
        cfg = load_config(config_path).with_ablations(
            reasoner="reasoner" in ablate, searcher="searcher" in ablate, training="training" in ablate
        )
        samples = load_dataset(dataset)
        runtime = build_runtime(cfg)
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        _fail(str(exc))

    started = _now()
    try:
        result = runtime.pipeline.run_batch(samples, parallelism=parallelism)
    except (GatewayError, ValueError) as exc:
        _fail(f"run aborted: {exc}")
    finally:
        runtime.close()
    finished = _now()

    out.mkdir(parents=True, exist_ok=True)
    write_records(result.records, records_path)
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for r in result.records:
            fh.write(json.dumps({"sample_id": r.sample_id, "latencies": r.latencies}) + "\n")
    if result.report is not None:
        (out / "report.json").write_text(render_json(result.report) + "\n")

    knowledge = Counter(k.source for r in result.records for k in r.knowledge)
    grounded = Counter(q["label"] for r in result.records for q in r.queries if "label" in q)
    manifest = {
        "config_digest": cfg.digest(),
        "dataset_digest": _sha256(dataset),
        "started": started,
        "finished": finished,
        "n_samples": len(samples),
        "n_failed": result.n_failed,
        "ablations": sorted(ablate),
        "parallelism": parallelism,
        "tool_calls": result.counters,
        "knowledge_items": {s: knowledge.get(s, 0) for s in ("guidebook", "map", "vlm")},
        "grounded_items": dict(sorted(grounded.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    if result.report is not None:
        click.echo(render_text(result.report), nl=False)
    click.echo(f"records: {records_path}")
    sys.exit(EXIT_PARTIAL if result.n_failed else EXIT_OK)


@main.command("score")
@click.argument("predictions", type=click.Path(dir_okay=False))
@click.argument("truth", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write the report JSON here instead of stdout.")
def cmd_score(predictions, truth, out):
    """Score a predictions JSONL against a truth dataset JSONL."""
    try:
        samples = load_dataset(truth, check_images=False)
        report, _details = score_predictions(predictions, samples)
    except (DatasetError, RecordFileError, OSError) as exc:
        _fail(str(exc))
    text = render_json(report) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("report")
@click.argument("records_path", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["text", "json", "csv"]), default="text", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the rendered report here; figures go alongside.")
@click.option("--figures", "figures_dir", type=click.Path(file_okay=False), help="Directory for PNG figures.")
@click.option("--no-figures", is_flag=True, help="Skip figure rendering.")
def cmd_report(records_path, fmt, out, figures_dir, no_figures):
    """Render accuracy, mean distance and mean score from a records JSONL."""
    try:
        records = load_records(records_path)
        report = report_from_records(records)
    except (RecordFileError, OSError) as exc:
        _fail(str(exc))
    rendered = {"text": render_text, "json": lambda r: render_json(r) + "\n", "csv": render_csv}[fmt](report)
    if out:
        Path(out).write_text(rendered)
    else:
        click.echo(rendered, nl=False)
    if not no_figures and (figures_dir or out):
        target = Path(figures_dir) if figures_dir else Path(out).resolve().parent
        stem = Path(out).stem if out else "report"
        for p in write_figures(records, report, target, stem=stem):
            click.echo(f"figure: {p}", err=True)


@main.command("score-reasoning")
@click.argument("pairs", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
def cmd_score_reasoning(pairs, out):
    """Mean ROUGE-1/2/L F1 over a JSONL of {id, candidate, reference}."""
    sums = Counter()
    n = 0
    try:
        with open(pairs, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    cand, ref = row["candidate"], row["reference"]
                    if not isinstance(cand, str) or not isinstance(ref, str):
                        raise TypeError("candidate and reference must be strings")
                except (ValueError, KeyError, TypeError) as exc:
                    _fail(f"{pairs}:{lineno}: {exc}")
                for name, s in score_texts(cand, ref).items():
                    sums[name] += s.f1
                n += 1
    except OSError as exc:
        _fail(str(exc))
    if n == 0:
        _fail(f"{pairs}: no pairs")
    result = {"n": n, **{f"{name}_f1": sums[name] / n for name in ("rouge1", "rouge2", "rougeL")}}
    text = json.dumps(result, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("ingest")
@click.argument("csv_path", type=click.Path(dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--no-check-images", is_flag=True, help="Do not require image files to exist.")
def cmd_ingest(csv_path, out, no_check_images):
    """Validate a CSV manifest and write it as dataset JSONL."""
    try:
        samples = ingest_csv(csv_path, out, check_images=not no_check_images)
    except (DatasetError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(samples)} samples to {out}")


@main.command("stitch")
@click.argument("views", nargs=4, type=click.Path(dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
def cmd_stitch(views, out):
    """Stitch four views (headings 0, 90, 180, 270) into one panorama."""
    try:
        pano = stitch_files(views, out)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    click.echo(f"{pano.size[0]}x{pano.size[1]} -> {out}")


@main.command("stats")
@click.argument("records_path", type=click.Path(dir_okay=False))
@click.option("--edges", help="Comma-separated histogram bucket edges in km.")
@click.option("--figures", "figures_dir", type=click.Path(file_okay=False))
def cmd_stats(records_path, edges, figures_dir):
    """Distance histogram and reasoning length statistics for a records JSONL."""
    from georeason import plots

    try:
        records = load_records(records_path)
        bucket_edges = [float(x) for x in edges.split(",")] if edges else None
        distances = [r.distance_km for r in records if r.distance_km is not None]
        reasonings = [r.reasoning for r in records if r.reasoning.strip()]
        stats = dataset_stats(distances, reasonings or None, bucket_edges)
    except (RecordFileError, OSError, ValueError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(stats.to_dict(), indent=2))
    if figures_dir:
        plots.plot_distance_histogram(distances, Path(figures_dir) / "stats_distance.png")
        if stats.reasoning_word_counts:
            plots.plot_reasoning_lengths(stats.reasoning_word_counts, Path(figures_dir) / "stats_reasoning_length.png")


if __name__ == "__main__":
    main()
