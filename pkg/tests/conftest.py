import json
from dataclasses import replace

import httpx
import pytest

from georeason import demo
from georeason.config import build_runtime, load_config


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    demo.build_demo(root)
    return root


@pytest.fixture(scope="session")
def world():
    return demo.make_world()


@pytest.fixture
def make_runtime(demo_dir, world):
    """Build a runtime over the demo config.

    With ``overrides`` ({host: handler}) requests are answered live by the
    scripted world (or the override), bypassing recorded fixtures.
    """
    opened = []

    def factory(*, overrides=None, live=False, pipeline=None, ablate=None):
        cfg = load_config(demo_dir / "config.toml")
        if ablate:
            cfg = cfg.with_ablations(**ablate)
        if pipeline:
            cfg = replace(cfg, pipeline=replace(cfg.pipeline, **pipeline))
        transport = None
        if overrides is not None or live:
            base = demo.make_handler(world)
            table = overrides or {}

            def handle(request):
                fn = table.get(request.url.host, base)
                status, body = fn(request)
                return httpx.Response(status, json=body)

            transport = httpx.MockTransport(handle)
        rt = build_runtime(cfg, transport=transport, sleep=lambda s: None)
        opened.append(rt)
        return rt

    yield factory
    for rt in opened:
        rt.close()


def chat(text):
    return 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
