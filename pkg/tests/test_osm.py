import json

import httpx
import pytest

from georeason.gateway import EndpointConfig, FixtureStore, FixtureTransport, Gateway
from georeason.geodesy import GeoPoint
from georeason.osm import OsmClient, RateLimiter, RateLimitError, SearchCache, normalize_query, parse_places, search_request

EP = EndpointConfig("osm", "http://osm.test", max_retries=0)

LOWER_MILL = [
    {
        "name": "Lower Mill",
        "display_name": "Lower Mill, Exeter, Devon, England, United Kingdom",
        "lat": "50.7236100",
        "lon": "-3.5269400",
        "importance": 0.21,
    }
]
BRADESCO = [
    {"display_name": "Bradesco, Avenida Paulista, São Paulo, Brazil", "lat": "-23.5614", "lon": "-46.6559"},
    {"display_name": "Bradesco, Avenida da Liberdade, Lisboa, Portugal", "lat": "38.7223", "lon": "-9.1393"},
    {"display_name": "Bradesco, Rua Rainha Ginga, Luanda, Angola", "lat": "-8.8147", "lon": "13.2302"},
]
PARIS = [{"name": "Paris", "display_name": "Paris, Île-de-France, France", "lat": "48.8588897", "lon": "2.3200410"}]
CHILE = [{"name": "Chile", "display_name": "Chile", "lat": "-31.7613365", "lon": "-71.3187697"}]


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, s):
        assert s >= 0
        self.now += s


@pytest.fixture
def fixtures(tmp_path):
    store = FixtureStore(tmp_path / "fx")
    store.add(search_request(EP, "Lower Mill", 3), LOWER_MILL)
    store.add(search_request(EP, "Bradesco", 3), BRADESCO)
    store.add(search_request(EP, "Paris, France", 1), PARIS)
    store.add(search_request(EP, "Chile", 1), CHILE)
    store.add(search_request(EP, "Nowhere, Atlantis", 1), [])
    return tmp_path / "fx"


def client(fixtures, **kw):
    transport = FixtureTransport(fixtures)
    return OsmClient(Gateway(transport), EP, **kw), transport


def test_lower_mill(fixtures):
    osm, _ = client(fixtures)
    places = osm.search("Lower Mill")
    assert len(places) == 1
    p = places[0]
    assert p.name == "Lower Mill" and p.location == GeoPoint(50.72361, -3.52694)
    assert p.render() == "Lower Mill | Lower Mill, Exeter, Devon, England, United Kingdom | (50.723610, -3.526940)"


def test_bradesco_namesakes(fixtures):
    osm, _ = client(fixtures)
    places = osm.search("Bradesco")
    assert [p.address.rsplit(", ", 1)[1] for p in places] == ["Brazil", "Portugal", "Angola"]
    assert [p.importance_rank for p in places] == [0, 1, 2]
    assert all(p.name == "Bradesco" for p in places)


def test_geocode_city(fixtures):
    osm, _ = client(fixtures)
    assert osm.geocode_city("France", "Paris") == GeoPoint(48.8588897, 2.3200410)
    assert osm.geocode_city("Atlantis", "Nowhere") is None
    assert osm.geocode_city("Chile", "") == GeoPoint(-31.7613365, -71.3187697)


@pytest.mark.parametrize("q", ["", "   ", "\t\n"])
def test_blank_query(fixtures, q):
    osm, transport = client(fixtures)
    with pytest.raises(ValueError):
        osm.search(q)
    assert transport.calls == []


def test_limit_respected():
    assert len(parse_places(json.dumps(BRADESCO), 2)) == 2


def test_user_agent_sent():
    seen = []

    def handler(r):
        seen.append(r)
        return httpx.Response(200, json=[])

    OsmClient(Gateway(httpx.MockTransport(handler)), EP).search("x")
    assert seen[0].headers["user-agent"].startswith("georeason/")
    assert dict(seen[0].url.params) == {"q": "x", "format": "json", "limit": "3"}


def test_cache_hit_is_identical_and_skips_network(fixtures, tmp_path):
    cache_path = tmp_path / "cache.jsonl"
    osm, transport = client(fixtures, cache=SearchCache(cache_path))
    first = osm.search("Bradesco")
    again = osm.search("  BRADESCO ")
    assert first == again and len(transport.calls) == 1
    # survives a restart
    osm2, transport2 = client(fixtures, cache=SearchCache(cache_path))
    assert osm2.search("bradesco") == first and transport2.calls == []
    assert cache_path.read_text().count("\n") == 1


def test_normalize_query():
    assert normalize_query("  Lower   MILL\t") == "lower mill"


def test_rate_limit_fake_clock():
    clock = FakeClock()
    times = []

    def handler(r):
        times.append(clock.now)
        return httpx.Response(200, json=[])

    osm = OsmClient(
        Gateway(httpx.MockTransport(handler)), EP, min_interval=1.0, clock=clock, sleep=clock.sleep
    )
    for i in range(10):
        osm.search(f"q{i}")
        clock.now += 0.1  # caller work between requests
    gaps = [b - a for a, b in zip(times, times[1:])]
    assert len(times) == 10 and all(g >= 1.0 - 1e-9 for g in gaps)
    assert clock.now < 10.5


def test_public_host_defaults_to_one_second():
    ep = EndpointConfig("osm", "https://nominatim.openstreetmap.org")
    osm = OsmClient(Gateway(httpx.MockTransport(lambda r: httpx.Response(200, json=[]))), ep)
    assert osm.limiter.interval == 1.0
    assert OsmClient(osm.gateway, EP).limiter.interval == 0.0


def test_rate_limiter_no_wait_when_idle():
    clock = FakeClock()
    rl = RateLimiter(1.0, clock, clock.sleep)
    rl.acquire()
    clock.now += 5
    rl.acquire()
    assert clock.now == 5


def test_429_surfaces_as_rate_limit_error():
    osm = OsmClient(Gateway(httpx.MockTransport(lambda r: httpx.Response(429))), EP)
    with pytest.raises(RateLimitError):
        osm.search("x")
