import json
import random

import httpx
import pytest

from conftest import RecordingTransport, result
from src.errors import FixtureError, SearchError
from src.models import SearchConfig, SearchQuery
from src.search_client import (
    FixtureBackend,
    SearchClient,
    StaticBackend,
    TavilyBackend,
    filter_by_score,
    normalize_query,
    to_result,
)


def query(text: str = "solid state battery range") -> SearchQuery:
    return SearchQuery(text=text, seq_no=1)


def tavily(handler, attempts: int = 3) -> tuple:
    transport = RecordingTransport(handler)
    backend = TavilyBackend("tvly-key", attempts=attempts, backoff_multiplier=0, transport=transport.transport)
    return SearchClient(backend), transport


def test_normalize_query():
    assert normalize_query("  Solid-State   BATTERY\trange ") == "solid-state battery range"


class TestToResult:
    def test_percent_scores_are_rescaled(self):
        assert to_result({"url": "https://x", "score": 85}).score == pytest.approx(0.85)

    def test_scores_are_clamped(self):
        assert to_result({"url": "https://x", "score": -0.2}).score == 0.0
        assert to_result({"url": "https://x", "score": 250}).score == 1.0

    def test_missing_url_is_discarded(self):
        assert to_result({"url": "", "score": 0.9}) is None
        assert to_result({"title": "no url"}) is None


class TestFiltering:
    def test_threshold_is_inclusive(self):
        kept = filter_by_score([result("https://a", 0.30), result("https://b", 0.2999)], 0.30)
        assert [r.url for r in kept] == ["https://a"]

    def test_caps_at_five_then_filters(self):
        scores = [0.95, 0.9, 0.8, 0.5, 0.31, 0.29, 0.99]
        client = SearchClient(StaticBackend({}, default=[result(f"https://r{i}", s) for i, s in enumerate(scores)]))

        ranked = client.search(query(), SearchConfig())
        kept = filter_by_score(ranked, 0.30)

        assert [r.score for r in ranked] == [0.99, 0.95, 0.9, 0.8, 0.5]
        assert len(kept) == 5

    def test_all_below_threshold(self):
        client = SearchClient(StaticBackend({}, default=[result("https://low", 0.1)]))
        assert filter_by_score(client.search(query(), SearchConfig()), 0.30) == []

    def test_matches_brute_force_reference(self):
        rng = random.Random(1234)
        config = SearchConfig()
        for trial in range(1000):
            count = rng.randint(0, 12)
            results = [result(f"https://site{trial}-{i}.example", round(rng.random(), 2)) for i in range(count)]
            client = SearchClient(StaticBackend({}, default=results))

            actual = filter_by_score(client.search(query(), config), config.score_threshold)

            reference = sorted(results, key=lambda r: -r.score)[:5]
            reference = [r for r in reference if r.score >= 0.30]
            assert actual == reference, f"trial {trial}"


class TestTavily:
    def test_request_and_parsing(self):
        payload = {"results": [
            {"url": "https://a.example", "title": "A", "content": "alpha", "score": 0.72},
            {"url": "https://b.example", "title": "B", "content": "beta", "score": 0.91},
            {"url": "", "title": "no url", "content": "", "score": 0.99},
        ]}
        client, transport = tavily(lambda r: httpx.Response(200, json=payload))

        results = client.search(query(), SearchConfig())

        assert [r.url for r in results] == ["https://b.example", "https://a.example"]
        sent = transport.bodies()[0]
        assert sent["query"] == "solid state battery range"
        assert sent["max_results"] == 5
        assert transport.requests[0].headers["Authorization"] == "Bearer tvly-key"

    def test_retries_then_fails(self):
        client, transport = tavily(lambda r: httpx.Response(502))
        with pytest.raises(SearchError):
            client.search(query(), SearchConfig())
        assert len(transport.requests) == 3

    def test_recovers_from_transient_error(self):
        replies = iter([httpx.Response(429), httpx.Response(200, json={"results": []})])
        client, transport = tavily(lambda r: next(replies))
        assert client.search(query(), SearchConfig()) == []
        assert len(transport.requests) == 2

    def test_auth_error_is_not_retried(self):
        client, transport = tavily(lambda r: httpx.Response(401, text="invalid key"))
        with pytest.raises(SearchError, match="401"):
            client.search(query(), SearchConfig())
        assert len(transport.requests) == 1


class TestFixtures:
    def test_static_backend_lookup_is_normalized(self):
        backend = StaticBackend({"Battery Range": [result("https://a", 0.5)]})
        client = SearchClient(backend)
        assert client.search(query("  battery   range"), SearchConfig())[0].url == "https://a"
        with pytest.raises(FixtureError):
            client.search(query("something else"), SearchConfig())

    def test_fixture_directory(self, tmp_path):
        (tmp_path / "range.json").write_text(json.dumps({
            "query": "battery range",
            "results": [{"url": "https://range.example", "title": "Range", "content": "500 km", "score": 80}],
        }))
        (tmp_path / "_default.json").write_text(json.dumps({
            "results": [{"url": "https://default.example", "content": "fallback", "score": 0.4}],
        }))
        client = SearchClient(FixtureBackend(tmp_path))

        hit = client.search(query("Battery Range"), SearchConfig())
        miss = client.search(query("unrecorded"), SearchConfig())

        assert hit[0].score == pytest.approx(0.8)
        assert miss[0].url == "https://default.example"

    def test_missing_fixture_directory(self, tmp_path):
        with pytest.raises(FixtureError):
            FixtureBackend(tmp_path / "nope")
