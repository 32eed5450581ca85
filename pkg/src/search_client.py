"""
Web search tool: scored results from Tavily or from recorded fixtures
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import httpx
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from src.errors import FixtureError, SearchError
from src.models import RawSearchResult, SearchConfig, SearchQuery

logger = logging.getLogger(__name__)

DEFAULT_FIXTURE = "_default.json"


def normalize_query(text: str) -> str:
    """Case-fold, trim and collapse internal whitespace"""
    return " ".join(text.casefold().split())


def to_result(item: Mapping[str, Any]) -> Optional[RawSearchResult]:
    """Convert one backend record to a result; percent-scale scores are rescaled to [0,1]"""
    url = (item.get("url") or "").strip()
    if not url:
        return None
    try:
        score = float(item.get("score") or 0.0)
    except (TypeError, ValueError):
        score = 0.0
    if score > 1.0:
        score = score / 100.0
    score = min(max(score, 0.0), 1.0)
    return RawSearchResult(
        url=url,
        title=item.get("title") or "",
        content=(item.get("content") or "").strip(),
        score=score,
    )


def filter_by_score(results: Iterable[RawSearchResult], threshold: float) -> List[RawSearchResult]:
    """Drop every result whose score is less than the threshold; order is preserved"""
    return [result for result in results if result.score >= threshold]


class _TransientSearchError(SearchError):
    pass


class SearchBackend(ABC):
    name = "backend"

    @abstractmethod
    def fetch(self, query_text: str, max_results: int) -> List[RawSearchResult]:
        """Return scored results for a query (possibly more than max_results, in any order)"""

    def close(self):
        pass


class TavilyBackend(SearchBackend):
    """Tavily search API over httpx"""

    name = "tavily"

    def __init__(
        self,
        api_key: str,
        endpoint: str = "https://api.tavily.com/search",
        search_depth: str = "advanced",
        timeout: float = 30.0,
        attempts: int = 3,
        backoff_multiplier: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.search_depth = search_depth
        self.attempts = attempts
        self.backoff_multiplier = backoff_multiplier
        self.client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    def _post(self, query_text: str, max_results: int) -> Dict[str, Any]:
        try:
            response = self.client.post(self.endpoint, json={
                "query": query_text,
                "max_results": max_results,
                "search_depth": self.search_depth,
                "include_answer": False,
                "include_raw_content": False,
                "include_images": False,
            })
        except httpx.TransportError as e:
            raise _TransientSearchError(f"Tavily network error: {e}")
        if response.status_code == 429 or response.status_code >= 500:
            raise _TransientSearchError(f"Tavily HTTP {response.status_code}")
        if response.status_code >= 400:
            # include a trimmed body so auth and quota errors are visible
            raise SearchError(f"Tavily HTTP {response.status_code}: {response.text.strip()[:600]}")
        try:
            return response.json()
        except ValueError as e:
            raise SearchError(f"Tavily returned a non-JSON body: {e}")

    def fetch(self, query_text: str, max_results: int) -> List[RawSearchResult]:
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(self.attempts),
                wait=wait_exponential(multiplier=self.backoff_multiplier, max=30),
                retry=retry_if_exception_type(_TransientSearchError),
            ):
                with attempt:
                    data = self._post(query_text, max_results)
        except RetryError as e:
            raise SearchError(f"search failed after {self.attempts} attempts: {e.last_attempt.exception()}")

        results = [to_result(item) for item in data.get("results", []) or []]
        return [r for r in results if r is not None]

    def close(self):
        self.client.close()


class StaticBackend(SearchBackend):
    """In-memory query → results mapping keyed by normalized query text"""

    name = "static"

    def __init__(
        self,
        fixtures: Mapping[str, List[RawSearchResult]],
        default: Optional[List[RawSearchResult]] = None,
    ):
        self.fixtures = {normalize_query(q): list(results) for q, results in fixtures.items()}
        self.default = list(default) if default is not None else None

    def fetch(self, query_text: str, max_results: int) -> List[RawSearchResult]:
        key = normalize_query(query_text)
        if key in self.fixtures:
            return list(self.fixtures[key])
        if self.default is not None:
            return list(self.default)
        raise FixtureError(f"no search fixture recorded for query '{query_text}'")


class FixtureBackend(StaticBackend):
    """
    Recorded search results loaded from a directory of JSON files, one per query:
    {"query": "...", "results": [{"url": ..., "title": ..., "content": ..., "score": ...}]}.
    An optional `_default.json` answers queries without a recording.
    """

    name = "fixtures"

    def __init__(self, fixtures_dir: Union[str, Path]):
        self.fixtures_dir = Path(fixtures_dir)
        if not self.fixtures_dir.is_dir():
            raise FixtureError(f"fixtures directory not found: {self.fixtures_dir}")

        fixtures: Dict[str, List[RawSearchResult]] = {}
        default = None
        for path in sorted(self.fixtures_dir.glob("*.json")):
            try:
                with open(path, 'r') as f:
                    data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise FixtureError(f"unreadable search fixture {path}: {e}")
            results = [r for r in (to_result(item) for item in data.get("results", [])) if r is not None]
            if path.name == DEFAULT_FIXTURE:
                default = results
            elif "query" in data:
                fixtures[data["query"]] = results
            else:
                logger.warning(f"Search fixture {path} has no 'query' field; skipped")

        super().__init__(fixtures, default=default)
        logger.info(f"Loaded {len(self.fixtures)} search fixtures from {self.fixtures_dir}")


class SearchClient:
    """Caps results to the highest-scoring ones; threshold filtering is a separate step"""

    def __init__(self, backend: SearchBackend):
        self.backend = backend

    def search(self, query: SearchQuery, config: SearchConfig) -> List[RawSearchResult]:
        results = self.backend.fetch(query.text, config.max_results)
        # stable sort keeps backend order among equal scores
        ranked = sorted(results, key=lambda r: r.score, reverse=True)[:config.max_results]
        logger.info(f"Search #{query.seq_no} '{query.text}' returned {len(ranked)} results")
        return ranked

    def close(self):
        self.backend.close()
