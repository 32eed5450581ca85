"""Shared fixtures: fixed clock, scripted providers, fixture search and agent wiring"""

import json
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import httpx
import pytest

from src import context_store
from src.config import OrchestratorConfig
from src.llm_gateway import LLMGateway
from src.models import (
    CandidateAnswer,
    GlobalResearchContext,
    PlanStep,
    RawSearchResult,
    ResearchPlan,
    SearchQuery,
    SynthesizedAnswer,
    Trajectory,
)
from src.orchestrator import Dependencies, Orchestrator
from src.planner import Planner
from src.prompts import PromptLibrary
from src.report_writer import ReportWriter
from src.run_log import RunLog
from src.search_client import SearchClient, StaticBackend
from src.searcher import Searcher

FIXED_NOW = datetime(2025, 1, 1, 12, 0, tzinfo=timezone.utc)
TOPIC = "Impact of solid-state batteries on electric vehicle range"
NO_CHANGE = {"update_needed": False, "rationale": "the plan still fits", "edits": []}


def fixed_clock() -> datetime:
    return FIXED_NOW


def plan_reply(*steps: str) -> Dict[str, Any]:
    return {"steps": list(steps or ("Survey the field", "Collect key numbers", "Compare outlooks"))}


def query_reply(text: str, step_id: Optional[str] = "step-1") -> Dict[str, Any]:
    return {"query": text, "rationale": f"to learn about {text}", "plan_step_id": step_id}


def judge_reply(percent: float, unexplored: Sequence[str] = ()) -> Dict[str, Any]:
    return {"percent": percent, "rationale": f"judged {percent}", "unexplored_areas": list(unexplored)}


def result(url: str, score: float, title: str = "", content: str = "") -> RawSearchResult:
    return RawSearchResult(url=url, title=title or url, content=content or f"evidence from {url}", score=score)


def candidate_echo(request) -> str:
    return f"answer from {request.request_tag}"


def merge_echo(request) -> str:
    # keeps every candidate answer verbatim
    return "MERGED\n" + request.user_prompt


def research_script(
    judge_percents: Iterable[float],
    queries: Optional[List[str]] = None,
    reflections: Optional[List[Dict[str, Any]]] = None,
    candidates: int = 3,
    report: Any = "## Findings\nSolid-state cells raise range.",
) -> List[tuple]:
    """Keyed script for a full run: one query, reflection and judgement per iteration"""
    percents = list(judge_percents)
    queries = queries if queries is not None else [f"query number {i + 1}" for i in range(len(percents))]
    entries: List[tuple] = [("plan", plan_reply())]
    entries += [("query", query_reply(text)) for text in queries]
    entries += [(f"candidate-{cid}", candidate_echo) for cid in range(1, candidates + 1)]
    entries.append(("merge", merge_echo))
    entries += [("reflect", decision) for decision in (reflections or [NO_CHANGE])]
    entries += [("judge", judge_reply(p)) for p in percents]
    entries.append(("report", report))
    return entries


def static_search(default: Optional[List[RawSearchResult]] = None, **_: Any) -> SearchClient:
    if default is None:
        default = [result("https://a.example/1", 0.9), result("https://b.example/2", 0.6),
                   result("https://c.example/3", 0.1)]
    return SearchClient(StaticBackend({}, default=default))


def make_gateway(provider, run_log: Optional[RunLog] = None) -> LLMGateway:
    if run_log is None:
        run_log = RunLog()
    return LLMGateway(provider, run_log=run_log, transport_attempts=3, backoff_multiplier=0)


def build_orchestrator(
    provider,
    cfg: Optional[OrchestratorConfig] = None,
    search_client: Optional[SearchClient] = None,
    store=None,
    parallel: bool = True,
    event_log=None,
) -> Orchestrator:
    cfg = cfg or OrchestratorConfig()
    gateway = make_gateway(provider)
    prompts = PromptLibrary()
    deps = Dependencies(
        planner=Planner(gateway, prompts, cfg.context_budget),
        searcher=Searcher(gateway, search_client or static_search(), prompts, cfg.context_budget,
                          parallel_candidates=parallel, clock=fixed_clock),
        report_writer=ReportWriter(gateway, prompts, clock=fixed_clock),
        store=store,
        event_log=event_log,
        new_run_id=lambda: "run-test",
    )
    return Orchestrator(cfg, deps)


class RecordingTransport:
    """httpx transport that records every request and replies from a handler"""

    def __init__(self, handler):
        self.requests: List[httpx.Request] = []
        self._handler = handler
        self.transport = httpx.MockTransport(self._record)

    def _record(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(request)
        return self._handler(request)

    def bodies(self) -> List[Dict[str, Any]]:
        return [json.loads(r.content) for r in self.requests]


def chat_completion(text: str, finish_reason: str = "stop") -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text},
                                                   "finish_reason": finish_reason}]})


@pytest.fixture
def prompts() -> PromptLibrary:
    return PromptLibrary()



def simple_plan(*descriptions: str, version: int = 1) -> ResearchPlan:
    descriptions = descriptions or ("step 1", "step 2", "step 3")
    steps = tuple(PlanStep(id=f"step-{i + 1}", description=d, position=i) for i, d in enumerate(descriptions))
    return ResearchPlan(topic=TOPIC, version=version, steps=steps)


def trajectory(seq_no: int, answer: str = "", urls: Sequence[str] = ("https://a.example",),
               content: str = "") -> Trajectory:
    artifacts = tuple(result(url, 0.8, content=content or f"excerpt {seq_no} from {url}") for url in urls)
    text = answer or f"answer {seq_no}"
    return Trajectory(
        seq_no=seq_no,
        query=SearchQuery(text=f"query {seq_no}", seq_no=seq_no),
        artifacts=artifacts,
        candidate_answers=(CandidateAnswer(candidate_id=1, text=text),),
        synthesized_answer=SynthesizedAnswer(text=text, source_urls=tuple(dict.fromkeys(urls)),
                                             contributing_candidates=(1,)),
        created_at=FIXED_NOW,
    )


def context_with(*trajectories: Trajectory) -> GlobalResearchContext:
    """A context holding a version-1 plan and the given trajectories"""
    ctx = context_store.record_plan_version(context_store.new_context(TOPIC, "run-1"), simple_plan(), "initial plan")
    for t in trajectories:
        ctx = context_store.append_trajectory(ctx, t)
    return ctx
