"""
Global Research Context: the append-only memory of a research run.

Operations return new context values and never touch stored entries.
`ContextStore` persists a context as one schema-versioned JSON document.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

from pydantic import ValidationError

from src.errors import PersistenceError, RenderError, SequencingError
from src.models import (
    CONTEXT_SCHEMA_VERSION,
    GlobalResearchContext,
    LoopCheckpoint,
    PlanVersion,
    ProgressAssessment,
    RawSearchResult,
    ResearchPlan,
    Trajectory,
)
from src.search_client import normalize_query

logger = logging.getLogger(__name__)

TokenEstimator = Callable[[str], int]


def estimate_tokens(text: str) -> int:
    """characters / 4, rounded up"""
    return (len(text) + 3) // 4


def new_context(topic: str, run_id: str) -> GlobalResearchContext:
    if not topic.strip():
        raise ValueError("topic must not be empty")
    return GlobalResearchContext(run_id=run_id, topic=topic)


def next_seq_no(ctx: GlobalResearchContext) -> int:
    return ctx.trajectories[-1].seq_no + 1 if ctx.trajectories else 1


def append_trajectory(ctx: GlobalResearchContext, trajectory: Trajectory) -> GlobalResearchContext:
    expected = next_seq_no(ctx)
    if trajectory.seq_no != expected:
        raise SequencingError(f"trajectory seq_no {trajectory.seq_no} out of order, expected {expected}")
    return ctx.model_copy(update={"trajectories": ctx.trajectories + (trajectory,)})


def record_plan_version(ctx: GlobalResearchContext, plan: ResearchPlan, reason: str) -> GlobalResearchContext:
    if ctx.plan_versions and plan.version != ctx.plan_versions[-1].plan.version + 1:
        raise SequencingError(
            f"plan version {plan.version} does not follow {ctx.plan_versions[-1].plan.version}")
    entry = PlanVersion(plan=plan, reason=reason)
    return ctx.model_copy(update={"plan_versions": ctx.plan_versions + (entry,)})


def record_progress(ctx: GlobalResearchContext, assessment: ProgressAssessment) -> GlobalResearchContext:
    return ctx.model_copy(update={"progress_history": ctx.progress_history + (assessment,)})


def with_checkpoint(ctx: GlobalResearchContext, checkpoint: LoopCheckpoint) -> GlobalResearchContext:
    return ctx.model_copy(update={"checkpoint": checkpoint})


def latest_plan(ctx: GlobalResearchContext) -> Optional[ResearchPlan]:
    """The plan the loop is following: the checkpointed one, else the newest version"""
    if ctx.checkpoint.current_plan is not None:
        return ctx.checkpoint.current_plan
    return ctx.plan_versions[-1].plan if ctx.plan_versions else None


def has_query(ctx: GlobalResearchContext, query_text: str) -> bool:
    probe = normalize_query(query_text)
    return any(normalize_query(t.query.text) == probe for t in ctx.trajectories)


def all_artifacts(ctx: GlobalResearchContext) -> List[RawSearchResult]:
    return [artifact for t in ctx.trajectories for artifact in t.artifacts]


def _excerpt(artifact: RawSearchResult) -> str:
    title = artifact.title or artifact.url
    return f"[{title}]({artifact.url}) relevance {artifact.score:.2f}\n{artifact.content}"


def _assemble(ctx: GlobalResearchContext, keep: List[List[bool]]) -> str:
    plan = latest_plan(ctx)
    parts = [f"# Topic\n{ctx.topic}", "# Current plan\n" + (plan.render() if plan else "(no plan yet)")]
    parts.append(f"# Research trajectories ({len(ctx.trajectories)})")
    for t, kept in zip(ctx.trajectories, keep):
        answer = t.synthesized_answer.text if t.synthesized_answer else "(no answer)"
        urls = t.synthesized_answer.source_urls if t.synthesized_answer else ()
        block = [f"## Query {t.seq_no}: {t.query.text}", "Answer:", answer]
        if urls:
            block.append("Sources:")
            block.extend(f"- {url}" for url in urls)
        excerpts = [_excerpt(a) for a, k in zip(t.artifacts, kept) if k]
        if excerpts:
            block.append("Evidence excerpts:")
            block.extend(excerpts)
        parts.append("\n".join(block))
    return "\n\n".join(parts) + "\n"


def minimum_budget(ctx: GlobalResearchContext, estimator: TokenEstimator = estimate_tokens) -> int:
    """Smallest budget that renders: every query, answer and source URL, no excerpts"""
    return estimator(_assemble(ctx, [[False] * len(t.artifacts) for t in ctx.trajectories]))


def render_context(
    ctx: GlobalResearchContext,
    budget: int,
    estimator: TokenEstimator = estimate_tokens,
) -> str:
    """
    Deterministic prompt rendering of the context within a token budget.

    Raw evidence excerpts are dropped oldest first until the text fits;
    queries, synthesized answers and source URLs are never dropped.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    keep = [[True] * len(t.artifacts) for t in ctx.trajectories]
    text = _assemble(ctx, keep)
    if estimator(text) <= budget:
        return text

    order: List[Tuple[int, int]] = [
        (ti, ai) for ti, t in enumerate(ctx.trajectories) for ai in range(len(t.artifacts))
    ]
    for ti, ai in order:
        keep[ti][ai] = False
        text = _assemble(ctx, keep)
        if estimator(text) <= budget:
            logger.debug(f"Context rendering dropped excerpts to fit {budget} tokens")
            return text

    raise RenderError(
        f"context needs at least {estimator(text)} tokens but the budget is {budget}",
        budget=budget,
    )


class ContextStore:
    """Saves and loads a context as a single JSON document"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, ctx: GlobalResearchContext):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        data = ctx.model_dump(mode="json")
        # write-then-rename so an interrupted save never leaves a truncated file behind
        fd, tmp_name = tempfile.mkstemp(dir=self.path.parent, prefix=".context-", suffix=".json")
        try:
            with os.fdopen(fd, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, ensure_ascii=False)
            os.replace(tmp_name, self.path)
        except OSError as e:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise PersistenceError(f"cannot write context file {self.path}: {e}")
        logger.debug(f"Saved context ({len(ctx.trajectories)} trajectories) to {self.path}")

    def load(self) -> GlobalResearchContext:
        try:
            with open(self.path, 'r', encoding='utf-8') as f:
                raw = f.read()
        except FileNotFoundError:
            raise PersistenceError(f"context file not found: {self.path}")
        except OSError as e:
            raise PersistenceError(f"cannot read context file {self.path}: {e}")

        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise PersistenceError(f"context file {self.path} is corrupt: {e}")
        if not isinstance(data, dict):
            raise PersistenceError(f"context file {self.path} does not hold a JSON object")

        version = data.get("schema_version")
        if version != CONTEXT_SCHEMA_VERSION:
            raise PersistenceError(
                f"context file {self.path} has schema_version {version!r}, expected {CONTEXT_SCHEMA_VERSION}",
                field="schema_version",
            )
        try:
            return GlobalResearchContext.model_validate(data)
        except ValidationError as e:
            problem = e.errors()[0]
            field = ".".join(str(part) for part in problem["loc"]) or "<root>"
            raise PersistenceError(f"context file {self.path} is invalid at {field}: {problem['msg']}",
                                   field=field)


def save(ctx: GlobalResearchContext, path: Union[str, Path]):
    ContextStore(path).save(ctx)


def load(path: Union[str, Path]) -> GlobalResearchContext:
    return ContextStore(path).load()
