"""
Domain types shared by the research agents
"""

from datetime import datetime
from enum import Enum
from typing import Annotated, Any, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# LLM gateway

class DecodingParams(Frozen):
    """Sampling parameters sent with every chat request"""

    temperature: float = Field(ge=0.0, le=2.0)
    top_k: int = Field(ge=1)


class ChatRequest(Frozen):
    system_prompt: str = Field(min_length=1)
    user_prompt: str = Field(min_length=1)
    decoding: DecodingParams
    max_output_tokens: int = Field(default=4096, ge=1)
    request_tag: str = "chat"


class FinishReason(str, Enum):
    COMPLETE = "complete"
    TRUNCATED = "truncated"
    PROVIDER_ERROR = "provider_error"


class ChatResponse(Frozen):
    text: str
    finish_reason: FinishReason = FinishReason.COMPLETE
    provider_id: str

    @model_validator(mode="after")
    def _complete_has_text(self) -> "ChatResponse":
        if self.finish_reason == FinishReason.COMPLETE and not self.text:
            raise ValueError("a complete response must carry text")
        return self


# Search

class SearchQuery(Frozen):
    text: str = Field(min_length=1)
    rationale: str = ""
    plan_step_ref: Optional[str] = None
    seq_no: int = Field(ge=1)

    @field_validator("text")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("query text must not be blank")
        return value


class RawSearchResult(Frozen):
    url: str = Field(min_length=1)
    title: str = ""
    content: str = ""
    score: float = Field(ge=0.0, le=1.0)


class SearchConfig(Frozen):
    max_results: int = Field(default=5, ge=1)
    score_threshold: float = Field(default=0.30, ge=0.0, le=1.0)


# Research plan

class StepStatus(str, Enum):
    PENDING = "pending"
    DONE = "done"
    CANCELLED = "cancelled"


class PlanStep(Frozen):
    id: str = Field(min_length=1)
    description: str = Field(min_length=1)
    status: StepStatus = StepStatus.PENDING
    position: int = Field(ge=0)


class ResearchPlan(Frozen):
    """Ordered research steps: active steps first (by position), then cancelled ones"""

    topic: str = Field(min_length=1)
    version: int = Field(default=1, ge=1)
    steps: Tuple[PlanStep, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_layout(self) -> "ResearchPlan":
        ids = [step.id for step in self.steps]
        if len(set(ids)) != len(ids):
            raise ValueError("plan step ids must be unique")
        seen_cancelled = False
        for index, step in enumerate(self.steps):
            if step.position != index:
                raise ValueError(f"step {step.id} has position {step.position}, expected {index}")
            if step.status == StepStatus.CANCELLED:
                seen_cancelled = True
            elif seen_cancelled:
                raise ValueError("cancelled steps must follow every active step")
        return self

    def active_steps(self) -> List[PlanStep]:
        return [step for step in self.steps if step.status != StepStatus.CANCELLED]

    def pending_steps(self) -> List[PlanStep]:
        return [step for step in self.steps if step.status == StepStatus.PENDING]

    def find(self, step_id: str) -> Optional[PlanStep]:
        for step in self.steps:
            if step.id == step_id:
                return step
        return None

    def render(self) -> str:
        lines = [f"Research plan (version {self.version}):"]
        for step in self.active_steps():
            lines.append(f"{step.position}. [{step.status.value}] {step.description} (id: {step.id})")
        cancelled = [step for step in self.steps if step.status == StepStatus.CANCELLED]
        if cancelled:
            lines.append("Cancelled steps:")
            lines.extend(f"- {step.description} (id: {step.id})" for step in cancelled)
        return "\n".join(lines)


class AddEdit(Frozen):
    op: Literal["add"] = "add"
    description: str = Field(min_length=1)
    position: int = Field(ge=0)


class CancelEdit(Frozen):
    op: Literal["cancel"] = "cancel"
    step_id: str = Field(min_length=1)


class ReprioritizeEdit(Frozen):
    op: Literal["reprioritize"] = "reprioritize"
    step_id: str = Field(min_length=1)
    new_position: int = Field(ge=0)


PlanEdit = Annotated[Union[AddEdit, CancelEdit, ReprioritizeEdit], Field(discriminator="op")]


class ReflectionDecision(Frozen):
    update_needed: bool
    rationale: str = ""
    edits: Tuple[PlanEdit, ...] = ()

    @model_validator(mode="after")
    def _edits_iff_update(self) -> "ReflectionDecision":
        if not self.update_needed and self.edits:
            raise ValueError("edits must be empty when update_needed is false")
        if self.update_needed and not self.edits:
            raise ValueError("update_needed is true but no edits were given")
        return self


class ProgressAssessment(Frozen):
    percent: float = Field(ge=0.0, le=100.0)
    rationale: str = ""
    unexplored_areas: Tuple[str, ...] = ()
    clamped: bool = False

    @model_validator(mode="before")
    @classmethod
    def _clamp_percent(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "percent" not in data:
            return data
        try:
            percent = float(data["percent"])
        except (TypeError, ValueError):
            return data
        if percent != percent:  # NaN
            return data
        bounded = min(max(percent, 0.0), 100.0)
        if bounded != percent:
            return {**data, "percent": bounded, "clamped": True}
        return data


class PlanDraft(Frozen):
    """Plan as the model writes it: an ordered list of step descriptions"""

    steps: Tuple[str, ...] = Field(min_length=1)

    @field_validator("steps", mode="before")
    @classmethod
    def _accept_step_objects(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [item.get("description", "") if isinstance(item, dict) else item for item in value]
        return value

    @field_validator("steps")
    @classmethod
    def _no_blank_steps(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if any(not step.strip() for step in value):
            raise ValueError("plan steps must not be blank")
        return tuple(step.strip() for step in value)


class QueryDraft(Frozen):
    query: str = Field(min_length=1)
    rationale: str = ""
    plan_step_id: Optional[str] = None


# Candidate crossover

class CandidateConfig(Frozen):
    candidate_id: int = Field(ge=0)
    decoding: DecodingParams


def _default_candidates() -> Tuple[CandidateConfig, ...]:
    return (
        CandidateConfig(candidate_id=1, decoding=DecodingParams(temperature=0.2, top_k=20)),
        CandidateConfig(candidate_id=2, decoding=DecodingParams(temperature=0.7, top_k=40)),
        CandidateConfig(candidate_id=3, decoding=DecodingParams(temperature=1.0, top_k=64)),
    )


class CrossoverConfig(Frozen):
    candidates: Tuple[CandidateConfig, ...] = Field(default_factory=_default_candidates, min_length=1)
    merge_decoding: DecodingParams = DecodingParams(temperature=0.2, top_k=20)

    @model_validator(mode="after")
    def _distinct_candidates(self) -> "CrossoverConfig":
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique")
        pairs = [(c.decoding.temperature, c.decoding.top_k) for c in self.candidates]
        if len(set(pairs)) != len(pairs):
            raise ValueError("candidates need pairwise-distinct (temperature, top_k) pairs")
        return self


class CandidateAnswer(Frozen):
    candidate_id: int
    text: str = Field(min_length=1)


class SynthesizedAnswer(Frozen):
    text: str = Field(min_length=1)
    source_urls: Tuple[str, ...] = ()
    contributing_candidates: Tuple[int, ...] = Field(min_length=1)
    merge_fallback: bool = False


# Global research context

class Trajectory(Frozen):
    seq_no: int = Field(ge=1)
    query: SearchQuery
    artifacts: Tuple[RawSearchResult, ...] = ()
    candidate_answers: Tuple[CandidateAnswer, ...] = ()
    synthesized_answer: Optional[SynthesizedAnswer] = None
    created_at: datetime
    low_confidence: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "Trajectory":
        if self.query.seq_no != self.seq_no:
            raise ValueError("trajectory seq_no must match its query")
        if self.candidate_answers and self.synthesized_answer is None:
            raise ValueError("a synthesized answer is required when candidates answered")
        if self.synthesized_answer is not None:
            urls = {artifact.url for artifact in self.artifacts}
            if not set(self.synthesized_answer.source_urls) <= urls:
                raise ValueError("synthesized answer cites urls absent from the artifacts")
        return self


class PlanVersion(Frozen):
    plan: ResearchPlan
    reason: str


class Stage(str, Enum):
    """Loop states; values double as event-log labels"""

    PLAN = "Plan"
    QUERY = "Query"
    ANSWER = "Answer"
    REFLECT = "Reflect"
    UPDATE = "Update"
    ASSESS = "Assess"
    REPORT = "Report"
    DONE = "Done"


class TerminationReason(str, Enum):
    THRESHOLD_REACHED = "threshold_reached"
    MAX_ITERATIONS_EXHAUSTED = "max_iterations_exhausted"
    ABORTED_ERROR = "aborted_error"


class LoopCheckpoint(Frozen):
    next_stage: Stage = Stage.PLAN
    iterations_completed: int = Field(default=0, ge=0)
    skipped_iterations: int = Field(default=0, ge=0)
    consecutive_dedup_exhaustions: int = Field(default=0, ge=0)
    events_logged: int = Field(default=0, ge=0)
    termination_reason: Optional[TerminationReason] = None
    current_plan: Optional[ResearchPlan] = None


CONTEXT_SCHEMA_VERSION = 1


class GlobalResearchContext(Frozen):
    schema_version: int = CONTEXT_SCHEMA_VERSION
    run_id: str = Field(min_length=1)
    topic: str = Field(min_length=1)
    trajectories: Tuple[Trajectory, ...] = ()
    plan_versions: Tuple[PlanVersion, ...] = ()
    progress_history: Tuple[ProgressAssessment, ...] = ()
    checkpoint: LoopCheckpoint = LoopCheckpoint()

    @model_validator(mode="after")
    def _gapless_sequence(self) -> "GlobalResearchContext":
        for expected, trajectory in enumerate(self.trajectories, start=1):
            if trajectory.seq_no != expected:
                raise ValueError(f"trajectory seq_no {trajectory.seq_no} out of order, expected {expected}")
        return self


# Report

class ReportSource(Frozen):
    url: str
    title: str = ""


class Report(Frozen):
    topic: str
    body: str = Field(min_length=1)
    sources: Tuple[ReportSource, ...] = ()
    generated_at: datetime
    partial_flag: bool = False
    termination_reason: Optional[TerminationReason] = None

    def render_markdown(self) -> str:
        header = [f"# {self.topic}", "", f"_Generated {self.generated_at.isoformat()}_"]
        if self.partial_flag:
            reason = self.termination_reason.value if self.termination_reason else "unknown"
            header.append(f"_Partial report: research ended with {reason}_")
        return "\n".join(header) + "\n\n" + self.body.rstrip() + "\n"
