"""
Sequential research loop.

Plan once, then repeat Query → Answer → Reflect → Update → Assess until the
progress judge reaches the threshold or the iteration cap is hit, then write
the report once. `run`/`drive` is the monolithic driver; `step` advances a
`LoopState` by exactly one labelled transition. Both emit the same event log.
"""

import json
import logging
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

from pydantic import Field

from src import context_store
from src.config import OrchestratorConfig
from src.context_store import ContextStore
from src.errors import (
    DedupExhaustedError,
    DeepResearcherError,
    EditError,
    PersistenceError,
    ReflectionError,
    ResumeError,
    StateError,
)
from src.models import (
    Frozen,
    GlobalResearchContext,
    LoopCheckpoint,
    ReflectionDecision,
    Report,
    ResearchPlan,
    SearchQuery,
    Stage,
    TerminationReason,
    Trajectory,
)
from src.planner import ASSESSMENT_FAILED, Planner, apply_edits, mark_step_done
from src.report_writer import ReportWriter
from src.searcher import Searcher

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_DEDUP_EXHAUSTIONS = 2
LOOP_STAGES = (Stage.QUERY, Stage.ANSWER, Stage.REFLECT, Stage.UPDATE, Stage.ASSESS)
RESUMABLE_STAGES = (Stage.PLAN, Stage.QUERY, Stage.REPORT)

KEEP_PLAN = ReflectionDecision(update_needed=False, rationale="plan kept")


class EventStatus(str, Enum):
    OK = "ok"
    SKIPPED = "skipped"
    FAILED = "failed"
    DEGRADED = "degraded"


class RunEvent(Frozen):
    index: int = Field(ge=0)
    label: Stage
    iteration: int = Field(ge=0)
    status: EventStatus = EventStatus.OK
    detail: str = ""


class RunRecord(Frozen):
    run_id: str
    iterations_completed: int = Field(ge=0)
    skipped_iterations: int = Field(default=0, ge=0)
    termination_reason: TerminationReason
    final_progress: float = 0.0
    events: Tuple[RunEvent, ...] = ()
    error: Optional[str] = None

    def labels(self) -> List[str]:
        return [event.label.value for event in self.events]


class LoopState(Frozen):
    """Everything one transition needs; `ctx.checkpoint` mirrors the counters after every step"""

    stage: Stage
    ctx: GlobalResearchContext
    plan: Optional[ResearchPlan] = None
    iterations_completed: int = 0
    skipped_iterations: int = 0
    consecutive_dedup_exhaustions: int = 0
    pending_query: Optional[SearchQuery] = None
    decision: Optional[ReflectionDecision] = None
    events: Tuple[RunEvent, ...] = ()
    event_offset: int = 0
    termination_reason: Optional[TerminationReason] = None
    failed_stage: Optional[Stage] = None
    error: Optional[str] = None
    report: Optional[Report] = None

    @property
    def terminal(self) -> bool:
        return self.stage == Stage.DONE


class RunResult(NamedTuple):
    context: GlobalResearchContext
    plan: Optional[ResearchPlan]
    record: RunRecord
    report: Optional[Report]


class EventLog:
    """
    events.jsonl written alongside every context save. Events are flushed
    before the context, so a checkpoint never counts events missing from the file.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.written = 0

    def open(self, events_logged: int):
        """Keep the first `events_logged` lines; later ones belong to a transition the resume replays"""
        lines: List[str] = []
        if events_logged and self.path.exists():
            try:
                lines = self.path.read_text(encoding="utf-8").splitlines()[:events_logged]
            except OSError as e:
                raise PersistenceError(f"cannot read event log {self.path}: {e}")
        if len(lines) < events_logged:
            logger.warning(f"Event log {self.path} holds {len(lines)} of {events_logged} checkpointed events")
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write event log {self.path}: {e}")
        self.written = events_logged

    def flush(self, events: Tuple[RunEvent, ...]):
        fresh = [event for event in events if event.index >= self.written]
        if not fresh:
            return
        try:
            with open(self.path, 'a', encoding="utf-8") as f:
                for event in fresh:
                    f.write(json.dumps(event.model_dump(mode="json")) + "\n")
        except OSError as e:
            raise PersistenceError(f"cannot append to event log {self.path}: {e}")
        self.written = fresh[-1].index + 1


@dataclass
class Dependencies:
    planner: Planner
    searcher: Searcher
    report_writer: ReportWriter
    store: Optional[ContextStore] = None
    event_log: Optional[EventLog] = None
    new_run_id: Callable[[], str] = field(default=lambda: uuid.uuid4().hex[:12])


class Orchestrator:
    def __init__(self, cfg: OrchestratorConfig, deps: Dependencies):
        self.cfg = cfg
        self.deps = deps

    # Entry points

    def start(self, topic: str, run_id: Optional[str] = None) -> LoopState:
        ctx = context_store.new_context(topic, run_id or self.deps.new_run_id())
        if self.deps.event_log is not None:
            self.deps.event_log.open(0)
        return self._commit(LoopState(stage=Stage.PLAN, ctx=ctx))

    def resume(self, ctx: GlobalResearchContext) -> LoopState:
        """Rebuild the loop state recorded in a stored context"""
        checkpoint = ctx.checkpoint
        if checkpoint.next_stage == Stage.DONE:
            raise ResumeError(f"run {ctx.run_id} is already terminal "
                              f"({checkpoint.termination_reason.value if checkpoint.termination_reason else 'done'})")
        if checkpoint.next_stage not in RESUMABLE_STAGES:
            raise ResumeError(f"run {ctx.run_id} was saved mid-iteration at {checkpoint.next_stage.value}")
        plan = context_store.latest_plan(ctx)
        if checkpoint.next_stage != Stage.PLAN and plan is None:
            raise ResumeError(f"run {ctx.run_id} has no research plan to continue")

        if self.deps.event_log is not None:
            self.deps.event_log.open(checkpoint.events_logged)
        logger.info(f"Resuming run {ctx.run_id} at {checkpoint.next_stage.value} "
                    f"after {checkpoint.iterations_completed} iterations")
        return LoopState(
            stage=checkpoint.next_stage,
            ctx=ctx,
            plan=plan,
            iterations_completed=checkpoint.iterations_completed,
            skipped_iterations=checkpoint.skipped_iterations,
            consecutive_dedup_exhaustions=checkpoint.consecutive_dedup_exhaustions,
            event_offset=checkpoint.events_logged,
            termination_reason=checkpoint.termination_reason,
        )

    def run(self, topic: str, run_id: Optional[str] = None) -> RunResult:
        return self.drive(self.start(topic, run_id))

    def drive(self, state: LoopState) -> RunResult:
        """Monolithic driver: plan, research_step iterations, report"""
        if state.stage == Stage.PLAN:
            state = self._plan(state)
        while state.stage == Stage.QUERY:
            state = self._research(state)
            for expected, transition in ((Stage.REFLECT, self._reflect),
                                         (Stage.UPDATE, self._update),
                                         (Stage.ASSESS, self._assess)):
                if state.stage != expected:
                    break
                state = transition(state)
        if state.stage == Stage.REPORT:
            state = self._report(state)
        if not state.terminal:
            raise StateError(f"driver stopped at {state.stage.value}")
        return self.finish(state)

    def step(self, state: LoopState) -> LoopState:
        """Advance exactly one labelled transition"""
        handlers = {
            Stage.PLAN: self._plan,
            Stage.QUERY: self._query,
            Stage.ANSWER: self._answer,
            Stage.REFLECT: self._reflect,
            Stage.UPDATE: self._update,
            Stage.ASSESS: self._assess,
            Stage.REPORT: self._report,
        }
        if state.terminal:
            raise StateError("the run is already done")
        return handlers[state.stage](state)

    def finish(self, state: LoopState) -> RunResult:
        if not state.terminal:
            raise StateError(f"run is not finished (next stage {state.stage.value})")
        history = state.ctx.progress_history
        record = RunRecord(
            run_id=state.ctx.run_id,
            iterations_completed=state.iterations_completed,
            skipped_iterations=state.skipped_iterations,
            termination_reason=state.termination_reason or TerminationReason.ABORTED_ERROR,
            final_progress=history[-1].percent if history else 0.0,
            events=state.events,
            error=state.error,
        )
        return RunResult(context=state.ctx, plan=state.plan, record=record, report=state.report)

    # Bookkeeping

    def _event(self, state: LoopState, label: Stage, status: EventStatus = EventStatus.OK,
               detail: str = "") -> LoopState:
        iteration = state.iterations_completed + 1 if label in LOOP_STAGES else state.iterations_completed
        event = RunEvent(index=state.event_offset + len(state.events), label=label,
                         iteration=iteration, status=status, detail=detail)
        logger.debug(f"Event {event.index}: {label.value} ({status.value}) {detail}")
        return state.model_copy(update={"events": state.events + (event,)})

    def _commit(self, state: LoopState, persist: bool = False) -> LoopState:
        checkpoint = LoopCheckpoint(
            next_stage=state.stage,
            iterations_completed=state.iterations_completed,
            skipped_iterations=state.skipped_iterations,
            consecutive_dedup_exhaustions=state.consecutive_dedup_exhaustions,
            events_logged=state.event_offset + len(state.events),
            termination_reason=state.termination_reason,
            current_plan=state.plan,
        )
        state = state.model_copy(update={"ctx": context_store.with_checkpoint(state.ctx, checkpoint)})
        if persist:
            if self.deps.event_log is not None:
                self.deps.event_log.flush(state.events)
            if self.deps.store is not None:
                self.deps.store.save(state.ctx)
        return state

    def _abort(self, state: LoopState, label: Stage, error: Exception) -> LoopState:
        logger.error(f"Run aborted at {label.value}: {error}")
        state = self._event(state, label, EventStatus.FAILED, str(error))
        next_stage = Stage.REPORT if state.ctx.trajectories else Stage.DONE
        return self._commit(state.model_copy(update={
            "stage": next_stage,
            "termination_reason": TerminationReason.ABORTED_ERROR,
            "failed_stage": label,
            "error": str(error),
            "pending_query": None,
        }), persist=True)

    def _unexplored(self, state: LoopState) -> Tuple[str, ...]:
        history = state.ctx.progress_history
        return history[-1].unexplored_areas if history else ()

    # Transitions

    def _plan(self, state: LoopState) -> LoopState:
        try:
            plan = self.deps.planner.curate_plan(state.ctx.topic)
            ctx = context_store.record_plan_version(state.ctx, plan, "initial plan")
        except (DeepResearcherError, ValueError) as e:
            return self._abort(state, Stage.PLAN, e)
        state = self._event(state.model_copy(update={"ctx": ctx, "plan": plan}), Stage.PLAN,
                            detail=f"{len(plan.steps)} steps")
        return self._commit(state.model_copy(update={"stage": Stage.QUERY}), persist=True)

    def _query(self, state: LoopState) -> LoopState:
        try:
            query = self.deps.searcher.generate_query(
                state.plan, state.ctx, self.cfg.dedup_retry_limit, self._unexplored(state))
        except DedupExhaustedError as e:
            return self._dedup_exhausted(state, e)
        except (DeepResearcherError, ValueError) as e:
            return self._abort(state, Stage.QUERY, e)
        state = self._event(state, Stage.QUERY, detail=query.text)
        return self._commit(state.model_copy(update={"stage": Stage.ANSWER, "pending_query": query}))

    def _answer(self, state: LoopState) -> LoopState:
        if state.pending_query is None:
            return self._skip_answer(state)
        try:
            trajectory = self.deps.searcher.answer_query(
                state.pending_query, self.cfg.search_cfg, self.cfg.crossover_cfg)
        except (DeepResearcherError, ValueError) as e:
            return self._abort(state, Stage.ANSWER, e)
        return self._accept(state, trajectory)

    def _research(self, state: LoopState) -> LoopState:
        """Query and Answer through one research_step call"""
        try:
            trajectory = self.deps.searcher.research_step(
                state.plan, state.ctx, self.cfg.search_cfg, self.cfg.crossover_cfg,
                self.cfg.dedup_retry_limit, self._unexplored(state))
        except DedupExhaustedError as e:
            state = self._dedup_exhausted(state, e)
            return self._skip_answer(state) if state.stage == Stage.ANSWER else state
        except (DeepResearcherError, ValueError) as e:
            details = getattr(e, "details", {})
            if details.get("stage", "query") == "query":
                return self._abort(state, Stage.QUERY, e)
            state = self._event(state, Stage.QUERY, detail=details.get("query", ""))
            return self._abort(state, Stage.ANSWER, e)
        state = self._event(state, Stage.QUERY, detail=trajectory.query.text)
        return self._accept(state, trajectory)

    def _dedup_exhausted(self, state: LoopState, error: DedupExhaustedError) -> LoopState:
        exhaustions = state.consecutive_dedup_exhaustions + 1
        state = state.model_copy(update={"consecutive_dedup_exhaustions": exhaustions})
        if exhaustions >= MAX_CONSECUTIVE_DEDUP_EXHAUSTIONS:
            return self._abort(state, Stage.QUERY, error)
        logger.warning(f"No new query this iteration: {error}")
        state = self._event(state, Stage.QUERY, EventStatus.FAILED, str(error))
        return self._commit(state.model_copy(update={"stage": Stage.ANSWER, "pending_query": None}))

    def _skip_answer(self, state: LoopState) -> LoopState:
        state = self._event(state, Stage.ANSWER, EventStatus.SKIPPED, "no new query to answer")
        return self._commit(state.model_copy(update={
            "stage": Stage.REFLECT,
            "skipped_iterations": state.skipped_iterations + 1,
        }))

    def _accept(self, state: LoopState, trajectory: Trajectory) -> LoopState:
        try:
            ctx = context_store.append_trajectory(state.ctx, trajectory)
        except DeepResearcherError as e:
            return self._abort(state, Stage.ANSWER, e)
        synthesis = trajectory.synthesized_answer
        degraded = trajectory.low_confidence or (synthesis is not None and synthesis.merge_fallback)
        state = state.model_copy(update={
            "ctx": ctx,
            "plan": mark_step_done(state.plan, trajectory.query.plan_step_ref),
            "consecutive_dedup_exhaustions": 0,
            "pending_query": None,
        })
        state = self._event(state, Stage.ANSWER, EventStatus.DEGRADED if degraded else EventStatus.OK,
                            f"{len(trajectory.artifacts)} sources, {len(trajectory.candidate_answers)} candidates")
        return self._commit(state.model_copy(update={"stage": Stage.REFLECT}))

    def _reflect(self, state: LoopState) -> LoopState:
        status, detail = EventStatus.OK, ""
        if not state.ctx.trajectories:
            decision, status, detail = KEEP_PLAN, EventStatus.SKIPPED, "nothing to reflect on yet"
        else:
            try:
                decision = self.deps.planner.reflect(state.plan, state.ctx)
                detail = f"{len(decision.edits)} edits proposed" if decision.update_needed else "no change"
            except ReflectionError as e:
                logger.warning(f"Reflection failed, keeping the plan: {e}")
                decision, status, detail = KEEP_PLAN, EventStatus.DEGRADED, str(e)
            except (DeepResearcherError, ValueError) as e:
                return self._abort(state, Stage.REFLECT, e)
        state = self._event(state, Stage.REFLECT, status, detail)
        return self._commit(state.model_copy(update={"stage": Stage.UPDATE, "decision": decision}))

    def _update(self, state: LoopState) -> LoopState:
        decision = state.decision or KEEP_PLAN
        updates = {"stage": Stage.ASSESS, "decision": None}
        if not decision.update_needed:
            state = self._event(state, Stage.UPDATE, EventStatus.SKIPPED, "plan kept")
            return self._commit(state.model_copy(update=updates))
        try:
            plan = apply_edits(state.plan, decision)
        except EditError as e:
            logger.warning(f"Rejected plan edits, keeping version {state.plan.version}: {e}")
            state = self._event(state, Stage.UPDATE, EventStatus.DEGRADED, str(e))
            return self._commit(state.model_copy(update=updates))
        try:
            ctx = context_store.record_plan_version(state.ctx, plan, decision.rationale or "reflection")
        except DeepResearcherError as e:
            return self._abort(state, Stage.UPDATE, e)
        logger.info(f"Plan updated to version {plan.version}")
        state = self._event(state.model_copy(update={"ctx": ctx, "plan": plan}), Stage.UPDATE,
                            detail=f"plan v{plan.version}")
        return self._commit(state.model_copy(update=updates))

    def _assess(self, state: LoopState) -> LoopState:
        try:
            assessment = self.deps.planner.assess_progress(state.plan, state.ctx)
        except (DeepResearcherError, ValueError) as e:
            return self._abort(state, Stage.ASSESS, e)
        status = EventStatus.DEGRADED if assessment.rationale == ASSESSMENT_FAILED else EventStatus.OK
        state = self._event(state, Stage.ASSESS, status, f"{assessment.percent:g}%")

        iterations = state.iterations_completed + 1
        reason = None
        if assessment.percent >= self.cfg.progress_threshold:
            reason = TerminationReason.THRESHOLD_REACHED
        elif iterations >= self.cfg.max_iterations:
            reason = TerminationReason.MAX_ITERATIONS_EXHAUSTED
        if reason is not None:
            logger.info(f"Research loop ends after {iterations} iterations: {reason.value}")
        return self._commit(state.model_copy(update={
            "ctx": context_store.record_progress(state.ctx, assessment),
            "iterations_completed": iterations,
            "termination_reason": reason,
            "stage": Stage.REPORT if reason else Stage.QUERY,
        }), persist=True)

    def _report(self, state: LoopState) -> LoopState:
        reason = state.termination_reason
        try:
            report = self.deps.report_writer.generate_report(
                state.plan, state.ctx, self.cfg.context_budget,
                partial=reason != TerminationReason.THRESHOLD_REACHED,
                termination_reason=reason,
            )
        except (DeepResearcherError, ValueError) as e:
            logger.error(f"Report generation failed; the context file is kept: {e}")
            state = self._event(state, Stage.REPORT, EventStatus.FAILED, str(e))
            return self._commit(state.model_copy(update={
                "stage": Stage.DONE, "failed_stage": Stage.REPORT, "error": str(e),
            }), persist=True)
        detail = f"{len(report.sources)} sources" + (", partial" if report.partial_flag else "")
        state = self._event(state, Stage.REPORT, detail=detail)
        return self._commit(state.model_copy(update={"stage": Stage.DONE, "report": report}), persist=True)


def save_run_record(record: RunRecord, out_dir: Union[str, Path]) -> Path:
    """Write run_record.json; the events themselves are in events.jsonl"""
    record_path = Path(out_dir) / "run_record.json"
    try:
        with open(record_path, 'w') as f:
            json.dump(record.model_dump(mode="json", exclude={"events"}), f, indent=2)
    except OSError as e:
        raise PersistenceError(f"cannot write run record to {record_path}: {e}")
    return record_path
