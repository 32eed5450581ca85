import json
import random
import re

import pytest

from conftest import (
    NO_CHANGE,
    TOPIC,
    build_orchestrator,
    judge_reply,
    research_script,
    result,
)
from src import context_store
from src.config import OrchestratorConfig
from src.context_store import ContextStore
from src.errors import ProviderError, ResumeError, StateError
from src.llm_gateway import ScriptedProvider
from src.models import LoopCheckpoint, Stage, TerminationReason
from src.orchestrator import EventLog, EventStatus, save_run_record
from src.search_client import SearchClient, StaticBackend

LOOP_LABELS = re.compile(r"^Plan( Query Answer Reflect Update Assess)+ Report$")
ADD_STEP = {"update_needed": True, "rationale": "new angle", "edits": [
    {"op": "add", "description": "Look at recycling", "position": 0}]}


def keyed(*args, **kwargs) -> ScriptedProvider:
    return ScriptedProvider.keyed(research_script(*args, **kwargs))


def step_through(orchestrator, topic: str = TOPIC):
    state = orchestrator.start(topic, "run-test")
    while not state.terminal:
        state = orchestrator.step(state)
    return orchestrator.finish(state)


class TestTermination:
    def test_stops_when_threshold_reached(self):
        result_ = build_orchestrator(keyed([30, 60, 92])).run(TOPIC)

        record = result_.record
        assert record.iterations_completed == 3
        assert record.termination_reason == TerminationReason.THRESHOLD_REACHED
        assert record.final_progress == 92
        assert len(result_.context.trajectories) == 3
        assert not result_.report.partial_flag
        assert " ".join(record.labels()) == "Plan" + " Query Answer Reflect Update Assess" * 3 + " Report"

    def test_threshold_is_inclusive(self):
        record = build_orchestrator(keyed([89.9, 90.0, 99])).run(TOPIC).record
        assert record.iterations_completed == 2
        assert record.termination_reason == TerminationReason.THRESHOLD_REACHED

    def test_iteration_cap(self):
        cfg = OrchestratorConfig(max_iterations=4)
        result_ = build_orchestrator(keyed([50] * 4), cfg).run(TOPIC)

        assert len(result_.context.trajectories) == 4
        assert result_.record.termination_reason == TerminationReason.MAX_ITERATIONS_EXHAUSTED
        assert result_.report.partial_flag
        assert result_.report.termination_reason == TerminationReason.MAX_ITERATIONS_EXHAUSTED
        assert "Partial report" in result_.report.render_markdown()

    def test_done_after_first_iteration(self):
        result_ = build_orchestrator(keyed([95])).run(TOPIC)
        assert result_.record.iterations_completed == 1
        assert result_.record.labels() == ["Plan", "Query", "Answer", "Reflect", "Update", "Assess", "Report"]

    def test_custom_threshold(self):
        cfg = OrchestratorConfig(progress_threshold=50)
        assert build_orchestrator(keyed([50, 99]), cfg).run(TOPIC).record.iterations_completed == 1

    def test_report_call_happens_once(self):
        provider = keyed([30, 95])
        build_orchestrator(provider).run(TOPIC)
        assert [r.request_tag for r in provider.requests].count("report") == 1
        assert [r.request_tag for r in provider.requests].count("plan") == 1


def random_script(rng: random.Random):
    max_iterations = rng.randint(1, 6)
    percents = [round(rng.uniform(0, 100), 1) for _ in range(max_iterations)]
    reflections = [rng.choice([NO_CHANGE, ADD_STEP]) for _ in range(max_iterations)]
    cfg = OrchestratorConfig(max_iterations=max_iterations)
    return cfg, research_script(percents, reflections=reflections)


class TestEventLog:
    def test_label_grammar(self):
        rng = random.Random(11)
        for trial in range(20):
            cfg, script = random_script(rng)
            record = build_orchestrator(ScriptedProvider.keyed(script), cfg).run(TOPIC).record
            assert LOOP_LABELS.match(" ".join(record.labels())), f"trial {trial}"
            assert [e.index for e in record.events] == list(range(len(record.events)))

    def test_step_driver_matches_run(self):
        rng = random.Random(23)
        for trial in range(20):
            cfg, script = random_script(rng)
            parallel = rng.random() < 0.5
            ran = build_orchestrator(ScriptedProvider.keyed(script), cfg, parallel=parallel).run(TOPIC)
            stepped = step_through(build_orchestrator(ScriptedProvider.keyed(script), cfg, parallel=parallel))

            assert stepped.record == ran.record, f"trial {trial}"
            assert stepped.context == ran.context, f"trial {trial}"
            assert stepped.report == ran.report, f"trial {trial}"

    def test_iteration_numbers(self):
        record = build_orchestrator(keyed([10, 95])).run(TOPIC).record
        assert [e.iteration for e in record.events] == [0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]

    def test_plan_update_is_recorded(self):
        result_ = build_orchestrator(keyed([10, 95], reflections=[ADD_STEP, NO_CHANGE])).run(TOPIC)

        updates = [e for e in result_.record.events if e.label == Stage.UPDATE]
        assert updates[0].detail == "plan v2"
        assert updates[1].status == EventStatus.SKIPPED
        assert [v.plan.version for v in result_.context.plan_versions] == [1, 2]
        assert result_.plan.active_steps()[0].description == "Look at recycling"


class TestStepMachine:
    def test_step_on_done(self):
        orchestrator = build_orchestrator(keyed([95]))
        state = orchestrator.start(TOPIC)
        while not state.terminal:
            state = orchestrator.step(state)
        with pytest.raises(StateError):
            orchestrator.step(state)

    def test_assess_routes_to_query_or_report(self):
        orchestrator = build_orchestrator(keyed([40, 95]))
        state = orchestrator.start(TOPIC)
        stages = []
        while not state.terminal:
            state = orchestrator.step(state)
            stages.append(state.stage)
        assert stages[5] == Stage.QUERY
        assert stages[10] == Stage.REPORT

    def test_checkpoint_mirrors_state(self):
        orchestrator = build_orchestrator(keyed([40, 95]))
        state = orchestrator.step(orchestrator.start(TOPIC))
        for _ in range(3):
            state = orchestrator.step(state)
            checkpoint = state.ctx.checkpoint
            assert checkpoint.next_stage == state.stage
            assert checkpoint.events_logged == len(state.events)

    def test_finish_needs_a_terminal_state(self):
        orchestrator = build_orchestrator(keyed([95]))
        with pytest.raises(StateError):
            orchestrator.finish(orchestrator.start(TOPIC))


class TestDegradedPaths:
    def test_duplicate_queries_skip_an_iteration(self):
        queries = ["query number 1"] * 4 + ["fresh angle"]
        result_ = build_orchestrator(keyed([10, 20, 95], queries=queries)).run(TOPIC)

        record = result_.record
        assert record.iterations_completed == 3
        assert record.skipped_iterations == 1
        assert len(result_.context.trajectories) == 2
        assert LOOP_LABELS.match(" ".join(record.labels()))
        skipped = [e for e in record.events if e.iteration == 2]
        assert skipped[0].status == EventStatus.FAILED
        assert skipped[1].status == EventStatus.SKIPPED

    def test_repeated_dedup_exhaustion_aborts(self):
        cfg = OrchestratorConfig(max_iterations=10)
        result_ = build_orchestrator(keyed([10, 20, 30, 40], queries=["query number 1"]), cfg).run(TOPIC)

        record = result_.record
        assert record.termination_reason == TerminationReason.ABORTED_ERROR
        assert record.iterations_completed == 2
        assert record.labels()[-2:] == ["Query", "Report"]
        assert result_.report.partial_flag
        assert result_.report.termination_reason == TerminationReason.ABORTED_ERROR

    def test_failed_reflection_keeps_the_plan(self):
        result_ = build_orchestrator(keyed([95], reflections=["not json at all"])).run(TOPIC)

        reflect = next(e for e in result_.record.events if e.label == Stage.REFLECT)
        assert reflect.status == EventStatus.DEGRADED
        assert result_.record.termination_reason == TerminationReason.THRESHOLD_REACHED
        assert len(result_.context.plan_versions) == 1

    def test_dangling_edit_is_rejected(self):
        bad = {"update_needed": True, "edits": [{"op": "cancel", "step_id": "step-40"}]}
        result_ = build_orchestrator(keyed([95], reflections=[bad])).run(TOPIC)

        update = next(e for e in result_.record.events if e.label == Stage.UPDATE)
        assert update.status == EventStatus.DEGRADED
        assert result_.plan.version == 1

    def test_cancelling_every_step_keeps_the_plan(self):
        cancel_all = {"update_needed": True, "rationale": "all covered", "edits": [
            {"op": "cancel", "step_id": f"step-{n}"} for n in (1, 2, 3)]}
        result_ = build_orchestrator(keyed([40, 95], reflections=[cancel_all, NO_CHANGE])).run(TOPIC)

        record = result_.record
        assert record.termination_reason == TerminationReason.THRESHOLD_REACHED
        assert record.iterations_completed == 2
        assert " ".join(record.labels()) == "Plan" + " Query Answer Reflect Update Assess" * 2 + " Report"
        update = next(e for e in record.events if e.label == Stage.UPDATE)
        assert update.status == EventStatus.DEGRADED
        assert len(result_.plan.active_steps()) == 3

    def test_failed_judge_keeps_researching(self):
        script = research_script([95, 95])
        script = [entry for entry in script if entry[0] != "judge"] + [("judge", "unreadable")]
        cfg = OrchestratorConfig(max_iterations=2)
        result_ = build_orchestrator(ScriptedProvider.keyed(script), cfg).run(TOPIC)

        assert result_.record.iterations_completed == 2
        assert result_.record.termination_reason == TerminationReason.MAX_ITERATIONS_EXHAUSTED
        assert result_.record.final_progress == 0

    def test_low_confidence_answer_is_degraded(self):
        search = SearchClient(StaticBackend({}, default=[result("https://weak.example", 0.1)]))
        result_ = build_orchestrator(keyed([95]), search_client=search).run(TOPIC)

        answer = next(e for e in result_.record.events if e.label == Stage.ANSWER)
        assert answer.status == EventStatus.DEGRADED
        assert result_.context.trajectories[0].low_confidence
        assert result_.report.sources == ()

    def test_unexplored_areas_steer_the_next_query(self):
        script = research_script([95], queries=["first", "second"])
        script = [e for e in script if e[0] != "judge"] + [
            ("judge", judge_reply(20, ["battery recycling"])), ("judge", judge_reply(95))]
        provider = ScriptedProvider.keyed(script)
        build_orchestrator(provider).run(TOPIC)

        queries = [r for r in provider.requests if r.request_tag == "query"]
        assert "battery recycling" not in queries[0].user_prompt
        assert "- battery recycling" in queries[1].user_prompt


class TestAborts:
    def test_search_failure_writes_a_partial_report(self):
        search = SearchClient(StaticBackend({"query number 1": [result("https://a.example", 0.9)]}))
        result_ = build_orchestrator(keyed([10, 20, 95]), search_client=search).run(TOPIC)

        record = result_.record
        assert record.termination_reason == TerminationReason.ABORTED_ERROR
        assert "query number 2" in record.error
        assert record.labels()[-3:] == ["Query", "Answer", "Report"]
        assert record.events[-2].status == EventStatus.FAILED
        assert result_.report.partial_flag
        assert [s.url for s in result_.report.sources] == ["https://a.example"]

    def test_failure_before_any_trajectory_skips_the_report(self):
        search = SearchClient(StaticBackend({}))
        result_ = build_orchestrator(keyed([95]), search_client=search).run(TOPIC)

        assert result_.report is None
        assert result_.record.labels() == ["Plan", "Query", "Answer"]
        assert result_.context.checkpoint.next_stage == Stage.DONE

    def test_plan_failure(self):
        provider = ScriptedProvider.keyed([("plan", "no plan here")])
        result_ = build_orchestrator(provider).run(TOPIC)

        assert result_.record.termination_reason == TerminationReason.ABORTED_ERROR
        assert result_.record.labels() == ["Plan"]
        assert result_.plan is None

    def test_report_failure_keeps_the_context(self, tmp_path):
        store = ContextStore(tmp_path / "context.json")
        provider = keyed([95], report=ProviderError("report endpoint down"))
        result_ = build_orchestrator(provider, store=store).run(TOPIC)

        assert result_.report is None
        assert result_.record.events[-1].status == EventStatus.FAILED
        assert "report endpoint down" in result_.record.error
        assert store.load() == result_.context
        assert len(store.load().trajectories) == 1


class TestResume:
    def test_interrupted_run_resumes_to_the_same_context(self, tmp_path):
        script = research_script([20, 40, 60, 95], reflections=[NO_CHANGE, ADD_STEP, NO_CHANGE])
        baseline = build_orchestrator(ScriptedProvider.keyed(script)).run(TOPIC, "run-test")

        provider = ScriptedProvider.keyed(script)
        store = ContextStore(tmp_path / "context.json")
        first = build_orchestrator(provider, store=store)
        state = first.start(TOPIC, "run-test")
        while state.iterations_completed < 2 or state.stage != Stage.QUERY:
            state = first.step(state)
        events_before = state.events

        second = build_orchestrator(provider, store=ContextStore(tmp_path / "context.json"))
        resumed = second.drive(second.resume(store.load()))

        assert resumed.context == baseline.context
        assert resumed.report == baseline.report
        assert events_before + resumed.record.events == baseline.record.events
        assert resumed.record.events[0].index == len(events_before)

    def test_saved_after_every_assessment(self, tmp_path):
        store = ContextStore(tmp_path / "context.json")
        orchestrator = build_orchestrator(keyed([30, 95]), store=store)
        state = orchestrator.start(TOPIC)
        while state.stage != Stage.ASSESS:
            state = orchestrator.step(state)
        state = orchestrator.step(state)

        saved = store.load()
        assert saved.checkpoint.next_stage == Stage.QUERY
        assert saved.checkpoint.iterations_completed == 1
        assert len(saved.progress_history) == 1

    def test_terminal_run_cannot_resume(self):
        result_ = build_orchestrator(keyed([95])).run(TOPIC)
        with pytest.raises(ResumeError, match="terminal"):
            build_orchestrator(keyed([95])).resume(result_.context)

    def test_mid_iteration_checkpoint_cannot_resume(self):
        ctx = build_orchestrator(keyed([95])).run(TOPIC).context
        ctx = context_store.with_checkpoint(ctx, LoopCheckpoint(next_stage=Stage.ANSWER,
                                                                current_plan=ctx.checkpoint.current_plan))
        with pytest.raises(ResumeError, match="mid-iteration"):
            build_orchestrator(keyed([95])).resume(ctx)

    def test_resume_at_report(self):
        ctx = build_orchestrator(keyed([95])).run(TOPIC).context
        ctx = context_store.with_checkpoint(ctx, ctx.checkpoint.model_copy(update={"next_stage": Stage.REPORT}))
        provider = ScriptedProvider.keyed([("report", "## Rewritten")])

        orchestrator = build_orchestrator(provider)
        resumed = orchestrator.drive(orchestrator.resume(ctx))

        assert resumed.record.labels() == ["Report"]
        assert resumed.report.body.startswith("## Rewritten")


class TestEventFile:
    def test_events_reach_disk_with_every_save(self, tmp_path):
        log = EventLog(tmp_path / "events.jsonl")
        orchestrator = build_orchestrator(keyed([30, 95]), store=ContextStore(tmp_path / "context.json"),
                                          event_log=log)
        state = orchestrator.start(TOPIC)
        while state.stage != Stage.ASSESS:
            state = orchestrator.step(state)
        assert len(log.path.read_text().splitlines()) == 1
        state = orchestrator.step(state)

        lines = [json.loads(line) for line in log.path.read_text().splitlines()]
        assert [e["label"] for e in lines] == ["Plan", "Query", "Answer", "Reflect", "Update", "Assess"]
        assert state.ctx.checkpoint.events_logged == len(lines)

    def test_resume_drops_events_past_the_checkpoint(self, tmp_path):
        script = research_script([20, 40, 95])
        baseline = build_orchestrator(ScriptedProvider.keyed(script)).run(TOPIC, "run-test")

        provider = ScriptedProvider.keyed(script)
        store = ContextStore(tmp_path / "context.json")
        first = build_orchestrator(provider, store=store, event_log=EventLog(tmp_path / "events.jsonl"))
        state = first.start(TOPIC, "run-test")
        while state.iterations_completed < 1 or state.stage != Stage.QUERY:
            state = first.step(state)
        # a stray line from a transition the checkpoint does not count
        with open(tmp_path / "events.jsonl", "a") as f:
            f.write(json.dumps({"index": 6, "label": "Query"}) + "\n")

        second = build_orchestrator(provider, store=store, event_log=EventLog(tmp_path / "events.jsonl"))
        second.drive(second.resume(store.load()))

        lines = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
        assert [e["index"] for e in lines] == list(range(len(baseline.record.events)))
        assert [e["label"] for e in lines] == baseline.record.labels()

    def test_fresh_run_replaces_an_old_log(self, tmp_path):
        path = tmp_path / "events.jsonl"
        path.write_text('{"index": 0, "label": "Plan"}\n' * 3)

        build_orchestrator(keyed([95]), event_log=EventLog(path)).run(TOPIC)

        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [e["index"] for e in lines] == list(range(7))


def test_save_run_record(tmp_path):
    record = build_orchestrator(keyed([95])).run(TOPIC).record

    record_path = save_run_record(record, tmp_path)

    stored = json.loads(record_path.read_text())
    assert record_path.name == "run_record.json"
    assert stored["termination_reason"] == "threshold_reached"
    assert stored["iterations_completed"] == 1
    assert "events" not in stored
