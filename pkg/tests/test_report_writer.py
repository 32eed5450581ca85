import pytest

from conftest import FIXED_NOW, context_with, fixed_clock, make_gateway, simple_plan, trajectory
from src import context_store
from src.errors import ProviderError, ReportError
from src.llm_gateway import ScriptedProvider
from src.models import FinishReason, TerminationReason
from src.prompts import PromptLibrary
from src.report_writer import ReportWriter, compile_sources, sources_section


def writer_with(*responses) -> tuple:
    provider = ScriptedProvider.sequential(list(responses))
    return ReportWriter(make_gateway(provider), PromptLibrary(), clock=fixed_clock), provider


def test_one_generation_call():
    writer, provider = writer_with("## Findings\nRange goes up.")
    ctx = context_with(trajectory(1), trajectory(2), trajectory(3))

    report = writer.generate_report(simple_plan(), ctx, 100_000)

    assert len(provider.requests) == 1
    assert provider.requests[0].request_tag == "report"
    assert report.generated_at == FIXED_NOW
    assert report.body.startswith("## Findings")
    assert not report.partial_flag


def test_prompt_holds_every_answer_above_the_minimum_budget():
    answers = [f"REPORT-SENTINEL-{i}" for i in range(1, 6)]
    ctx = context_with(*(trajectory(i, answer=a, content="filler " * 80) for i, a in enumerate(answers, start=1)))
    minimum = context_store.minimum_budget(ctx)

    for budget in (minimum, minimum + 50, minimum + 400, 100_000):
        writer, provider = writer_with("body")
        writer.generate_report(simple_plan(), ctx, budget)
        assert all(a in provider.requests[0].user_prompt for a in answers), f"budget {budget}"


def test_sources_are_deduplicated_in_citation_order():
    ctx = context_with(trajectory(1, urls=["https://u1.example"]),
                       trajectory(2, urls=["https://u2.example", "https://u1.example"]),
                       trajectory(3, urls=["https://u1.example"]))

    sources = compile_sources(ctx)

    assert [s.url for s in sources] == ["https://u1.example", "https://u2.example"]


def test_sources_section_is_appended():
    writer, _ = writer_with("## Findings\ntext")
    report = writer.generate_report(simple_plan(), context_with(trajectory(1, urls=["https://u1.example"])), 100_000)

    assert report.body.endswith(sources_section(list(report.sources)))
    assert "## Sources" in report.body
    assert "1. [https://u1.example](https://u1.example)" in report.body


def test_partial_report_is_marked():
    writer, _ = writer_with("body")
    report = writer.generate_report(simple_plan(), context_with(trajectory(1)), 100_000, partial=True,
                                    termination_reason=TerminationReason.MAX_ITERATIONS_EXHAUSTED)

    rendered = report.render_markdown()
    assert rendered.startswith("# ")
    assert "max_iterations_exhausted" in rendered


def test_empty_context():
    writer, provider = writer_with("body")
    with pytest.raises(ValueError):
        writer.generate_report(simple_plan(), context_with(), 100_000)
    assert provider.requests == []


def test_provider_failure():
    writer, _ = writer_with(ProviderError("gone"))
    with pytest.raises(ReportError):
        writer.generate_report(simple_plan(), context_with(trajectory(1)), 100_000)


def test_empty_reply():
    writer, _ = writer_with("")
    with pytest.raises(ReportError):
        writer.generate_report(simple_plan(), context_with(trajectory(1)), 100_000)


def test_budget_too_small():
    writer, provider = writer_with("body")
    with pytest.raises(ReportError):
        writer.generate_report(simple_plan(), context_with(trajectory(1)), 5)
    assert provider.requests == []


def test_truncated_report_is_kept(caplog):
    writer, provider = writer_with("cut short")
    provider.send = _truncating(provider.send)

    report = writer.generate_report(simple_plan(), context_with(trajectory(1)), 100_000)

    assert report.body.startswith("cut short")
    assert "token limit" in caplog.text


def _truncating(send):
    def wrapper(request):
        return send(request).model_copy(update={"finish_reason": FinishReason.TRUNCATED})
    return wrapper
