"""
Report Writer agent: writes the final report in one generation pass over the
final plan and the whole research context
"""

import logging
from datetime import datetime, timezone
from typing import Callable, List, Optional

from src import context_store
from src.errors import DeepResearcherError, RenderError, ReportError
from src.llm_gateway import LLMGateway
from src.models import (
    ChatRequest,
    DecodingParams,
    FinishReason,
    GlobalResearchContext,
    Report,
    ReportSource,
    ResearchPlan,
    TerminationReason,
)
from src.prompts import PromptLibrary

logger = logging.getLogger(__name__)


def compile_sources(ctx: GlobalResearchContext) -> List[ReportSource]:
    """Every artifact URL once, in the order it was first cited"""
    seen = {}
    for artifact in context_store.all_artifacts(ctx):
        if artifact.url not in seen:
            seen[artifact.url] = ReportSource(url=artifact.url, title=artifact.title)
    return list(seen.values())


def sources_section(sources: List[ReportSource]) -> str:
    lines = ["## Sources", ""]
    for index, source in enumerate(sources, start=1):
        lines.append(f"{index}. [{source.title}]({source.url})" if source.title else f"{index}. {source.url}")
    return "\n".join(lines)


class ReportWriter:
    def __init__(
        self,
        gateway: LLMGateway,
        prompts: PromptLibrary,
        decoding: DecodingParams = DecodingParams(temperature=0.4, top_k=40),
        max_output_tokens: int = 32768,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        self.gateway = gateway
        self.prompts = prompts
        self.decoding = decoding
        self.max_output_tokens = max_output_tokens
        self.clock = clock

    def generate_report(
        self,
        plan: ResearchPlan,
        ctx: GlobalResearchContext,
        budget: int,
        partial: bool = False,
        termination_reason: Optional[TerminationReason] = None,
    ) -> Report:
        """Exactly one report-generation call over the whole context"""
        if not ctx.trajectories:
            raise ValueError("a report needs at least one trajectory in the context")

        try:
            rendered = context_store.render_context(ctx, budget)
        except RenderError as e:
            raise ReportError(f"cannot render the research context for the report: {e}")

        system_prompt, user_prompt = self.prompts.render(
            "report", topic=ctx.topic, plan=plan.render(), context=rendered)
        logger.debug(f"Report prompt is ~{context_store.estimate_tokens(user_prompt)} tokens")
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            decoding=self.decoding,
            max_output_tokens=self.max_output_tokens,
            request_tag="report",
        )
        try:
            response = self.gateway.complete(request)
        except DeepResearcherError as e:
            raise ReportError(f"report generation failed: {e}")

        body = response.text.strip()
        if response.finish_reason == FinishReason.PROVIDER_ERROR or not body:
            raise ReportError("report generation returned no text")
        if response.finish_reason == FinishReason.TRUNCATED:
            logger.warning("Report output hit the token limit and may be cut short")

        sources = compile_sources(ctx)
        if sources:
            body = f"{body}\n\n{sources_section(sources)}"

        logger.info(f"Report written with {len(sources)} sources")
        return Report(
            topic=ctx.topic,
            body=body,
            sources=tuple(sources),
            generated_at=self.clock(),
            partial_flag=partial,
            termination_reason=termination_reason,
        )
