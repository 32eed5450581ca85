"""
Planning agent: curates the research plan, reflects on it, applies runtime
edits and judges research progress
"""

import logging
from typing import List, Optional

from src import context_store
from src.errors import (
    EditError,
    PlanningError,
    ProviderError,
    ReflectionError,
    RenderError,
    StructuredOutputError,
)
from src.llm_gateway import LLMGateway
from src.models import (
    AddEdit,
    CancelEdit,
    ChatRequest,
    DecodingParams,
    GlobalResearchContext,
    PlanDraft,
    PlanStep,
    ProgressAssessment,
    ReflectionDecision,
    ReprioritizeEdit,
    ResearchPlan,
    StepStatus,
)
from src.prompts import PromptLibrary

logger = logging.getLogger(__name__)

ASSESSMENT_FAILED = "assessment failed"


def _new_step_id(plan_steps: List[PlanStep], created: int) -> str:
    taken = {step.id for step in plan_steps}
    candidate = created
    while f"step-{candidate}" in taken:
        candidate += 1
    return f"step-{candidate}"


def apply_edits(plan: ResearchPlan, decision: ReflectionDecision) -> ResearchPlan:
    """
    Apply a reflection decision to a plan. Pure and transactional: any invalid
    edit rejects the whole decision and the input plan is left as it was.
    """
    if not decision.update_needed:
        return plan

    active = plan.active_steps()
    cancelled = [step for step in plan.steps if step.status == StepStatus.CANCELLED]
    known = list(plan.steps)

    def locate(step_id: str) -> int:
        for index, step in enumerate(active):
            if step.id == step_id:
                return index
        if any(step.id == step_id for step in cancelled):
            raise EditError(f"plan step {step_id} is already cancelled", step_id=step_id)
        raise EditError(f"plan step {step_id} does not exist", step_id=step_id)

    for edit in decision.edits:
        if isinstance(edit, AddEdit):
            step = PlanStep(
                id=_new_step_id(known, len(known) + 1),
                description=edit.description,
                status=StepStatus.PENDING,
                position=0,
            )
            known.append(step)
            # model-provided indices are unreliable: out of range appends
            active.insert(min(edit.position, len(active)), step)
        elif isinstance(edit, CancelEdit):
            step = active.pop(locate(edit.step_id))
            cancelled.append(step.model_copy(update={"status": StepStatus.CANCELLED}))
        elif isinstance(edit, ReprioritizeEdit):
            step = active.pop(locate(edit.step_id))
            active.insert(min(edit.new_position, len(active)), step)

    if not active:
        raise EditError("the decision would cancel every remaining plan step")

    steps = tuple(step.model_copy(update={"position": index}) for index, step in enumerate(active + cancelled))
    return ResearchPlan(topic=plan.topic, version=plan.version + 1, steps=steps)


def mark_step_done(plan: ResearchPlan, step_id: Optional[str]) -> ResearchPlan:
    """Bookkeeping only: marks a pending step done without a new plan version"""
    step = plan.find(step_id) if step_id else None
    if step is None or step.status != StepStatus.PENDING:
        return plan
    steps = tuple(s.model_copy(update={"status": StepStatus.DONE}) if s.id == step_id else s for s in plan.steps)
    return plan.model_copy(update={"steps": steps})


class Planner:
    """Planning agent"""

    def __init__(
        self,
        gateway: LLMGateway,
        prompts: PromptLibrary,
        context_budget: int,
        decoding: DecodingParams = DecodingParams(temperature=0.3, top_k=40),
        max_output_tokens: int = 8192,
        max_repair_attempts: Optional[int] = None,
    ):
        self.gateway = gateway
        self.prompts = prompts
        self.context_budget = context_budget
        self.decoding = decoding
        self.max_output_tokens = max_output_tokens
        self.max_repair_attempts = max_repair_attempts

    def _request(self, template: str, tag: str, **values: str) -> ChatRequest:
        system_prompt, user_prompt = self.prompts.render(template, **values)
        return ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            decoding=self.decoding,
            max_output_tokens=self.max_output_tokens,
            request_tag=tag,
        )

    def curate_plan(self, topic: str) -> ResearchPlan:
        """One structured call turns the topic into a version-1 plan"""
        if not topic or not topic.strip():
            raise ValueError("topic must not be empty")

        request = self._request("plan", "plan", topic=topic)
        try:
            draft: PlanDraft = self.gateway.complete_structured(request, "plan", self.max_repair_attempts)
        except (StructuredOutputError, ProviderError) as e:
            raise PlanningError(f"could not curate a research plan: {e}")

        steps = tuple(
            PlanStep(id=f"step-{index + 1}", description=description, position=index)
            for index, description in enumerate(draft.steps)
        )
        plan = ResearchPlan(topic=topic, version=1, steps=steps)
        logger.info(f"Curated research plan with {len(steps)} steps")
        return plan

    def reflect(self, plan: ResearchPlan, ctx: GlobalResearchContext) -> ReflectionDecision:
        """Review the plan against the global context"""
        if not ctx.trajectories:
            raise ValueError("reflection needs at least one trajectory in the context")

        try:
            rendered = context_store.render_context(ctx, self.context_budget)
            request = self._request("reflect", "reflect", topic=plan.topic, plan=plan.render(), context=rendered)
            decision: ReflectionDecision = self.gateway.complete_structured(
                request, "reflection-decision", self.max_repair_attempts)
        except (StructuredOutputError, ProviderError, RenderError) as e:
            raise ReflectionError(f"plan reflection failed: {e}")

        if decision.update_needed:
            logger.info(f"Reflection proposes {len(decision.edits)} plan edits: {decision.rationale}")
        else:
            logger.info("Reflection keeps the current plan")
        return decision

    def assess_progress(self, plan: ResearchPlan, ctx: GlobalResearchContext) -> ProgressAssessment:
        """LLM-as-judge percentage of research completed"""
        try:
            rendered = context_store.render_context(ctx, self.context_budget)
            request = self._request("progress", "judge", topic=plan.topic, plan=plan.render(), context=rendered)
            assessment: ProgressAssessment = self.gateway.complete_structured(
                request, "progress-assessment", self.max_repair_attempts)
        except (StructuredOutputError, ProviderError, RenderError) as e:
            # conservative: a failed judgement keeps the research going
            logger.warning(f"Progress assessment failed, judging 0%: {e}")
            return ProgressAssessment(percent=0.0, rationale=ASSESSMENT_FAILED)

        if assessment.clamped:
            logger.warning(f"Judge percentage out of range, clamped to {assessment.percent:g}")
        logger.info(f"Research progress judged at {assessment.percent:g}%")
        return assessment

