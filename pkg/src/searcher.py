"""
Search agent: context-aware query generation and Candidate Crossover answering.

Each query is answered by n candidates that share the same prompt and web
evidence but sample with different decoding parameters; their answers are then
merged into one synthesized answer that keeps every fact and number.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Tuple

from src import context_store
from src.errors import (
    CrossoverError,
    DedupExhaustedError,
    DeepResearcherError,
    ProviderError,
    QueryError,
    RenderError,
    StructuredOutputError,
)
from src.llm_gateway import LLMGateway
from src.models import (
    CandidateAnswer,
    CandidateConfig,
    ChatRequest,
    CrossoverConfig,
    DecodingParams,
    FinishReason,
    GlobalResearchContext,
    QueryDraft,
    RawSearchResult,
    ResearchPlan,
    SearchConfig,
    SearchQuery,
    SynthesizedAnswer,
    Trajectory,
)
from src.prompts import PromptLibrary
from src.search_client import SearchClient, filter_by_score

logger = logging.getLogger(__name__)

Clock = Callable[[], datetime]

NO_EVIDENCE_NOTICE = ("\nNo web evidence passed the relevance filter for this query. "
                      "Answer from general knowledge, say that the answer is not backed by retrieved sources, "
                      "and keep it short.\n")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def unique_urls(artifacts: List[RawSearchResult]) -> Tuple[str, ...]:
    return tuple(dict.fromkeys(artifact.url for artifact in artifacts))


def fallback_merge(answers: List[CandidateAnswer]) -> str:
    """Labelled concatenation used when the merge call fails; loses nothing"""
    return "\n\n".join(f"[Candidate {a.candidate_id}]\n{a.text}" for a in answers)


class Searcher:
    """Search agent"""

    def __init__(
        self,
        gateway: LLMGateway,
        search_client: SearchClient,
        prompts: PromptLibrary,
        context_budget: int,
        query_decoding: DecodingParams = DecodingParams(temperature=0.5, top_k=40),
        excerpt_char_cap: int = 2000,
        parallel_candidates: bool = True,
        max_output_tokens: int = 8192,
        max_repair_attempts: Optional[int] = None,
        clock: Clock = utc_now,
    ):
        self.gateway = gateway
        self.search_client = search_client
        self.prompts = prompts
        self.context_budget = context_budget
        self.query_decoding = query_decoding
        self.excerpt_char_cap = excerpt_char_cap
        # a sequential script must see candidate calls in a fixed order
        self.parallel_candidates = parallel_candidates and not gateway.requires_serial
        self.max_output_tokens = max_output_tokens
        self.max_repair_attempts = max_repair_attempts
        self.clock = clock

    # Query generation

    def generate_query(
        self,
        plan: ResearchPlan,
        ctx: GlobalResearchContext,
        dedup_retry_limit: int,
        unexplored_areas: Tuple[str, ...] = (),
    ) -> SearchQuery:
        """Ask for the next search query; duplicates of stored queries are re-prompted"""
        if not plan.active_steps():
            raise ValueError("the plan has no active steps to search for")

        try:
            rendered = context_store.render_context(ctx, self.context_budget)
        except RenderError as e:
            raise QueryError(f"cannot render the research context: {e}")

        focus = ""
        if not plan.pending_steps():
            focus += "\nEvery plan step has been searched at least once. Target the gaps below instead.\n"
        if unexplored_areas:
            focus += "\nAreas the progress judge considers unexplored:\n"
            focus += "\n".join(f"- {area}" for area in unexplored_areas) + "\n"

        rejected: List[str] = []
        for attempt in range(dedup_retry_limit + 1):
            dedup_notice = ""
            if rejected:
                dedup_notice = ("\nThese queries were already searched and must not be proposed again:\n"
                                + "\n".join(f"- {text}" for text in rejected) + "\n")
            system_prompt, user_prompt = self.prompts.render(
                "query", topic=plan.topic, plan=plan.render(), context=rendered,
                focus=focus, dedup_notice=dedup_notice)
            request = ChatRequest(
                system_prompt=system_prompt,
                user_prompt=user_prompt,
                decoding=self.query_decoding,
                max_output_tokens=self.max_output_tokens,
                request_tag="query",
            )
            try:
                draft: QueryDraft = self.gateway.complete_structured(request, "search-query", self.max_repair_attempts)
            except (StructuredOutputError, ProviderError) as e:
                raise QueryError(f"could not generate a search query: {e}")

            text = draft.query.strip()
            if not text:
                raise QueryError("the generated search query is blank")
            if context_store.has_query(ctx, text):
                logger.warning(f"Query '{text}' was already searched (dedup attempt {attempt + 1})")
                rejected.append(text)
                continue

            step_ref = draft.plan_step_id if draft.plan_step_id and plan.find(draft.plan_step_id) else None
            query = SearchQuery(
                text=text,
                rationale=draft.rationale,
                plan_step_ref=step_ref,
                seq_no=context_store.next_seq_no(ctx),
            )
            logger.info(f"Query #{query.seq_no}: {query.text}")
            return query

        raise DedupExhaustedError(
            f"every generated query duplicated a stored one ({len(rejected)} attempts)",
            rejected=rejected,
        )

    # Answering

    def _artifact_block(self, artifacts: List[RawSearchResult]) -> str:
        if not artifacts:
            return "(none)"
        blocks = []
        for index, artifact in enumerate(artifacts, start=1):
            excerpt = artifact.content[:self.excerpt_char_cap]
            blocks.append(f"[{index}] {artifact.title or artifact.url}\nURL: {artifact.url}\n"
                          f"Relevance: {artifact.score:.2f}\n{excerpt}")
        return "\n\n".join(blocks)

    def _ask_candidate(self, candidate: CandidateConfig, system_prompt: str, user_prompt: str) -> Optional[str]:
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            decoding=candidate.decoding,
            max_output_tokens=self.max_output_tokens,
            request_tag=f"candidate-{candidate.candidate_id}",
        )
        try:
            response = self.gateway.complete(request)
        except DeepResearcherError as e:
            logger.warning(f"Candidate {candidate.candidate_id} failed and is omitted: {e}")
            return None
        if response.finish_reason == FinishReason.PROVIDER_ERROR or not response.text.strip():
            logger.warning(f"Candidate {candidate.candidate_id} returned no answer and is omitted")
            return None
        return response.text.strip()

    def answer_with_candidates(
        self,
        query: SearchQuery,
        artifacts: List[RawSearchResult],
        cfg: CrossoverConfig,
    ) -> List[CandidateAnswer]:
        """One identically-prompted call per candidate, each with its own decoding parameters"""
        system_prompt, user_prompt = self.prompts.render(
            "candidate",
            query=query.text,
            rationale=query.rationale or "(not given)",
            evidence_notice="" if artifacts else NO_EVIDENCE_NOTICE,
            artifacts=self._artifact_block(artifacts),
        )

        results: Dict[int, Optional[str]] = {}
        if self.parallel_candidates and len(cfg.candidates) > 1:
            with ThreadPoolExecutor(max_workers=len(cfg.candidates)) as pool:
                futures = {
                    c.candidate_id: pool.submit(self._ask_candidate, c, system_prompt, user_prompt)
                    for c in cfg.candidates
                }
                results = {cid: future.result() for cid, future in futures.items()}
        else:
            for candidate in cfg.candidates:
                results[candidate.candidate_id] = self._ask_candidate(candidate, system_prompt, user_prompt)

        answers = [CandidateAnswer(candidate_id=cid, text=text)
                   for cid, text in sorted(results.items()) if text is not None]
        if not answers:
            raise CrossoverError(f"all {len(cfg.candidates)} candidates failed", seq_no=query.seq_no)
        if len(answers) < len(cfg.candidates):
            logger.warning(f"{len(cfg.candidates) - len(answers)} of {len(cfg.candidates)} candidates omitted")
        return answers

    def crossover_merge(
        self,
        query: SearchQuery,
        answers: List[CandidateAnswer],
        artifacts: List[RawSearchResult],
        cfg: CrossoverConfig,
    ) -> SynthesizedAnswer:
        """Merge all candidate answers into one; a single answer passes through unchanged"""
        if not answers:
            raise ValueError("crossover needs at least one candidate answer")

        source_urls = unique_urls(artifacts)
        contributors = tuple(a.candidate_id for a in answers)
        if len(answers) == 1:
            return SynthesizedAnswer(text=answers[0].text, source_urls=source_urls,
                                     contributing_candidates=contributors)

        labelled = "\n\n".join(f"Candidate {a.candidate_id}:\n{a.text}" for a in answers)
        system_prompt, user_prompt = self.prompts.render("merge", query=query.text, answers=labelled)
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            decoding=cfg.merge_decoding,
            max_output_tokens=self.max_output_tokens,
            request_tag="merge",
        )
        try:
            response = self.gateway.complete(request)
            text = response.text.strip() if response.finish_reason != FinishReason.PROVIDER_ERROR else ""
        except DeepResearcherError as e:
            logger.warning(f"Crossover merge failed: {e}")
            text = ""

        if not text:
            logger.warning(f"Using labelled concatenation of {len(answers)} answers for query #{query.seq_no}")
            return SynthesizedAnswer(text=fallback_merge(answers), source_urls=source_urls,
                                     contributing_candidates=contributors, merge_fallback=True)

        logger.info(f"Merged {len(answers)} candidate answers for query #{query.seq_no}")
        return SynthesizedAnswer(text=text, source_urls=source_urls, contributing_candidates=contributors)

    def answer_query(
        self,
        query: SearchQuery,
        search_cfg: SearchConfig,
        crossover_cfg: CrossoverConfig,
    ) -> Trajectory:
        """search → filter_by_score → candidates → crossover, as one Trajectory"""
        try:
            results = self.search_client.search(query, search_cfg)
        except DeepResearcherError as e:
            raise e.with_details(stage="search", seq_no=query.seq_no, query=query.text)

        artifacts = filter_by_score(results, search_cfg.score_threshold)
        if len(artifacts) < len(results):
            logger.info(f"Relevance filter kept {len(artifacts)} of {len(results)} results")
        if not artifacts:
            logger.warning(f"No evidence above {search_cfg.score_threshold:.2f} for query #{query.seq_no}; "
                           "answering with low confidence")

        try:
            answers = self.answer_with_candidates(query, artifacts, crossover_cfg)
            synthesis = self.crossover_merge(query, answers, artifacts, crossover_cfg)
        except DeepResearcherError as e:
            raise e.with_details(stage="crossover", seq_no=query.seq_no, query=query.text)

        return Trajectory(
            seq_no=query.seq_no,
            query=query,
            artifacts=tuple(artifacts),
            candidate_answers=tuple(answers),
            synthesized_answer=synthesis,
            created_at=self.clock(),
            low_confidence=not artifacts,
        )

    def research_step(
        self,
        plan: ResearchPlan,
        ctx: GlobalResearchContext,
        search_cfg: SearchConfig,
        crossover_cfg: CrossoverConfig,
        dedup_retry_limit: int,
        unexplored_areas: Tuple[str, ...] = (),
    ) -> Trajectory:
        """Query and answer in one: a complete Trajectory or an error, never part of one"""
        try:
            query = self.generate_query(plan, ctx, dedup_retry_limit, unexplored_areas)
        except DeepResearcherError as e:
            raise e.with_details(stage="query", seq_no=context_store.next_seq_no(ctx))
        return self.answer_query(query, search_cfg, crossover_cfg)
