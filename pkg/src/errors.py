"""
Exception hierarchy for the deep researcher
"""

from typing import Any, Dict, Optional


class DeepResearcherError(Exception):
    """Base error; `details` carries the step context the error surfaced in"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details: Dict[str, Any] = dict(details)

    def with_details(self, **details: Any) -> "DeepResearcherError":
        self.details.update(details)
        return self

    def __str__(self) -> str:
        message = super().__str__()
        if not self.details:
            return message
        context = ", ".join(f"{key}={value}" for key, value in sorted(self.details.items()))
        return f"{message} [{context}]"


class ConfigError(DeepResearcherError):
    """Invalid configuration, missing credentials or unusable output paths"""


class PromptError(DeepResearcherError):
    """A prompt template is missing or references an unknown placeholder"""


class ProviderError(DeepResearcherError):
    """Terminal LLM provider failure (retries exhausted or non-retryable)"""

    def __init__(self, message: str, attempts: int = 1, **details: Any):
        super().__init__(message, **details)
        self.attempts = attempts


class TransientProviderError(ProviderError):
    """Retryable transport failure"""

    def __init__(self, message: str, attempt: int = 1, **details: Any):
        super().__init__(message, attempts=attempt, **details)
        self.attempt = attempt


class ScriptError(DeepResearcherError):
    """The scripted provider has no entry for a request (a test bug signal)"""


class StructuredOutputError(DeepResearcherError):
    """No attempt produced output that validates against the schema"""

    def __init__(self, message: str, raw_text: str = "", **details: Any):
        super().__init__(message, **details)
        self.raw_text = raw_text


class SearchError(DeepResearcherError):
    """Search transport failure after retries"""


class FixtureError(SearchError):
    """No recorded fixture for a query"""


class SequencingError(DeepResearcherError):
    """Trajectory appended out of order"""


class RenderError(DeepResearcherError):
    """Context cannot be rendered within the token budget"""


class PersistenceError(DeepResearcherError):
    """Context file is missing, corrupt or of an unsupported version"""

    def __init__(self, message: str, field: Optional[str] = None, **details: Any):
        super().__init__(message, **details)
        self.field = field


class PlanningError(DeepResearcherError):
    """The initial research plan could not be curated"""


class ReflectionError(DeepResearcherError):
    """Plan reflection produced no usable decision"""


class EditError(DeepResearcherError):
    """A plan edit references a missing or cancelled step, or would leave no active step"""


class QueryError(DeepResearcherError):
    """No search query could be generated"""


class DedupExhaustedError(QueryError):
    """Every generated query duplicated one already in the context"""


class CrossoverError(DeepResearcherError):
    """Every candidate failed to answer"""


class ReportError(DeepResearcherError):
    """The final report could not be generated"""


class ResumeError(DeepResearcherError):
    """A stored run cannot be resumed"""


class StateError(DeepResearcherError):
    """A loop transition was requested from a terminal state"""
