"""
Configuration: JSON config file, command-line overrides and environment credentials
"""

import json
import logging
import os
import uuid
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import ConfigError
from src.models import CandidateConfig, CrossoverConfig, DecodingParams, SearchConfig

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LLMSettings(Settings):
    base_url: str = "https://generativelanguage.googleapis.com/v1beta/openai"
    model: str = "gemini-2.5-pro"
    api_key_env: str = "DEEP_RESEARCHER_LLM_API_KEY"
    # the OpenAI-compatible schema has no top_k; enable only for endpoints that accept it
    supports_top_k: bool = False
    timeout_seconds: float = Field(default=120.0, gt=0)
    max_output_tokens: int = Field(default=8192, ge=1)
    report_max_output_tokens: int = Field(default=32768, ge=1)
    transport_attempts: int = Field(default=3, ge=1)
    backoff_multiplier: float = Field(default=1.0, ge=0)
    max_repair_attempts: int = Field(default=2, ge=0)
    gemini_command: str = "gemini"


class SearchSettings(Settings):
    endpoint: str = "https://api.tavily.com/search"
    api_key_env: str = "TAVILY_API_KEY"
    search_depth: str = "advanced"
    timeout_seconds: float = Field(default=30.0, gt=0)
    transport_attempts: int = Field(default=3, ge=1)
    backoff_multiplier: float = Field(default=1.0, ge=0)


class OrchestratorConfig(Settings):
    progress_threshold: float = Field(default=90.0, gt=0.0, le=100.0)
    max_iterations: int = Field(default=15, ge=1)
    dedup_retry_limit: int = Field(default=2, ge=0)
    search_cfg: SearchConfig = SearchConfig()
    crossover_cfg: CrossoverConfig = CrossoverConfig()
    context_budget: int = Field(default=120_000, ge=1)


class AppConfig(Settings):
    llm: LLMSettings = LLMSettings()
    search: SearchSettings = SearchSettings()
    orchestrator: OrchestratorConfig = OrchestratorConfig()
    excerpt_char_cap: int = Field(default=2000, ge=1)
    parallel_candidates: bool = True
    prompts_dir: Optional[str] = None


# Extra schedule entries used when --candidates asks for more than the defaults
_EXTRA_SCHEDULE = [(0.4, 30), (0.85, 50), (1.2, 80), (1.5, 100)]


def candidate_schedule(count: int, merge_decoding: Optional[DecodingParams] = None) -> CrossoverConfig:
    """Build a crossover config with `count` candidates of distinct decoding parameters"""
    if count < 1:
        raise ConfigError("--candidates must be at least 1")
    defaults = [(c.decoding.temperature, c.decoding.top_k) for c in CrossoverConfig().candidates]
    schedule = (defaults + _EXTRA_SCHEDULE)[:count]
    if len(schedule) < count:
        raise ConfigError(f"at most {len(defaults) + len(_EXTRA_SCHEDULE)} candidates have a built-in schedule; "
                          "list more under orchestrator.crossover_cfg.candidates in the config file")
    candidates = tuple(
        CandidateConfig(candidate_id=index, decoding=DecodingParams(temperature=t, top_k=k))
        for index, (t, k) in enumerate(schedule, start=1)
    )
    if merge_decoding is None:
        return CrossoverConfig(candidates=candidates)
    return CrossoverConfig(candidates=candidates, merge_decoding=merge_decoding)


def load_config(path: Optional[Union[str, Path]] = None) -> AppConfig:
    """Load a JSON config file; built-in defaults when no path is given"""
    if path is None:
        return AppConfig()
    config_path = Path(path)
    try:
        with open(config_path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
    try:
        return AppConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config file {config_path}: {_first_problem(e)}")


def apply_overrides(config: AppConfig, overrides: Dict[str, Any]) -> AppConfig:
    """Apply command-line overrides; keys are dotted paths, None values are ignored"""
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            target = target[key]
        target[leaf] = value.model_dump() if isinstance(value, BaseModel) else value
    try:
        return AppConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid option: {_first_problem(e)}")


def load_environment(dotenv_path: Optional[Union[str, Path]] = None) -> None:
    """Load a .env file into the environment without overriding existing variables"""
    if load_dotenv(dotenv_path=dotenv_path or find_dotenv(usecwd=True), override=False):
        logger.debug("Loaded credentials from .env")


def require_credential(env_var: str) -> str:
    value = os.environ.get(env_var, "").strip()
    if not value:
        raise ConfigError(f"environment variable {env_var} is not set")
    return value


def _first_problem(error: ValidationError) -> str:
    problem = error.errors()[0]
    location = ".".join(str(part) for part in problem["loc"]) or "<root>"
    return f"{location}: {problem['msg']}"


MANIFEST_FILE = "manifest.json"


class RunManifest(Settings):
    """What `resume` needs to rebuild a run: topic, provider, effective config and output paths"""

    run_id: str = Field(min_length=1)
    topic: str = Field(min_length=1)
    provider: Literal["live", "gemini-cli", "fixtures", "scripted"]
    config: AppConfig = AppConfig()
    script: Optional[str] = None
    fixtures_dir: Optional[str] = None
    out_dir: str
    context_path: str
    run_log_path: str
    report_path: str

    @property
    def events_path(self) -> Path:
        return Path(self.out_dir) / "events.jsonl"

    @classmethod
    def create(
        cls,
        topic: str,
        provider: str,
        config: AppConfig,
        out_dir: Union[str, Path],
        script: Optional[str] = None,
        fixtures_dir: Optional[str] = None,
        run_id: Optional[str] = None,
    ) -> "RunManifest":
        out = Path(out_dir).resolve()
        try:
            return cls(
                run_id=run_id or uuid.uuid4().hex[:12],
                topic=topic,
                provider=provider,
                config=config,
                script=str(Path(script).resolve()) if script else None,
                fixtures_dir=str(Path(fixtures_dir).resolve()) if fixtures_dir else None,
                out_dir=str(out),
                context_path=str(out / "context.json"),
                run_log_path=str(out / "calls.jsonl"),
                report_path=str(out / "report.md"),
            )
        except ValidationError as e:
            raise ConfigError(f"invalid run manifest: {_first_problem(e)}")

    def save(self) -> Path:
        path = Path(self.out_dir) / MANIFEST_FILE
        try:
            path.write_text(json.dumps(self.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot write run manifest {path}: {e}")
        return path

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILE
        try:
            with open(path, 'r') as f:
                return cls.model_validate(json.load(f))
        except FileNotFoundError:
            raise ConfigError(f"run manifest not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"run manifest {path} is not valid JSON: {e}")
        except ValidationError as e:
            raise ConfigError(f"invalid run manifest {path}: {_first_problem(e)}")
