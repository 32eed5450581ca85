"""
Editable prompt templates for the planning, search and report-writing agents.

Each template file under `templates/` holds a system prompt and a user prompt
separated by a line containing only `---`. User prompts use named
`str.format` placeholders (`{topic}`, `{plan}`, `{context}`, ...); literal braces
are doubled. A custom directory may override any subset of the templates.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from src.errors import PromptError

logger = logging.getLogger(__name__)

BUILTIN_DIR = Path(__file__).parent / "templates"
TEMPLATE_NAMES = ("plan", "reflect", "progress", "query", "candidate", "merge", "report")
SEPARATOR = "\n---\n"


class PromptLibrary:
    """Loads and fills prompt templates"""

    def __init__(self, override_dir: Optional[Union[str, Path]] = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: Dict[str, Tuple[str, str]] = {}

    def _load(self, name: str) -> Tuple[str, str]:
        if name in self._cache:
            return self._cache[name]
        if name not in TEMPLATE_NAMES:
            raise PromptError(f"unknown prompt template: {name}")

        path = BUILTIN_DIR / f"{name}.txt"
        if self.override_dir and (self.override_dir / f"{name}.txt").exists():
            path = self.override_dir / f"{name}.txt"
            logger.debug(f"Using prompt override {path}")

        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as e:
            raise PromptError(f"cannot read prompt template {path}: {e}")

        if SEPARATOR not in raw:
            raise PromptError(f"prompt template {path} has no '---' line between system and user prompts")
        system, user = raw.split(SEPARATOR, 1)
        self._cache[name] = (system.strip(), user.strip())
        return self._cache[name]

    def render(self, name: str, **values: str) -> Tuple[str, str]:
        """Return (system_prompt, user_prompt) with placeholders filled in"""
        system, user = self._load(name)
        try:
            return system, user.format(**values)
        except KeyError as e:
            raise PromptError(f"prompt template '{name}' uses unknown placeholder {e}")
        except (IndexError, ValueError) as e:
            raise PromptError(f"prompt template '{name}' is malformed: {e}")

    def validate(self) -> None:
        """Load every template up front so a broken override fails before any call"""
        for name in TEMPLATE_NAMES:
            self._load(name)
