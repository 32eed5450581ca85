"""
Append-only run log of LLM calls, one JSON record per call
"""

import hashlib
import json
import logging
import threading
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)


def short_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class RunLog:
    """Records every gateway call; the in-memory list and the JSONL file grow together"""

    def __init__(self, log_file: Optional[Union[str, Path]] = None):
        self.log_file = Path(log_file) if log_file else None
        self.records: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: Dict[str, Any]) -> Dict[str, Any]:
        """Append one call record; the lock is the single serialization point"""
        with self._lock:
            entry = {"index": len(self.records), "timestamp": datetime.now(timezone.utc).isoformat(), **record}
            self.records.append(entry)
            self._write(entry)
        logger.debug(f"LLM call #{entry['index']} tag={entry.get('tag')} finish={entry.get('finish_reason')}")
        return entry

    def _write(self, entry: Dict[str, Any]):
        if self.log_file is None:
            return
        try:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_file, 'a') as f:
                f.write(json.dumps(entry) + "\n")
        except OSError as e:
            logger.error(f"Error writing run log {self.log_file}: {e}")

    def for_tag(self, tag_prefix: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if str(r.get("tag", "")).startswith(tag_prefix)]

    def get_recent(self, limit: int = 10) -> List[Dict[str, Any]]:
        return self.records[-limit:] if self.records else []

    def get_stats(self) -> Dict[str, Any]:
        """Usage statistics over the recorded calls"""
        tag_counts = Counter(r.get("tag", "") for r in self.records)
        finish_counts = Counter(r.get("finish_reason", "") for r in self.records)
        dropped = Counter(param for r in self.records for param in r.get("dropped_params", []))
        return {
            "total_calls": len(self.records),
            "calls_by_tag": dict(tag_counts.most_common()),
            "finish_reasons": dict(finish_counts.most_common()),
            "repair_calls": sum(1 for r in self.records if r.get("repair_attempt", 0) > 0),
            "dropped_params": dict(dropped),
            "total_elapsed_ms": sum(r.get("elapsed_ms", 0) for r in self.records),
        }

    @classmethod
    def load(cls, log_file: Union[str, Path]) -> "RunLog":
        """Read a JSONL run log back for inspection; unreadable lines are skipped"""
        run_log = cls()
        path = Path(log_file)
        if not path.exists():
            return run_log
        with open(path, 'r') as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    run_log.records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    logger.warning(f"Skipping unreadable run log line in {path}: {e}")
        return run_log
