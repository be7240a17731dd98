"""
Run Log Service

Appends EpochLog and InferenceLog records to JSONL files and reads them
back for the API's /logs and /stats endpoints.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

from pydantic import BaseModel

logger = logging.getLogger(__name__)


class RunLogService:
    """One JSONL file of pydantic records."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def ensure(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.touch()
            logger.info("Created log file: %s", self.path)

    def append(self, record: BaseModel) -> None:
        """
        Write one record as a JSON line.

        A failed write is logged and swallowed.
        """
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(record.model_dump_json() + "\n")
        except OSError as e:
            logger.warning("Failed to write to log file %s: %s", self.path, e)

    def read(self, limit: int = 0) -> List[Dict]:
        """Records oldest first; limit > 0 keeps only the last `limit`."""
        if not self.path.exists():
            return []
        entries = []
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    entries.append(json.loads(line))
                except json.JSONDecodeError:
                    logger.warning("Skipping malformed log line in %s", self.path)
        return entries[-limit:] if limit > 0 else entries

    def stats(self) -> Dict:
        """Counts and mean processing time over inference records."""
        entries = self.read()
        total = len(entries)
        successes = sum(1 for e in entries if e.get("success"))
        fallbacks = sum(1 for e in entries if e.get("fallback"))
        times = [e["processing_time_ms"] for e in entries if "processing_time_ms" in e]
        by_route: Dict[str, int] = {}
        for e in entries:
            route = e.get("route")
            if route:
                by_route[route] = by_route.get(route, 0) + 1
        return {
            "total_requests": total,
            "successful": successes,
            "failed": total - successes,
            "fallbacks": fallbacks,
            "success_rate": round(successes / total * 100, 2) if total else 0.0,
            "avg_processing_time_ms": round(sum(times) / len(times), 2) if times else 0.0,
            "by_route": by_route,
        }
