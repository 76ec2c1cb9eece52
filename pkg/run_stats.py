import threading
from collections import Counter
from typing import Dict

from pydantic import BaseModel, Field


class RunStats(BaseModel):
    """Throughput accounting for one pipeline run"""

    total_time_s: float = 0.0
    pages_per_s: float = 0.0
    tokens_per_s: float = 0.0
    pages: int = 0
    tokens: int = 0
    failed: int = 0
    stage_busy_s: Dict[str, float] = Field(default_factory=dict)
    batch_histogram: Dict[int, int] = Field(default_factory=dict)
    backend_calls: Dict[str, int] = Field(default_factory=dict)

    @property
    def batched_items(self) -> int:
        return sum(size * count for size, count in self.batch_histogram.items())

    def table_row(self) -> Dict[str, float]:
        return {
            "total_time_s": round(self.total_time_s, 6),
            "pages_per_s": round(self.pages_per_s, 6),
            "tokens_per_s": round(self.tokens_per_s, 6),
        }


def _rate(count: int, seconds: float) -> float:
    return count / seconds if seconds > 0 else 0.0


class StatsRecorder:
    """Thread-safe collector; stage workers report, the controller snapshots after quiescence"""

    def __init__(self):
        self.lock = threading.Lock()
        self.busy_s: Dict[str, float] = {}
        self.calls: Dict[str, int] = {}
        self.batches: Counter = Counter()
        self.pages = 0
        self.tokens = 0
        self.failed = 0

    def record_call(self, stage: str, busy_s: float):
        with self.lock:
            self.busy_s[stage] = self.busy_s.get(stage, 0.0) + busy_s
            self.calls[stage] = self.calls.get(stage, 0) + 1

    def record_batch(self, size: int):
        with self.lock:
            self.batches[size] += 1

    def record_page(self, tokens: int, failed: bool):
        with self.lock:
            self.pages += 1
            self.tokens += tokens
            if failed:
                self.failed += 1

    def snapshot(self, total_time_s: float) -> RunStats:
        with self.lock:
            return RunStats(
                total_time_s=total_time_s,
                pages_per_s=_rate(self.pages, total_time_s),
                tokens_per_s=_rate(self.tokens, total_time_s),
                pages=self.pages,
                tokens=self.tokens,
                failed=self.failed,
                stage_busy_s=dict(sorted(self.busy_s.items())),
                batch_histogram=dict(sorted(self.batches.items())),
                backend_calls=dict(sorted(self.calls.items())),
            )
