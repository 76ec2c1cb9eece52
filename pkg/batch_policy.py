from collections import deque
from dataclasses import dataclass
from typing import Deque, List, NamedTuple, Optional, Sequence, Tuple

DEFAULT_BATCH_CAPACITY = 16
DEFAULT_MAX_WAIT_MS = 50.0
DEFAULT_QUEUE_CAPACITY = 64


@dataclass(frozen=True)
class BatchPolicy:
    capacity: int = DEFAULT_BATCH_CAPACITY
    max_wait_ms: float = DEFAULT_MAX_WAIT_MS

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"batch capacity must be at least 1, got {self.capacity}")
        if self.max_wait_ms < 0:
            raise ValueError(f"max_wait_ms must be non-negative, got {self.max_wait_ms}")


class QueuedItem(NamedTuple):
    enqueued_ms: float
    payload: object


class BatchDecision(NamedTuple):
    launch: bool
    batch: List[object]
    # Time at which the oldest item's wait runs out; None for an empty queue
    deadline_ms: Optional[float]


def batch_collect(queue: Deque[QueuedItem], policy: BatchPolicy, now_ms: float) -> BatchDecision:
    """
    Decide whether to launch a batch from a FIFO of waiting items

    A batch is launched when the queue holds at least capacity items, or
    when it is nonempty and its oldest item has waited max_wait_ms. The
    launched batch is the up-to-capacity oldest items, removed from the queue.

    Args:
        queue: Waiting items, oldest first
        policy: Capacity and wait limit
        now_ms: Current clock reading

    Returns:
        BatchDecision; batch is empty when nothing launches
    """
    if not queue:
        return BatchDecision(False, [], None)
    deadline = queue[0].enqueued_ms + policy.max_wait_ms
    if len(queue) < policy.capacity and now_ms < deadline:
        return BatchDecision(False, [], deadline)
    take = min(policy.capacity, len(queue))
    batch = [queue.popleft().payload for _ in range(take)]
    next_deadline = queue[0].enqueued_ms + policy.max_wait_ms if queue else None
    return BatchDecision(True, batch, next_deadline)


class LaunchedBatch(NamedTuple):
    launch_ms: float
    items: List[object]


def simulate_batching(arrivals: Sequence[Tuple[float, object]], policy: BatchPolicy) -> List[LaunchedBatch]:
    """
    Replay arrivals against the policy on a discrete-event clock

    Events are item arrivals and wait deadlines; batch_collect is evaluated
    after each. There is no end-of-stream flush, so every launch comes from
    one of the two triggers.

    Args:
        arrivals: (arrival time in ms, item), in any order

    Returns:
        Launched batches in launch order
    """
    pending = sorted(arrivals, key=lambda a: a[0])
    queue: Deque[QueuedItem] = deque()
    launched: List[LaunchedBatch] = []
    index = 0
    now = 0.0
    while index < len(pending) or queue:
        # Admit everything that has arrived by now
        while index < len(pending) and pending[index][0] <= now:
            queue.append(QueuedItem(pending[index][0], pending[index][1]))
            index += 1
        decision = batch_collect(queue, policy, now)
        if decision.launch:
            launched.append(LaunchedBatch(now, decision.batch))
            continue
        next_arrival = pending[index][0] if index < len(pending) else None
        candidates = [t for t in (next_arrival, decision.deadline_ms) if t is not None]
        now = min(candidates)
    return launched
