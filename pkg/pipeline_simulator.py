from collections import deque
from typing import Deque, Iterable, List

import simpy
from loguru import logger

from backend import Backend, Stage
from batch_policy import DEFAULT_QUEUE_CAPACITY, BatchPolicy, QueuedItem, batch_collect
from core_model import PageDescriptor
from pipeline_runtime import (
    END,
    BlockItem,
    PageAssembler,
    PageItem,
    PipelineResult,
    _failure_header,
    block_items,
    check_aligned,
    lay_out_page,
    stream_failure,
)
from run_stats import StatsRecorder


class PipelineSimulation:
    """
    The three-stage pipeline on a simpy virtual clock

    Backends are called for real, but time only advances by their
    service_ms() hints, so throughput and batching are reproducible to the
    millisecond regardless of host load.
    """

    def __init__(self, backend: Backend, policy: BatchPolicy, queue_capacity: int, recognition_workers: int):
        self.backend = backend
        self.policy = policy
        self.env = simpy.Environment()
        self.prepared = simpy.Store(self.env, capacity=queue_capacity)
        self.laid_out = simpy.Store(self.env, capacity=queue_capacity)
        self.workers = simpy.Resource(self.env, capacity=recognition_workers)
        self.stats = StatsRecorder()
        self.pages = PageAssembler(self.stats)
        self.stream_errors: List[str] = []

    def _service(self, stage: Stage, page_id: int, items: int = 1):
        service_ms = self.backend.service_ms(stage, page_id, items)
        self.stats.record_call(stage.value, service_ms / 1000.0)
        return self.env.timeout(service_ms)

    def _prepare(self, page_id: int, descriptor: PageDescriptor):
        yield self._service(Stage.PREPARE, page_id)
        try:
            return (page_id, self.backend.prepare(page_id, descriptor))
        except Exception as e:
            return _failure_header(page_id, descriptor, e)

    def _layout(self, page_id: int, shell) -> List:
        yield self._service(Stage.LAYOUT, page_id)
        try:
            header = lay_out_page(self.backend, page_id, shell)
            blocks = block_items(header)
        except Exception as e:
            return [_failure_header(page_id, shell, e)]
        return [header, *blocks]

    def _recognize(self, batch: List[BlockItem], request):
        self.stats.record_batch(len(batch))
        yield self._service(Stage.RECOGNITION, batch[0].page_id, len(batch))
        try:
            results = self.backend.recognize([b.descriptor for b in batch])
            check_aligned(batch, results)
        except Exception as e:
            self.pages.complete(batch, None, f"{type(e).__name__}: {e}")
        else:
            self.pages.complete(batch, results)
        finally:
            self.workers.release(request)

    def _launch(self, batch: List[BlockItem], running: List):
        request = self.workers.request()
        yield request
        running.append(self.env.process(self._recognize(batch, request)))

    def prepare_stage(self, descriptors: Iterable[PageDescriptor]):
        try:
            for page_id, descriptor in enumerate(descriptors):
                item = yield from self._prepare(page_id, descriptor)
                yield self.prepared.put(item)
        except Exception as e:
            self.stream_errors.append(stream_failure(e))
        yield self.prepared.put(END)

    def layout_stage(self):
        while True:
            item = yield self.prepared.get()
            if item is END:
                yield self.laid_out.put(END)
                return
            if isinstance(item, PageItem):
                yield self.laid_out.put(item)
                continue
            outputs = yield from self._layout(*item)
            for output in outputs:
                yield self.laid_out.put(output)

    def recognition_stage(self):
        pending: Deque[QueuedItem] = deque()
        running: List = []
        next_item = None
        while True:
            decision = batch_collect(pending, self.policy, self.env.now)
            if decision.launch:
                yield from self._launch(decision.batch, running)
                continue
            if next_item is None:
                next_item = self.laid_out.get()
            if decision.deadline_ms is None:
                yield next_item
            else:
                fired = yield next_item | self.env.timeout(max(decision.deadline_ms - self.env.now, 0.0))
                if next_item not in fired:
                    continue
            item, next_item = next_item.value, None

            if item is END:
                while pending:
                    take = min(self.policy.capacity, len(pending))
                    yield from self._launch([pending.popleft().payload for _ in range(take)], running)
                yield self.env.all_of(running)
                return
            if isinstance(item, PageItem):
                self.pages.register(item)
            else:
                pending.append(QueuedItem(self.env.now, item))

    def sequential(self, descriptors: Iterable[PageDescriptor]):
        """One page at a time through all three stages, no overlap and no waiting"""
        running: List = []
        try:
            for page_id, descriptor in enumerate(descriptors):
                item = yield from self._prepare(page_id, descriptor)
                if not isinstance(item, PageItem):
                    outputs = yield from self._layout(*item)
                    item, blocks = outputs[0], outputs[1:]
                else:
                    blocks = []
                self.pages.register(item)
                for start in range(0, len(blocks), self.policy.capacity):
                    yield from self._launch(blocks[start:start + self.policy.capacity], running)
                    yield running[-1]
        except Exception as e:
            self.stream_errors.append(stream_failure(e))

    def run(self, descriptors: Iterable[PageDescriptor], sequential: bool = False) -> PipelineResult:
        if sequential:
            done = self.env.process(self.sequential(descriptors))
        else:
            self.env.process(self.prepare_stage(descriptors))
            self.env.process(self.layout_stage())
            done = self.env.process(self.recognition_stage())
        self.env.run(until=done)
        elapsed_s = self.env.now / 1000.0
        return PipelineResult(self.pages.results(), self.stats.snapshot(elapsed_s), "; ".join(self.stream_errors))


def simulate(
    descriptors: Iterable[PageDescriptor],
    backend: Backend,
    policy: BatchPolicy = BatchPolicy(),
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
    recognition_workers: int = 1,
    sequential: bool = False,
) -> PipelineResult:
    """
    Run the pipeline under a simulated clock

    Args:
        descriptors: Page references
        backend: Backend whose service_ms() drives the clock
        policy: Recognition batching policy
        queue_capacity: Bound of each inter-stage queue
        recognition_workers: Parallel recognition executors
        sequential: Process pages one after another with no stage overlap

    Returns:
        PipelineResult whose RunStats are measured in simulated seconds
    """
    if queue_capacity < 1 or recognition_workers < 1:
        raise ValueError("queue_capacity and recognition_workers must be at least 1")
    simulation = PipelineSimulation(backend, policy, queue_capacity, recognition_workers)
    result = simulation.run(descriptors, sequential=sequential)
    mode = "sequential" if sequential else "pipelined"
    logger.info(f"simulated {mode} run: {result.stats.pages} pages, {result.stats.pages_per_s:.2f} pages/s")
    return result
