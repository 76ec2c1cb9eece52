import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, NamedTuple, Optional

from loguru import logger

from backend import Backend, BackendError, BlockDescriptor, LayoutResult, RecognizedBlock, Stage
from batch_policy import DEFAULT_QUEUE_CAPACITY, BatchPolicy, QueuedItem, batch_collect
from core_model import ContentPayload, LayoutElement, PageDescriptor, PageDocument
from reading_order import apply_order, geometric_order, vote
from run_stats import RunStats, StatsRecorder


@dataclass
class ParsedPage:
    page_id: int
    page_index: int
    document: Optional[PageDocument]
    failed: bool = False
    error: str = ""
    tokens: int = 0


@dataclass
class PipelineResult:
    pages: List[ParsedPage]
    stats: RunStats
    # Set when the page stream itself raised; pages read before it are still reported
    stream_error: str = ""

    @property
    def documents(self) -> List[PageDocument]:
        return [page.document for page in self.pages if page.document is not None and not page.failed]


class PageItem(NamedTuple):
    """Header sent ahead of a page's blocks on the recognition queue"""

    page_id: int
    page_index: int
    document: Optional[PageDocument]
    n_blocks: int
    error: str = ""


class BlockItem(NamedTuple):
    page_id: int
    element_index: int
    descriptor: BlockDescriptor


class EndOfStream:
    pass


END = EndOfStream()


def order_layout(layout: LayoutResult) -> List[LayoutElement]:
    """
    Give every element a reading rank

    A relation matrix is decoded by voting; otherwise ranks the backend
    already set are kept; otherwise elements are read top to bottom.
    """
    elements = list(layout.elements)
    if layout.relations is not None:
        if layout.relations.size != len(elements):
            raise BackendError(f"relation matrix is {layout.relations.size}x{layout.relations.size} for {len(elements)} elements")
        apply_order(elements, vote(layout.relations).ranks)
    elif not all(e.order is not None for e in elements):
        if any(e.order is not None for e in elements):
            logger.warning("layout mixes ranked and unranked elements; falling back to geometric order")
        apply_order(elements, geometric_order(elements))
    return elements


def lay_out_page(backend: Backend, page_id: int, shell: PageDocument) -> PageItem:
    """Run layout analysis and ordering; returns the recognition-queue header"""
    layout = backend.analyze_layout(page_id, shell)
    shell.elements = order_layout(layout)
    return PageItem(page_id, shell.page_index, shell, len(shell.elements))


def block_items(header: PageItem) -> List[BlockItem]:
    """Blocks of a laid-out page in reading order"""
    document = header.document
    indexed = sorted(enumerate(document.elements), key=lambda pair: (pair[1].order, pair[1].id))
    return [
        BlockItem(
            header.page_id,
            index,
            BlockDescriptor(header.page_id, document.page_index, element.id, element.category, element.polygon),
        )
        for index, element in indexed
    ]


def check_aligned(batch: List[BlockItem], results: List[RecognizedBlock]) -> None:
    if len(results) != len(batch):
        raise BackendError(f"recognition returned {len(results)} results for a batch of {len(batch)}")
    for position, result in enumerate(results):
        if not isinstance(result, RecognizedBlock):
            raise BackendError(f"recognition result {position} is {type(result).__name__}, not RecognizedBlock")
        if result.content is not None and not isinstance(result.content, ContentPayload):
            raise BackendError(f"recognition result {position} has content of type {type(result.content).__name__}")
        if not isinstance(result.tokens, int) or result.tokens < 0:
            raise BackendError(f"recognition result {position} has token count {result.tokens!r}")


def stream_failure(exc: Exception) -> str:
    message = f"{type(exc).__name__}: {exc}"
    logger.error(f"page stream failed: {message}; finishing the pages already read")
    return message


@dataclass
class _PageState:
    header: PageItem
    remaining: int
    tokens: int = 0
    failed: bool = False
    error: str = ""


class PageAssembler:
    """Collects recognition results per page and finalizes each page exactly once"""

    def __init__(self, stats: StatsRecorder):
        self.stats = stats
        self.lock = threading.Lock()
        self.states: Dict[int, _PageState] = {}
        self.finished: Dict[int, ParsedPage] = {}

    def register(self, header: PageItem):
        with self.lock:
            if header.document is None:
                self._finish(_PageState(header, 0, failed=True, error=header.error))
                return
            state = _PageState(header, header.n_blocks)
            if state.remaining == 0:
                self._finish(state)
            else:
                self.states[header.page_id] = state

    def complete(self, batch: List[BlockItem], results: Optional[List[RecognizedBlock]], error: str = ""):
        with self.lock:
            for position, item in enumerate(batch):
                state = self.states.get(item.page_id)
                if state is None:
                    logger.error(f"recognition result for page id {item.page_id}, which is not open")
                    continue
                if results is None:
                    state.failed = True
                    state.error = state.error or error
                else:
                    try:
                        recognized = results[position]
                        state.header.document.elements[item.element_index].content = recognized.content
                        state.tokens += recognized.tokens
                    except Exception as e:
                        state.failed = True
                        state.error = state.error or f"{type(e).__name__}: {e}"
                state.remaining -= 1
                if state.remaining == 0:
                    del self.states[item.page_id]
                    self._finish(state)

    def _finish(self, state: _PageState):
        header = state.header
        tokens = 0 if state.failed else state.tokens
        self.finished[header.page_id] = ParsedPage(
            page_id=header.page_id,
            page_index=header.page_index,
            document=header.document,
            failed=state.failed,
            error=state.error,
            tokens=tokens,
        )
        self.stats.record_page(tokens, state.failed)
        if state.failed:
            logger.warning(f"page {header.page_index} (id {header.page_id}) failed: {state.error}")

    def results(self) -> List[ParsedPage]:
        with self.lock:
            return [self.finished[page_id] for page_id in sorted(self.finished)]


def _failure_header(page_id: int, descriptor_or_page, exc: Exception) -> PageItem:
    return PageItem(page_id, descriptor_or_page.page_index, None, 0, f"{type(exc).__name__}: {exc}")


class PipelineRuntime:
    """
    Three-stage page pipeline on the wall clock

    Preparation, layout and recognition each run in their own thread,
    connected by bounded FIFO queues. Recognition batches blocks across pages
    under the batch policy and fans batches out to a worker pool.
    """

    def __init__(
        self,
        backend: Backend,
        policy: BatchPolicy = BatchPolicy(),
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        recognition_workers: int = 1,
    ):
        if queue_capacity < 1:
            raise ValueError(f"queue capacity must be at least 1, got {queue_capacity}")
        if recognition_workers < 1:
            raise ValueError(f"recognition_workers must be at least 1, got {recognition_workers}")
        self.backend = backend
        self.policy = policy
        self.queue_capacity = queue_capacity
        self.recognition_workers = recognition_workers

    @staticmethod
    def _now_ms() -> float:
        return time.monotonic() * 1000.0

    def _timed(self, stats: StatsRecorder, stage: Stage, call, *args):
        start = time.perf_counter()
        try:
            return call(*args)
        finally:
            stats.record_call(stage.value, time.perf_counter() - start)

    def _prepare_loop(self, descriptors: Iterable[PageDescriptor], out_queue: queue.Queue, stats: StatsRecorder,
                      stream_errors: List[str]):
        try:
            for page_id, descriptor in enumerate(descriptors):
                try:
                    shell = self._timed(stats, Stage.PREPARE, self.backend.prepare, page_id, descriptor)
                    out_queue.put((page_id, shell))
                except Exception as e:
                    out_queue.put(_failure_header(page_id, descriptor, e))
        except Exception as e:
            stream_errors.append(stream_failure(e))
        finally:
            out_queue.put(END)

    def _layout_loop(self, in_queue: queue.Queue, out_queue: queue.Queue, stats: StatsRecorder):
        while True:
            item = in_queue.get()
            if item is END:
                out_queue.put(END)
                return
            if isinstance(item, PageItem):
                out_queue.put(item)
                continue
            page_id, shell = item
            try:
                header = self._timed(stats, Stage.LAYOUT, lay_out_page, self.backend, page_id, shell)
                blocks = block_items(header)
            except Exception as e:
                out_queue.put(_failure_header(page_id, shell, e))
                continue
            out_queue.put(header)
            for block in blocks:
                out_queue.put(block)

    def _run_batch(self, batch: List[BlockItem], pages: PageAssembler, stats: StatsRecorder, slots: threading.Semaphore):
        try:
            stats.record_batch(len(batch))
            try:
                results = self._timed(stats, Stage.RECOGNITION, self.backend.recognize, [b.descriptor for b in batch])
                check_aligned(batch, results)
            except Exception as e:
                pages.complete(batch, None, f"{type(e).__name__}: {e}")
            else:
                pages.complete(batch, results)
        finally:
            slots.release()

    def _recognition_loop(self, in_queue: queue.Queue, pages: PageAssembler, stats: StatsRecorder):
        pending: Deque[QueuedItem] = deque()
        slots = threading.Semaphore(self.recognition_workers)
        with ThreadPoolExecutor(max_workers=self.recognition_workers) as executor:

            def launch(batch):
                slots.acquire()
                logger.debug(f"launching recognition batch of {len(batch)}")
                executor.submit(self._run_batch, batch, pages, stats, slots)

            while True:
                decision = batch_collect(pending, self.policy, self._now_ms())
                if decision.launch:
                    launch(decision.batch)
                    continue
                try:
                    if decision.deadline_ms is None:
                        item = in_queue.get()
                    else:
                        item = in_queue.get(timeout=max(decision.deadline_ms - self._now_ms(), 0.0) / 1000.0)
                except queue.Empty:
                    continue

                if item is END:
                    # Flush whatever is left, oldest first
                    while pending:
                        take = min(self.policy.capacity, len(pending))
                        launch([pending.popleft().payload for _ in range(take)])
                    return
                if isinstance(item, PageItem):
                    pages.register(item)
                else:
                    pending.append(QueuedItem(self._now_ms(), item))

    def run(self, descriptors: Iterable[PageDescriptor]) -> PipelineResult:
        """
        Parse a stream of pages

        Args:
            descriptors: Page references, assigned page ids in stream order

        Returns:
            PipelineResult with one ParsedPage per input, sorted by page_id
        """
        stats = StatsRecorder()
        pages = PageAssembler(stats)
        prepared: queue.Queue = queue.Queue(maxsize=self.queue_capacity)
        laid_out: queue.Queue = queue.Queue(maxsize=self.queue_capacity)
        stream_errors: List[str] = []

        start = time.perf_counter()
        threads = [
            threading.Thread(target=self._prepare_loop, args=(descriptors, prepared, stats, stream_errors), daemon=True),
            threading.Thread(target=self._layout_loop, args=(prepared, laid_out, stats), daemon=True),
            threading.Thread(target=self._recognition_loop, args=(laid_out, pages, stats), daemon=True),
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        elapsed = time.perf_counter() - start

        result = PipelineResult(pages.results(), stats.snapshot(elapsed), "; ".join(stream_errors))
        logger.info(
            f"pipeline: {result.stats.pages} pages in {elapsed:.3f}s "
            f"({result.stats.pages_per_s:.1f} pages/s, {result.stats.failed} failed)"
        )
        return result


def create_pipeline_runtime(backend: Backend, policy: BatchPolicy = BatchPolicy(), queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
                            recognition_workers: int = 1) -> PipelineRuntime:
    return PipelineRuntime(backend, policy, queue_capacity, recognition_workers)
