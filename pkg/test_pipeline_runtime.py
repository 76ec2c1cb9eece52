import random
import threading
import unittest
from unittest.mock import patch

from backend import BackendError, LayoutResult, Stage
from batch_policy import BatchPolicy
from core_model import Category, LayoutElement, PageDescriptor, Polygon, parse_document
from evaluation import evaluate_documents
from mock_backend import LatencyModel, MockBackend, create_mock_backend
from pipeline_runtime import PipelineRuntime, create_pipeline_runtime, order_layout
from pipeline_simulator import simulate
from playback_backend import create_playback_backend
from reading_order import order_from_margin_matrix
from run_stats import RunStats, StatsRecorder


def descriptors(count, start=0):
    return [PageDescriptor(page_index=i, width_px=1000, height_px=1400) for i in range(start, start + count)]


def gt_pages(indices):
    pages = []
    for index in indices:
        pages.append({"page_index": index, "width_px": 1000, "height_px": 1400, "elements": [
            {"id": 0, "category": "paragraph_title", "polygon": [[100, 80], [900, 140]], "confidence": 1.0,
             "order": 0, "content": {"kind": "plain_text", "value": f"Section {index}"}},
            {"id": 1, "category": "text", "polygon": [[500, 200], [900, 700]], "confidence": 1.0,
             "order": 2, "content": {"kind": "plain_text", "value": "Right column text."}},
            {"id": 2, "category": "text", "polygon": [[100, 200], [480, 700]], "confidence": 1.0,
             "order": 1, "content": {"kind": "plain_text", "value": "Left column text."}},
            {"id": 3, "category": "table", "polygon": [[100, 800], [900, 1200]], "confidence": 1.0,
             "order": 3, "content": {"kind": "table_html", "value": "<table><tr><td>1</td></tr></table>"}},
        ]})
    return parse_document({"pages": pages})


class FlakyBackend(MockBackend):
    """Recognition fails for one page"""

    def __init__(self, bad_page, **kwargs):
        super().__init__(LatencyModel(), **kwargs)
        self.bad_page = bad_page

    def recognize(self, batch):
        if any(block.page_index == self.bad_page for block in batch):
            raise BackendError("recognizer crashed")
        return super().recognize(batch)


class ShortBackend(MockBackend):
    """Returns one result too few"""

    def recognize(self, batch):
        return super().recognize(batch)[:-1]


class MalformedBackend(MockBackend):
    """Right length, wrong item type"""

    def recognize(self, batch):
        return [None] * len(batch)


def broken_stream(good_pages):
    yield from descriptors(good_pages)
    raise OSError("input directory vanished")


class TestThreadedPipeline(unittest.TestCase):

    def test_zero_pages(self):
        """Empty input, empty output, rates of 0."""
        result = create_pipeline_runtime(create_mock_backend()).run([])
        self.assertEqual(result.pages, [])
        self.assertEqual(result.stats.pages, 0)
        self.assertEqual(result.stats.pages_per_s, 0.0)
        self.assertEqual(result.stats.tokens_per_s, 0.0)

    def test_zero_latency_mock(self):
        """100 pages with no modelled latency all come back with content."""
        result = PipelineRuntime(create_mock_backend(), BatchPolicy(8, 1.0)).run(descriptors(100))
        self.assertEqual(result.stats.pages, 100)
        self.assertGreater(result.stats.pages_per_s, 0)
        self.assertEqual(result.stats.tokens, 100 * 4 * 32)
        self.assertEqual(result.stats.batched_items, 400)

    def test_every_page_exactly_once_under_random_latencies(self):
        """Output page ids equal the input ids, sorted, for varied capacities and jitter."""
        rng = random.Random(17)
        for trial in range(6):
            latency = LatencyModel(
                prep_ms=rng.uniform(0, 1), layout_ms=rng.uniform(0, 2), recognition_ms=rng.uniform(0, 2),
                jitter_ms=2.0, seed=trial,
            )
            runtime = PipelineRuntime(
                create_mock_backend(latency, blocks_per_page=rng.randint(0, 3), realtime=True),
                BatchPolicy(rng.randint(1, 4), rng.uniform(0, 3)),
                queue_capacity=rng.randint(1, 4),
                recognition_workers=rng.randint(1, 3),
            )
            count = rng.randint(5, 15)
            result = runtime.run(descriptors(count))
            self.assertEqual([p.page_id for p in result.pages], list(range(count)))
            self.assertEqual(result.stats.pages, count)
            self.assertFalse(any(p.failed for p in result.pages))

    def test_mock_relations_put_blocks_in_reading_order(self):
        """Elements emitted bottom-up are ranked top-down after voting."""
        result = PipelineRuntime(create_mock_backend(blocks_per_page=4)).run(descriptors(1))
        document = result.pages[0].document
        ordered = document.ordered_elements()
        self.assertEqual([e.id for e in ordered], [0, 1, 2, 3])
        self.assertEqual(ordered[0].category, Category.DOC_TITLE)
        self.assertEqual(ordered[1].content.value, "Synthetic block 1 of page 0.")

    def test_playback_reproduces_ground_truth(self):
        """The oracle backend round-trips the GT and scores perfectly against it."""
        gt = gt_pages(range(3))
        runtime = PipelineRuntime(create_playback_backend(gt), BatchPolicy(3, 1.0))
        result = runtime.run(descriptors(3))

        self.assertEqual(result.documents, gt)
        report = evaluate_documents(gt, result.documents)
        self.assertAlmostEqual(report.overall, 100.0)
        self.assertEqual(report.reading_order_edit, 0.0)

    def test_stripped_order_is_rebuilt_from_relations(self):
        """Voting on margin matrices recovers the GT ranks."""
        gt = gt_pages(range(2))
        runtime = PipelineRuntime(create_playback_backend(gt, strip_order=True), BatchPolicy(2, 1.0))
        result = runtime.run(descriptors(2))

        for page, expected in zip(result.documents, gt):
            self.assertEqual([e.order for e in page.elements], [e.order for e in expected.elements])
        self.assertEqual(evaluate_documents(gt, result.documents).reading_order_edit, 0.0)

    def test_page_missing_from_ground_truth_fails_that_page(self):
        """Page 7 absent from the GT is a failure record naming page 7."""
        gt = gt_pages([i for i in range(9) if i != 7])
        result = PipelineRuntime(create_playback_backend(gt)).run(descriptors(9))

        self.assertEqual(len(result.pages), 9)
        self.assertTrue(result.pages[7].failed)
        self.assertIn("page 7", result.pages[7].error)
        self.assertEqual(result.stats.failed, 1)
        self.assertEqual(len(result.documents), 8)

    def test_recognition_failure_marks_only_that_page(self):
        """A crashing batch fails its page; the run continues."""
        backend = FlakyBackend(bad_page=3, blocks_per_page=2)
        result = PipelineRuntime(backend, BatchPolicy(1, 0.0)).run(descriptors(6))

        self.assertEqual([p.page_id for p in result.pages if p.failed], [3])
        self.assertIn("recognizer crashed", result.pages[3].error)
        self.assertEqual(result.pages[3].tokens, 0)
        self.assertEqual(result.stats.failed, 1)
        self.assertEqual(result.stats.pages, 6)

    def test_misaligned_results_fail_the_batch(self):
        """A backend returning too few results is treated as a failure."""
        backend = ShortBackend(LatencyModel(), blocks_per_page=2)
        result = PipelineRuntime(backend, BatchPolicy(2, 1000.0)).run(descriptors(1))
        self.assertTrue(result.pages[0].failed)
        self.assertIn("1 results for a batch of 2", result.pages[0].error)

    def test_malformed_results_fail_their_pages(self):
        """Non-RecognizedBlock results fail every page they touch, and every page is still reported."""
        backend = MalformedBackend(LatencyModel(), blocks_per_page=2)
        result = PipelineRuntime(backend, BatchPolicy(3, 1.0)).run(descriptors(3))

        self.assertEqual([p.page_id for p in result.pages], [0, 1, 2])
        self.assertTrue(all(p.failed for p in result.pages))
        self.assertIn("NoneType", result.pages[0].error)
        self.assertEqual(result.stats.failed, 3)
        self.assertEqual(result.documents, [])

    def test_broken_page_stream_still_finishes(self):
        """An input iterator that raises ends the run after the pages it produced."""
        runtime = PipelineRuntime(create_mock_backend(), BatchPolicy(2, 1.0))
        outcome = {}
        worker = threading.Thread(target=lambda: outcome.setdefault("result", runtime.run(broken_stream(2))), daemon=True)
        with patch('pipeline_runtime.logger'):
            worker.start()
            worker.join(timeout=10.0)

        self.assertFalse(worker.is_alive())
        result = outcome["result"]
        self.assertEqual([p.page_id for p in result.pages], [0, 1])
        self.assertFalse(any(p.failed for p in result.pages))
        self.assertIn("OSError: input directory vanished", result.stream_error)

    def test_invalid_capacities_raise(self):
        """Queues and worker pools need at least one slot."""
        with self.assertRaises(ValueError):
            PipelineRuntime(create_mock_backend(), queue_capacity=0)
        with self.assertRaises(ValueError):
            PipelineRuntime(create_mock_backend(), recognition_workers=0)


class TestOrderLayout(unittest.TestCase):

    def _element(self, element_id, top, order=None):
        return LayoutElement(
            id=element_id, category=Category.TEXT,
            polygon=Polygon([(0, top), (100, top + 10)]), confidence=1.0, order=order,
        )

    def test_existing_ranks_are_kept(self):
        """Backends that rank their own elements are trusted."""
        elements = order_layout(LayoutResult([self._element(0, 50, order=1), self._element(1, 0, order=0)]))
        self.assertEqual([e.order for e in elements], [1, 0])

    def test_mixed_ranks_fall_back_to_geometry_with_warning(self):
        """Partial ranks are replaced by top-to-bottom order."""
        layout = LayoutResult([self._element(0, 50, order=0), self._element(1, 0)])
        with patch('pipeline_runtime.logger') as mock_logger:
            elements = order_layout(layout)
            mock_logger.warning.assert_called_once()
        self.assertEqual([e.order for e in elements], [1, 0])

    def test_relation_size_mismatch_raises(self):
        """The matrix must cover every element."""
        layout = LayoutResult([self._element(0, 0)], order_from_margin_matrix([0, 1], 1.0))
        with self.assertRaises(BackendError):
            order_layout(layout)


class TestSimulatedPipeline(unittest.TestCase):

    def test_pipelining_beats_sequential(self):
        """(10, 20, 15) ms stages reach ~50 pages/s against ~22.2 sequential."""
        latency = LatencyModel.from_stage_latencies("10,20,15")
        policy = BatchPolicy(1, 50.0)
        pipelined = simulate(descriptors(200), create_mock_backend(latency, blocks_per_page=1), policy)
        sequential = simulate(descriptors(200), create_mock_backend(latency, blocks_per_page=1), policy, sequential=True)

        self.assertGreaterEqual(pipelined.stats.pages_per_s, 0.9 * 50.0)
        self.assertLessEqual(pipelined.stats.pages_per_s, 50.0 + 1e-9)
        self.assertAlmostEqual(sequential.stats.pages_per_s, 1000.0 / 45.0, places=6)
        self.assertGreaterEqual(pipelined.stats.pages_per_s, 1.8 * sequential.stats.pages_per_s)

    def test_batching_cuts_backend_calls(self):
        """64 single-block pages: 8 calls at B=8, 64 at B=1."""
        latency = LatencyModel(recognition_ms=5.0)
        batched = simulate(descriptors(64), create_mock_backend(latency, blocks_per_page=1), BatchPolicy(8, 50.0))
        single = simulate(descriptors(64), create_mock_backend(latency, blocks_per_page=1), BatchPolicy(1, 50.0))

        self.assertEqual(batched.stats.backend_calls["recognition"], 8)
        self.assertEqual(batched.stats.batch_histogram, {8: 8})
        self.assertEqual(single.stats.backend_calls["recognition"], 64)

    def test_same_seed_gives_identical_histogram(self):
        """Jittered runs are reproducible."""
        def run():
            latency = LatencyModel(2.0, 4.0, 3.0, per_item_ms=0.5, jitter_ms=5.0, seed=42)
            backend = create_mock_backend(latency, blocks_per_page=3)
            return simulate(descriptors(40), backend, BatchPolicy(5, 4.0), recognition_workers=2)

        first, second = run(), run()
        self.assertEqual(first.stats.batch_histogram, second.stats.batch_histogram)
        self.assertEqual(first.stats, second.stats)

    def test_batched_items_equal_blocks_processed(self):
        """Sum of batch sizes is the number of recognized blocks."""
        latency = LatencyModel(1.0, 2.0, 3.0, jitter_ms=2.0, seed=5)
        result = simulate(descriptors(30), create_mock_backend(latency, blocks_per_page=3), BatchPolicy(4, 5.0),
                          queue_capacity=2)
        self.assertEqual(result.stats.batched_items, 90)
        self.assertTrue(all(size <= 4 for size in result.stats.batch_histogram))
        self.assertEqual([p.page_id for p in result.pages], list(range(30)))

    def test_broken_page_stream_ends_the_run(self):
        """Pipelined and sequential modes both stop cleanly at a failing iterator."""
        for sequential in (False, True):
            with patch('pipeline_runtime.logger') as mock_logger:
                result = simulate(broken_stream(3), create_mock_backend(blocks_per_page=2), BatchPolicy(2, 5.0),
                                  sequential=sequential)
                mock_logger.error.assert_called_once()
            self.assertEqual([p.page_id for p in result.pages], [0, 1, 2])
            self.assertIn("OSError", result.stream_error)

    def test_malformed_results_are_failures_on_the_simulated_clock(self):
        """The simulator finalizes pages whose results are unusable."""
        result = simulate(descriptors(4), MalformedBackend(LatencyModel(), blocks_per_page=1), BatchPolicy(2, 5.0))
        self.assertEqual(result.stats.pages, 4)
        self.assertEqual(result.stats.failed, 4)

    def test_stage_busy_time_is_modelled_time(self):
        """Busy seconds add up the service hints."""
        latency = LatencyModel.from_stage_latencies("10,20,15")
        result = simulate(descriptors(10), create_mock_backend(latency, blocks_per_page=1), BatchPolicy(1, 0.0))
        self.assertAlmostEqual(result.stats.stage_busy_s[Stage.LAYOUT.value], 0.2)
        self.assertEqual(result.stats.backend_calls[Stage.PREPARE.value], 10)


class TestRunStats(unittest.TestCase):

    def test_zero_time_reports_zero_rates(self):
        """No division by zero."""
        stats = StatsRecorder().snapshot(0.0)
        self.assertEqual((stats.pages_per_s, stats.tokens_per_s), (0.0, 0.0))

    def test_rates_follow_totals(self):
        """pages/s = pages / time and tokens/s = tokens / time."""
        recorder = StatsRecorder()
        recorder.record_page(100, failed=False)
        recorder.record_page(0, failed=True)
        recorder.record_batch(2)
        stats = recorder.snapshot(4.0)
        self.assertEqual(stats.pages_per_s, 0.5)
        self.assertEqual(stats.tokens_per_s, 25.0)
        self.assertEqual(stats.failed, 1)
        self.assertEqual(stats.batched_items, 2)

    def test_table_row_keys(self):
        """Total time, pages/s and tokens/s."""
        self.assertEqual(list(RunStats().table_row()), ["total_time_s", "pages_per_s", "tokens_per_s"])


if __name__ == '__main__':
    unittest.main()
