import io
import json
import os
import tempfile
import time
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from app import EXIT_FAILED_ITEMS, EXIT_OK, EXIT_USAGE, configure_logging, main
from config import AppConfig, BackendSettings, ConfigError, create_backend_from_config, load_config
from core_model import load_document, parse_document, save_document
from embeddings_io import write_embeddings
from file_io import atomic_write_text
from mock_backend import MockBackend
from playback_backend import PlaybackBackend

GT = {"pages": [
    {"page_index": 0, "width_px": 1000, "height_px": 1400, "elements": [
        {"id": 0, "category": "doc_title", "polygon": [[100, 50], [900, 120]], "confidence": 1.0, "order": 0,
         "content": {"kind": "plain_text", "value": "Quarterly Report"}},
        {"id": 1, "category": "text", "polygon": [[100, 200], [900, 500]], "confidence": 1.0, "order": 1,
         "content": {"kind": "plain_text", "value": "Sales rose."}},
        {"id": 2, "category": "table", "polygon": [[100, 900], [900, 1300]], "confidence": 1.0, "order": 2,
         "content": {"kind": "table_html", "value": "<table><tr><th>Q</th><th>Sales</th></tr><tr><td>1</td><td>10</td></tr></table>"}},
    ]},
    {"page_index": 1, "width_px": 1000, "height_px": 1400, "elements": [
        {"id": 0, "category": "table", "polygon": [[100, 100], [900, 400]], "confidence": 1.0, "order": 0,
         "content": {"kind": "table_html", "value": "<table><tr><th>Q</th><th>Sales</th></tr><tr><td>2</td><td>12</td></tr></table>"}},
        {"id": 1, "category": "display_formula", "polygon": [[200, 500], [800, 560]], "confidence": 1.0, "order": 1,
         "content": {"kind": "formula_latex", "value": "g = s_2 / s_1 - 1"}},
    ]},
]}


@patch('app.configure_logging')
class TestCommands(unittest.TestCase):

    def setUp(self):
        temp = tempfile.TemporaryDirectory()
        self.addCleanup(temp.cleanup)
        self.dir = Path(temp.name)
        self.gt_path = self.dir / "report.json"
        save_document(parse_document(GT), self.gt_path)

    def run_main(self, *argv):
        with patch('sys.stdout', new_callable=io.StringIO) as out, patch('sys.stderr', new_callable=io.StringIO) as err:
            code = main([str(a) for a in argv])
        return code, out.getvalue(), err.getvalue()

    def test_parse_with_playback_writes_all_outputs(self, _):
        """Playback over a GT file succeeds and writes every artifact."""
        out = self.dir / "out"
        code, _, err = self.run_main("parse", "--input", self.gt_path, "--backend", "playback", "--out", out)

        self.assertEqual(code, EXIT_OK, err)
        for suffix in (".md", ".json", ".pred.json", ".merges.jsonl", ".run_stats.json"):
            self.assertTrue((out / f"report{suffix}").exists(), suffix)
        self.assertEqual(load_document(out / "report.pred.json"), parse_document(GT))
        markdown = (out / "report.md").read_text(encoding="utf-8")
        self.assertTrue(markdown.startswith("# Quarterly Report\n\nSales rose."))
        self.assertEqual(markdown.count("<table>"), 1)
        merges = (out / "report.merges.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertTrue(json.loads(merges[0])["accepted"])

    def test_playback_parse_then_eval_scores_perfectly(self, _):
        """parse --backend playback on 5 pages, then eval of the .pred.json against the same GT."""
        five_pages = {"pages": GT["pages"] + [
            {"page_index": index, "width_px": 1000, "height_px": 1400, "elements": [
                {"id": 0, "category": "paragraph_title", "polygon": [[100, 50], [900, 120]], "confidence": 1.0, "order": 0,
                 "content": {"kind": "plain_text", "value": f"{index}. Region {index}"}},
                {"id": 1, "category": "text", "polygon": [[100, 200], [900, 500]], "confidence": 1.0, "order": 1,
                 "content": {"kind": "plain_text", "value": f"Region {index} sales were flat."}},
            ]}
            for index in range(2, 5)
        ]}
        gt_path = self.dir / "five.json"
        save_document(parse_document(five_pages), gt_path)
        out = self.dir / "five"

        start = time.perf_counter()
        code, _, err = self.run_main("parse", "--input", gt_path, "--backend", "playback", "--out", out)
        self.assertEqual(code, EXIT_OK, err)
        code, report_json, err = self.run_main("eval", "--gt", gt_path, "--pred", out / "five.pred.json")
        elapsed = time.perf_counter() - start

        self.assertEqual(code, EXIT_OK, err)
        report = json.loads(report_json)
        self.assertEqual(len(report["pages"]), 5)
        self.assertAlmostEqual(report["overall"], 100.0)
        self.assertEqual(report["text_edit"], 0.0)
        self.assertEqual(report["reading_order_edit"], 0.0)
        self.assertLess(elapsed, 2.0)

    def test_unknown_backend_exits_with_usage_error(self, _):
        """gpu is not a backend; the message lists the valid kinds."""
        code, _, err = self.run_main("parse", "--input", self.gt_path, "--backend", "gpu", "--out", self.dir / "out")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("'gpu'", err)
        self.assertIn("mock, playback", err)

    def test_synthetic_mock_run_reports_throughput(self, _):
        """100 synthetic pages produce run stats with a positive rate."""
        out = self.dir / "mock"
        code, _, _ = self.run_main("parse", "--backend", "mock", "--pages", 100, "--out", out)

        self.assertEqual(code, EXIT_OK)
        stats = json.loads((out / "synthetic.run_stats.json").read_text(encoding="utf-8"))
        self.assertEqual(stats["pages"], 100)
        self.assertGreater(stats["pages_per_s"], 0)

    def test_parse_without_input_or_pages_is_a_usage_error(self, _):
        """Nothing to parse."""
        code, _, err = self.run_main("parse", "--out", self.dir / "out")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("--pages", err)

    def test_missing_page_exits_with_failed_items(self, _):
        """A page the playback GT lacks fails, the rest are written."""
        config = self.dir / "cfg.toml"
        gt_path = self.dir / "partial.json"
        partial = parse_document(GT)[:1]
        save_document(partial, gt_path)
        config.write_text(f'[backend]\nkind = "playback"\ngt = "{gt_path.as_posix()}"\n', encoding="utf-8")

        code, _, err = self.run_main("parse", "--input", self.gt_path, "--config", config, "--out", self.dir / "out")

        self.assertEqual(code, EXIT_FAILED_ITEMS)
        self.assertIn("page 1 failed", err)
        self.assertEqual(len(load_document(self.dir / "out" / "report.pred.json")), 1)

    def test_eval_json_report_for_identical_documents(self, _):
        """GT against itself scores 100."""
        code, out, _ = self.run_main("eval", "--gt", self.gt_path, "--pred", self.gt_path)
        self.assertEqual(code, EXIT_OK)
        report = json.loads(out)
        self.assertAlmostEqual(report["overall"], 100.0)
        self.assertEqual(report["formula_metric"], "formula_proxy (non-CDM)")

    def test_eval_table_report_to_file(self, _):
        """--report table writes the aligned header line."""
        target = self.dir / "report.txt"
        code, _, _ = self.run_main("eval", "--gt", self.gt_path, "--pred", self.gt_path, "--report", "table", "--out", target)
        self.assertEqual(code, EXIT_OK)
        header = target.read_text(encoding="utf-8").splitlines()[0]
        self.assertTrue(header.lstrip().startswith("Overall"))
        self.assertIn("Reading Order^Edit", header)

    def test_eval_rejects_bad_weights(self, _):
        """Weights must sum to 1."""
        code, _, err = self.run_main("eval", "--gt", self.gt_path, "--pred", self.gt_path, "--weights", "0.5,0.5,0.5")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("sum to 1", err)

    def test_plan_echoes_defaults(self, _):
        """alpha 1 and beta 2 unless overridden; allocations stay within the budget."""
        rng = np.random.default_rng(0)
        vectors = np.vstack([rng.normal(0, 0.1, (10, 4)), rng.normal(5, 0.1, (10, 4))])
        ids = [f"doc{i}" for i in range(20)]
        embeddings = self.dir / "emb.bin"
        write_embeddings(embeddings, vectors, ids)
        rollouts = self.dir / "rollouts.json"
        rollouts.write_text(json.dumps({i: ["same text", "same text"] if n < 10 else ["abc", "xyz"] for n, i in enumerate(ids)}))

        code, out, _ = self.run_main(
            "plan", "--embeddings", embeddings, "--rollouts", rollouts, "--k", 2, "--budget", 10, "--seed", 1,
        )

        self.assertEqual(code, EXIT_OK)
        plan = json.loads(out)
        self.assertEqual((plan["alpha"], plan["beta"]), (1.0, 2.0))
        self.assertLessEqual(sum(c["allocated"] for c in plan["clusters"]), 10)

    def test_plan_per_task(self, _):
        """--tasks writes one plan per task name."""
        rng = np.random.default_rng(1)
        vectors = rng.normal(0, 1, (8, 3))
        ids = [f"doc{i}" for i in range(8)]
        embeddings = self.dir / "emb.bin"
        write_embeddings(embeddings, vectors, ids)
        rollouts = self.dir / "rollouts.json"
        rollouts.write_text(json.dumps({i: ["abc", "abd"] for i in ids}))
        tasks = self.dir / "tasks.json"
        tasks.write_text(json.dumps({i: "table" if n % 2 else "formula" for n, i in enumerate(ids)}))

        code, out, _ = self.run_main(
            "plan", "--embeddings", embeddings, "--rollouts", rollouts, "--k", 2, "--budget", 3, "--tasks", tasks,
        )

        self.assertEqual(code, EXIT_OK)
        plans = json.loads(out)["tasks"]
        self.assertEqual(sorted(plans), ["formula", "table"])
        for plan in plans.values():
            self.assertEqual(sum(c["size"] for c in plan["clusters"]), 4)
            self.assertLessEqual(sum(c["allocated"] for c in plan["clusters"]), 3)

    def test_bench_matches_bottleneck_rate(self, _):
        """Default bench is within 10% of 50 pages/s."""
        code, out, _ = self.run_main("bench")
        self.assertEqual(code, EXIT_OK)
        result = json.loads(out)
        self.assertEqual(list(result)[:3], ["total_time_s", "pages_per_s", "tokens_per_s"])
        self.assertGreaterEqual(result["pages_per_s"], 45.0)
        self.assertLessEqual(result["pages_per_s"], 50.0)

    def test_bench_sequential(self, _):
        """--sequential gives the no-overlap rate."""
        code, out, _ = self.run_main("bench", "--sequential")
        self.assertEqual(code, EXIT_OK)
        self.assertAlmostEqual(json.loads(out)["pages_per_s"], 1000 / 45, places=4)

    def test_bench_larger_batches_make_fewer_calls(self, _):
        """B=16 needs fewer recognition calls than B=1 for the same pages."""
        calls = {}
        for capacity in (1, 16):
            code, out, _ = self.run_main("bench", "--pages", 40, "--blocks-per-page", 4, "--batch-capacity", capacity)
            self.assertEqual(code, EXIT_OK)
            calls[capacity] = json.loads(out)["backend_calls"]["recognition"]
        self.assertEqual(calls[1], 160)
        self.assertLess(calls[16], calls[1])

    def test_bench_same_seed_same_output(self, _):
        """Jittered latencies repeat under a fixed seed."""
        argv = ("bench", "--pages", 30, "--jitter-ms", 3, "--batch-capacity", 4, "--seed", 11)
        first = self.run_main(*argv)
        second = self.run_main(*argv)
        self.assertEqual(first[0], EXIT_OK)
        self.assertEqual(first[1], second[1])

    def test_mine_flags_sharp_drops(self, _):
        """12 -> 3 with delta 5."""
        detections = self.dir / "det.json"
        detections.write_text(json.dumps({"low": {"a": 12, "b": 4}, "high": {"a": 3, "b": 4}}))
        code, out, _ = self.run_main("mine", "--detections", detections)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(out)["unstable"], ["a"])

    def test_mine_needs_an_input(self, _):
        """No counts, no mining."""
        code, _, _ = self.run_main("mine")
        self.assertEqual(code, EXIT_USAGE)

    def test_help_exits_cleanly(self, _):
        """--help prints usage and exits 0."""
        with patch('sys.stdout', new_callable=io.StringIO) as out:
            with self.assertRaises(SystemExit) as ctx:
                main(["--help"])
        self.assertEqual(ctx.exception.code, 0)
        self.assertIn("parse", out.getvalue())


class TestConfig(unittest.TestCase):

    def setUp(self):
        temp = tempfile.TemporaryDirectory()
        self.addCleanup(temp.cleanup)
        self.dir = Path(temp.name)

    def test_defaults_without_file(self):
        """No path gives the built-in defaults."""
        config = load_config(None)
        self.assertEqual(config.pipeline.batch_capacity, 16)
        self.assertEqual(config.pipeline.max_wait_ms, 50.0)
        self.assertEqual(config.pipeline.queue_capacity, 64)

    def test_toml_and_json_are_equivalent(self):
        """Both formats load into the same AppConfig."""
        toml_path = self.dir / "c.toml"
        toml_path.write_text("seed = 7\n[pipeline]\nbatch_capacity = 4\n[metrics]\nweights = [0.5, 0.25, 0.25]\n")
        json_path = self.dir / "c.json"
        json_path.write_text(json.dumps({"seed": 7, "pipeline": {"batch_capacity": 4}, "metrics": {"weights": [0.5, 0.25, 0.25]}}))

        self.assertEqual(load_config(toml_path), load_config(json_path))
        self.assertEqual(load_config(toml_path).metrics.overall_weights().text, 0.5)

    def test_unknown_key_is_rejected(self):
        """Typos in config keys are errors."""
        path = self.dir / "c.toml"
        path.write_text("[pipeline]\nbatch_capcity = 4\n")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_other_extensions_are_rejected(self):
        """Only .toml and .json."""
        path = self.dir / "c.yaml"
        path.write_text("seed: 1\n")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_invalid_toml_is_reported(self):
        """Syntax errors surface as ConfigError."""
        path = self.dir / "c.toml"
        path.write_text("[pipeline\n")
        with self.assertRaises(ConfigError):
            load_config(path)

    def test_backend_factory(self):
        """mock and playback build their classes; playback needs ground truth."""
        self.assertIsInstance(create_backend_from_config(BackendSettings(kind="mock")), MockBackend)
        pages = parse_document(GT)
        self.assertIsInstance(create_backend_from_config(BackendSettings(kind="playback"), gt_pages=pages), PlaybackBackend)
        with self.assertRaises(ConfigError):
            create_backend_from_config(BackendSettings(kind="playback"))
        with self.assertRaises(ConfigError) as ctx:
            create_backend_from_config(AppConfig().backend.model_copy(update={"kind": "gpu"}))
        self.assertIn("valid kinds: mock, playback", str(ctx.exception))


class TestAmbient(unittest.TestCase):

    @patch.dict(os.environ, {"DOCPARSE_LOG": "chatty"})
    @patch('app.logger')
    def test_bad_log_level_falls_back_to_warning(self, mock_logger):
        """An unknown level is reported and WARNING is used."""
        mock_logger.add.side_effect = [ValueError("no such level"), None]
        configure_logging()
        self.assertEqual(mock_logger.add.call_args.kwargs["level"], "WARNING")
        mock_logger.warning.assert_called_once()

    def test_atomic_write_leaves_no_temporary_files(self):
        """Only the target remains after a write."""
        with tempfile.TemporaryDirectory() as temp_dir:
            target = Path(temp_dir) / "nested" / "out.txt"
            atomic_write_text(target, "hello\n")
            atomic_write_text(target, "again\n")
            self.assertEqual(target.read_text(encoding="utf-8"), "again\n")
            self.assertEqual(os.listdir(target.parent), ["out.txt"])


if __name__ == '__main__':
    unittest.main()
