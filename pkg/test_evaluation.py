import unittest
from unittest.mock import patch

from core_model import parse_document
from evaluation import (
    TABLE_COLUMNS,
    EvaluationSettings,
    evaluate_documents,
    evaluate_spotting,
    page_text,
    render_table,
)
from metrics import OverallWeights
from spotting_codec import Quad, SpottingRecord, TextInstance

TABLE_HTML = "<table><tr><td>a</td><td>b</td></tr><tr><td>1</td><td>2</td></tr></table>"


def block(element_id, category, box, order, kind, value):
    return {
        "id": element_id,
        "category": category,
        "polygon": box,
        "confidence": 1.0,
        "order": order,
        "content": {"kind": kind, "value": value},
    }


def ground_truth():
    return parse_document({"pages": [
        {"page_index": 0, "width_px": 1000, "height_px": 1000, "elements": [
            block(0, "doc_title", [[100, 50], [900, 100]], 0, "plain_text", "Annual Report"),
            block(1, "text", [[100, 150], [900, 300]], 1, "plain_text", "Revenue grew in every region."),
            block(2, "display_formula", [[200, 350], [800, 400]], 2, "formula_latex", r"E = mc^2"),
            block(3, "table", [[100, 450], [900, 700]], 3, "table_html", TABLE_HTML),
            block(4, "header", [[0, 0], [1000, 30]], 4, "plain_text", "Page header"),
        ]},
        {"page_index": 1, "width_px": 1000, "height_px": 1000, "elements": [
            block(0, "text", [[100, 100], [900, 300]], 0, "plain_text", "Outlook remains stable."),
            block(1, "seal", [[700, 700], [900, 900]], 1, "seal_text", "北京印章"),
        ]},
    ]})


def text_only(value):
    return parse_document({"pages": [
        {"page_index": 0, "width_px": 500, "height_px": 500, "elements": [
            block(0, "text", [[10, 10], [400, 100]], 0, "plain_text", value),
        ]},
    ]})


def spotting_record(image, text, dimension):
    quad = Quad(((0, 0), (100, 0), (100, 50), (0, 50)))
    return SpottingRecord(image, [TextInstance(text, quad)], dimension=dimension)


class TestEvaluateDocuments(unittest.TestCase):

    def test_ground_truth_against_itself_is_perfect(self):
        """Overall 100 and zero edit distances."""
        gt = ground_truth()
        report = evaluate_documents(gt, ground_truth())

        self.assertAlmostEqual(report.overall, 100.0)
        self.assertEqual(report.text_edit, 0.0)
        self.assertEqual(report.reading_order_edit, 0.0)
        self.assertEqual(report.formula_proxy, 1.0)
        self.assertEqual(report.table_teds, 1.0)
        self.assertEqual(report.table_teds_s, 1.0)
        self.assertEqual(report.seal_ned, 0.0)
        self.assertEqual(len(report.pages), 2)

    def test_empty_prediction_scores_the_floor(self):
        """Missing pages read as empty: text edit 1 and nothing earned."""
        report = evaluate_documents(ground_truth(), [])

        self.assertEqual(report.text_edit, 1.0)
        self.assertEqual(report.formula_proxy, 0.0)
        self.assertEqual(report.table_teds, 0.0)
        self.assertEqual(report.reading_order_edit, 1.0)
        self.assertEqual(report.seal_ned, 1.0)
        self.assertAlmostEqual(report.overall, 0.0)
        self.assertTrue(all(page.missing_prediction for page in report.pages))

    def test_components_without_ground_truth_are_null(self):
        """No tables or formulas means null scores and text-only weights."""
        report = evaluate_documents(text_only("abcdefghij"), text_only("abcdefghiX"))

        self.assertIsNone(report.formula_proxy)
        self.assertIsNone(report.table_teds)
        self.assertIsNone(report.seal_ned)
        self.assertAlmostEqual(report.text_edit, 0.1)
        self.assertEqual(report.weights, {"text": 1.0, "formula": 0.0, "table": 0.0})
        self.assertAlmostEqual(report.overall, 90.0)

    def test_custom_weights_are_applied(self):
        """Weights come from the settings."""
        settings = EvaluationSettings(weights=OverallWeights(0.5, 0.25, 0.25))
        report = evaluate_documents(ground_truth(), [], settings)
        self.assertEqual(report.weights, {"text": 0.5, "formula": 0.25, "table": 0.25})

    def test_thread_pool_gives_the_same_report(self):
        """Parallel page scoring aggregates in page order."""
        pred = ground_truth()
        pred[0].elements[1].content.value = "Revenue fell in some regions."
        serial = evaluate_documents(ground_truth(), pred, EvaluationSettings(workers=1))
        parallel = evaluate_documents(ground_truth(), pred, EvaluationSettings(workers=4))
        self.assertEqual(serial, parallel)

    def test_unparsable_predicted_table_scores_zero(self):
        """A broken table costs that table, not the run."""
        pred = ground_truth()
        pred[0].elements[3].content.value = "not a table"
        with patch('evaluation.logger') as mock_logger:
            report = evaluate_documents(ground_truth(), pred)
            mock_logger.warning.assert_called_once()
        self.assertEqual(report.table_teds, 0.0)
        self.assertLess(report.overall, 100.0)

    def test_page_text_skips_tables_formulas_and_decoration(self):
        """Only text-bearing blocks join the page text."""
        self.assertEqual(page_text(ground_truth()[0]), "Annual Report\nRevenue grew in every region.")
        self.assertIn("Page header", page_text(ground_truth()[0], exclude_decorative=False))


class TestSpotting(unittest.TestCase):

    def test_dimensions_are_macro_averaged(self):
        """Two perfect images in one dimension and one miss in another average to 0.5."""
        gt = [
            spotting_record("a.png", "DREAM", "horizontal"),
            spotting_record("b.png", "WAKE", "horizontal"),
            spotting_record("c.png", "SLEEP", "rotated"),
        ]
        pred = [
            spotting_record("a.png", "DREAM", "horizontal"),
            spotting_record("b.png", "WAKE", "horizontal"),
        ]
        result = evaluate_spotting(gt, pred)
        self.assertEqual(result["horizontal"], 1.0)
        self.assertEqual(result["rotated"], 0.0)
        self.assertEqual(result["mean"], 0.5)

    def test_spotting_lands_in_the_report(self):
        """The macro mean is the report's spotting accuracy."""
        scores = {"all": 0.8, "mean": 0.8}
        report = evaluate_documents(ground_truth(), ground_truth(), spotting=scores)
        self.assertEqual(report.spotting_accuracy, 0.8)
        self.assertEqual(report.spotting_by_dimension, {"all": 0.8})


class TestRenderTable(unittest.TestCase):

    def test_header_uses_benchmark_column_names(self):
        """Two lines, every column named, nulls as dashes."""
        report = evaluate_documents(text_only("abc"), text_only("abc"))
        header, values = render_table(report).splitlines()

        for title, _ in TABLE_COLUMNS:
            self.assertIn(title, header)
        self.assertIn("Formula^Proxy(non-CDM)", header)
        self.assertTrue(values.split()[0] == "100.00")
        self.assertIn("-", values.split())
        self.assertEqual(len(header), len(values))


if __name__ == '__main__':
    unittest.main()
