from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from loguru import logger
from pydantic import BaseModel, Field

from core_model import Category, DECORATIVE_CATEGORIES, LayoutElement, PageDocument
from metrics import (
    DEFAULT_IOU_THRESHOLD,
    FORMULA_METRIC_LABEL,
    MetricError,
    OverallWeights,
    formula_proxy,
    greedy_match,
    normalized_edit_distance,
    overall,
    reading_order_edit,
    seal_ned,
    spotting_accuracy,
    table_similarity,
)
from spotting_codec import SpottingRecord
from table_tree import TableParseError

# Scored by their own metric, or not text at all
NON_TEXT_CATEGORIES = frozenset({
    Category.TABLE,
    Category.DISPLAY_FORMULA,
    Category.FORMULA_NUMBER,
    Category.IMAGE,
    Category.CHART,
    Category.SEAL,
}) | DECORATIVE_CATEGORIES

Fraction = Optional[float]


class PageMetrics(BaseModel):
    page_index: int
    text_edit: Fraction = Field(default=None, ge=0.0, le=1.0)
    formula_proxy: Fraction = Field(default=None, ge=0.0, le=1.0)
    table_teds: Fraction = Field(default=None, ge=0.0, le=1.0)
    table_teds_s: Fraction = Field(default=None, ge=0.0, le=1.0)
    reading_order_edit: Fraction = Field(default=None, ge=0.0, le=1.0)
    seal_ned: Fraction = Field(default=None, ge=0.0, le=1.0)
    missing_prediction: bool = False


class MetricReport(BaseModel):
    """Aggregate scores; null marks a component with nothing to score"""

    overall: Optional[float] = Field(default=None, ge=0.0, le=100.0)
    text_edit: Fraction = Field(default=None, ge=0.0, le=1.0)
    formula_proxy: Fraction = Field(default=None, ge=0.0, le=1.0)
    table_teds: Fraction = Field(default=None, ge=0.0, le=1.0)
    table_teds_s: Fraction = Field(default=None, ge=0.0, le=1.0)
    reading_order_edit: Fraction = Field(default=None, ge=0.0, le=1.0)
    spotting_accuracy: Fraction = Field(default=None, ge=0.0, le=1.0)
    seal_ned: Fraction = Field(default=None, ge=0.0, le=1.0)
    formula_metric: str = FORMULA_METRIC_LABEL
    table_approximate: bool = False
    weights: Dict[str, float] = Field(default_factory=dict)
    spotting_by_dimension: Dict[str, float] = Field(default_factory=dict)
    pages: List[PageMetrics] = Field(default_factory=list)


@dataclass
class EvaluationSettings:
    weights: OverallWeights = field(default_factory=OverallWeights)
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    exclude_decorative: bool = True
    workers: int = 1


@dataclass
class _PageScores:
    metrics: PageMetrics
    formula: List[float] = field(default_factory=list)
    teds: List[float] = field(default_factory=list)
    teds_s: List[float] = field(default_factory=list)
    seal: List[float] = field(default_factory=list)
    approximate: bool = False


def page_text(page: PageDocument, exclude_decorative: bool = True) -> str:
    """Text-bearing content in reading order, one block per line"""
    parts = []
    for element in page.ordered_elements():
        if element.category in NON_TEXT_CATEGORIES and (exclude_decorative or element.category not in DECORATIVE_CATEGORIES):
            continue
        if element.content is not None:
            parts.append(element.content.value)
    return "\n".join(parts)


def _of_category(page: Optional[PageDocument], category: Category) -> List[LayoutElement]:
    if page is None:
        return []
    return [e for e in page.ordered_elements() if e.category == category]


def _content(element: LayoutElement) -> str:
    return element.content.value if element.content is not None else ""


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def _match_category(pred_page, gt_page, category, threshold):
    gt_elements = _of_category(gt_page, category)
    pred_elements = _of_category(pred_page, category)
    match = greedy_match([e.polygon for e in pred_elements], [e.polygon for e in gt_elements], threshold)
    return pred_elements, gt_elements, match


def _score_tables(pred_page, gt_page, settings, scores: _PageScores) -> None:
    pred_tables, gt_tables, match = _match_category(pred_page, gt_page, Category.TABLE, settings.iou_threshold)
    matched = {j: i for i, j, _ in match.pairs}
    for j, gt_element in enumerate(gt_tables):
        if j not in matched:
            scores.teds.append(0.0)
            scores.teds_s.append(0.0)
            continue
        pred_html = _content(pred_tables[matched[j]])
        try:
            content_score = table_similarity(pred_html, _content(gt_element), structure_only=False)
            structure_score = table_similarity(pred_html, _content(gt_element), structure_only=True)
        except (TableParseError, MetricError) as exc:
            logger.warning(f"page {gt_page.page_index} table {gt_element.id}: {exc}; scored 0")
            scores.teds.append(0.0)
            scores.teds_s.append(0.0)
            continue
        scores.teds.append(content_score.value)
        scores.teds_s.append(structure_score.value)
        scores.approximate |= content_score.approximate or structure_score.approximate


def evaluate_page(pred_page: Optional[PageDocument], gt_page: PageDocument, settings: EvaluationSettings) -> _PageScores:
    metrics = PageMetrics(page_index=gt_page.page_index, missing_prediction=pred_page is None)
    scores = _PageScores(metrics)
    empty = PageDocument(page_index=gt_page.page_index, width_px=gt_page.width_px, height_px=gt_page.height_px)
    pred = pred_page if pred_page is not None else empty

    gt_text = page_text(gt_page, settings.exclude_decorative)
    if gt_text:
        metrics.text_edit = normalized_edit_distance(page_text(pred, settings.exclude_decorative), gt_text)

    pred_formulas, gt_formulas, match = _match_category(pred, gt_page, Category.DISPLAY_FORMULA, settings.iou_threshold)
    matched = {j: i for i, j, _ in match.pairs}
    for j, gt_element in enumerate(gt_formulas):
        if j in matched:
            scores.formula.append(formula_proxy(_content(pred_formulas[matched[j]]), _content(gt_element)))
        else:
            scores.formula.append(0.0)

    _score_tables(pred, gt_page, settings, scores)

    pred_seals, gt_seals, match = _match_category(pred, gt_page, Category.SEAL, settings.iou_threshold)
    matched = {j: i for i, j, _ in match.pairs}
    for j, gt_element in enumerate(gt_seals):
        pred_value = _content(pred_seals[matched[j]]) if j in matched else ""
        scores.seal.append(seal_ned(pred_value, _content(gt_element)))

    if gt_page.elements:
        metrics.reading_order_edit = reading_order_edit(pred, gt_page, settings.iou_threshold, settings.exclude_decorative)

    metrics.formula_proxy = _mean(scores.formula)
    metrics.table_teds = _mean(scores.teds)
    metrics.table_teds_s = _mean(scores.teds_s)
    metrics.seal_ned = _mean(scores.seal)
    return scores


def evaluate_spotting(
    gt_records: Sequence[SpottingRecord],
    pred_records: Sequence[SpottingRecord],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> Dict[str, float]:
    """
    Spotting accuracy per evaluation dimension

    Images are paired by name; each dimension averages its images, and the
    "mean" entry is the macro average across dimensions.
    """
    predictions = {record.image: record for record in pred_records}
    per_dimension: Dict[str, List[float]] = {}
    for gt in gt_records:
        pred = predictions.get(gt.image)
        pred_instances = pred.instances if pred is not None else []
        score = spotting_accuracy(pred_instances, gt.instances, iou_threshold).accuracy
        per_dimension.setdefault(gt.dimension or "all", []).append(score)

    result = {dimension: sum(v) / len(v) for dimension, v in sorted(per_dimension.items())}
    if result:
        result["mean"] = sum(result.values()) / len(result)
    return result


def evaluate_documents(
    gt_pages: Sequence[PageDocument],
    pred_pages: Sequence[PageDocument],
    settings: Optional[EvaluationSettings] = None,
    spotting: Optional[Dict[str, float]] = None,
) -> MetricReport:
    """
    Score predicted pages against ground truth

    Pages pair up by page_index; a missing prediction is scored as an empty
    page. Pages are evaluated independently (optionally on a thread pool) and
    aggregated in ascending page_index order so sums are reproducible.
    Formula, table and seal scores average over ground-truth elements; text
    and reading order average over pages.
    """
    settings = settings or EvaluationSettings()
    predictions = {page.page_index: page for page in pred_pages}
    ordered_gt = sorted(gt_pages, key=lambda p: p.page_index)

    def run(gt_page: PageDocument) -> _PageScores:
        return evaluate_page(predictions.get(gt_page.page_index), gt_page, settings)

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as executor:
            page_scores = list(executor.map(run, ordered_gt))
    else:
        page_scores = [run(page) for page in ordered_gt]

    text = [s.metrics.text_edit for s in page_scores if s.metrics.text_edit is not None]
    order = [s.metrics.reading_order_edit for s in page_scores if s.metrics.reading_order_edit is not None]
    formula = [v for s in page_scores for v in s.formula]
    teds = [v for s in page_scores for v in s.teds]
    teds_s = [v for s in page_scores for v in s.teds_s]
    seal = [v for s in page_scores for v in s.seal]

    report = MetricReport(
        text_edit=_mean(text),
        formula_proxy=_mean(formula),
        table_teds=_mean(teds),
        table_teds_s=_mean(teds_s),
        reading_order_edit=_mean(order),
        seal_ned=_mean(seal),
        table_approximate=any(s.approximate for s in page_scores),
        pages=[s.metrics for s in page_scores],
    )

    present = (report.text_edit is not None, report.formula_proxy is not None, report.table_teds is not None)
    if any(present):
        weights = settings.weights.restricted(*present)
        report.overall = overall(
            report.text_edit if report.text_edit is not None else 0.0,
            report.formula_proxy if report.formula_proxy is not None else 0.0,
            report.table_teds if report.table_teds is not None else 0.0,
            weights,
        )
        report.weights = {"text": weights.text, "formula": weights.formula, "table": weights.table}

    if spotting:
        report.spotting_accuracy = spotting.get("mean")
        report.spotting_by_dimension = {k: v for k, v in spotting.items() if k != "mean"}
    return report


TABLE_COLUMNS = [
    ("Overall", "overall"),
    ("Text^Edit", "text_edit"),
    ("Formula^Proxy(non-CDM)", "formula_proxy"),
    ("Table^TEDS", "table_teds"),
    ("Table^TEDS-S", "table_teds_s"),
    ("Reading Order^Edit", "reading_order_edit"),
    ("Spotting^Acc", "spotting_accuracy"),
    ("Seal^NED", "seal_ned"),
]


def render_table(report: MetricReport) -> str:
    """Aligned text table using the benchmark's column names"""
    def cell(name: str) -> str:
        value = getattr(report, name)
        if value is None:
            return "-"
        return f"{value:.2f}" if name == "overall" else f"{value:.4f}"

    headers = [title for title, _ in TABLE_COLUMNS]
    values = [cell(name) for _, name in TABLE_COLUMNS]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    header_line = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    value_line = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return f"{header_line}\n{value_line}\n"
