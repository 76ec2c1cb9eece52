import math
import re
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import Levenshtein
from apted import APTED, Config
from loguru import logger
from shapely.geometry import Polygon as ShapelyPolygon

from core_model import DECORATIVE_CATEGORIES, Category, GeometryError, PageDocument, Polygon
from table_tree import TableTree, parse_table_html

DEFAULT_IOU_THRESHOLD = 0.5
APPROXIMATE_TEDS_NODE_LIMIT = 5000

# Left out of reading-order scoring unless asked for
READING_ORDER_EXCLUDED = DECORATIVE_CATEGORIES | {Category.VISION_FOOTNOTE}

FORMULA_METRIC_LABEL = "formula_proxy (non-CDM)"

_LATEX_TOKEN_RE = re.compile(r"\\[A-Za-z]+|\\.|[{}]|\S")


class MetricError(ValueError):
    """Raised for metric inputs that have no defined score"""


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance over Unicode scalar values (or any hashable symbols)"""
    return Levenshtein.distance(a, b)


def normalized_edit_distance(a: Sequence, b: Sequence) -> float:
    """Edit distance divided by the longer length; two empty inputs score 0"""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return edit_distance(a, b) / longest


def seal_ned(pred: str, gt: str) -> float:
    """Seal recognition NED, lower is better"""
    return normalized_edit_distance(pred, gt)


def tokenize_latex(source: str) -> List[str]:
    """Commands, escaped symbols, braces and single non-space atoms"""
    return _LATEX_TOKEN_RE.findall(source)


def formula_proxy(pred: str, gt: str) -> float:
    """
    Token-level edit similarity of LaTeX sources

    This is a proxy, not CDM: nothing is rendered, so visually equivalent
    sources written differently are penalized.
    """
    return 1.0 - normalized_edit_distance(tokenize_latex(pred), tokenize_latex(gt))


class _TableEditConfig(Config):
    def __init__(self, structure_only: bool):
        self.structure_only = structure_only

    def rename(self, node1: TableTree, node2: TableTree) -> float:
        if node1.tag != node2.tag or node1.colspan != node2.colspan or node1.rowspan != node2.rowspan:
            return 1.0
        if node1.is_cell and not self.structure_only:
            return normalized_edit_distance(node1.text, node2.text)
        return 0.0

    def children(self, node: TableTree) -> List[TableTree]:
        return node.children


class TedsScore(NamedTuple):
    value: float
    approximate: bool


def _row_signatures(tree: TableTree, structure_only: bool) -> List[str]:
    signatures = []
    for row in tree.rows():
        cells = tuple(
            (c.tag, c.colspan, c.rowspan, "" if structure_only else c.text) for c in row.cells()
        )
        signatures.append(repr(cells))
    return signatures


def table_similarity(
    pred: Union[TableTree, str],
    gt: Union[TableTree, str],
    structure_only: bool = False,
    node_limit: int = APPROXIMATE_TEDS_NODE_LIMIT,
) -> TedsScore:
    """
    TEDS between two tables, with an approximate fallback for huge trees

    Above node_limit nodes the exact tree edit distance is replaced by an edit
    distance over per-row structure hashes and the score is flagged approximate.
    """
    if isinstance(pred, str):
        pred = parse_table_html(pred)
    if isinstance(gt, str):
        gt = parse_table_html(gt)
    if pred.tag != "table" or gt.tag != "table":
        raise MetricError("table trees must be rooted at <table>")

    n_pred, n_gt = pred.node_count(), gt.node_count()
    n_max = max(n_pred, n_gt)
    if n_max > node_limit:
        logger.warning(f"table with {n_max} nodes exceeds {node_limit}; using approximate row-hash TEDS")
        rows_pred = _row_signatures(pred, structure_only)
        rows_gt = _row_signatures(gt, structure_only)
        return TedsScore(1.0 - normalized_edit_distance(rows_pred, rows_gt), True)

    distance = APTED(pred, gt, _TableEditConfig(structure_only)).compute_edit_distance()
    return TedsScore(1.0 - distance / n_max, False)


def teds(pred: Union[TableTree, str], gt: Union[TableTree, str], structure_only: bool = False) -> float:
    """
    Tree-edit-distance similarity 1 - TED / max(|pred|, |gt|)

    Unit insert/delete; renaming costs 1 across labels or spans, and the cell
    text NED between matching cells unless structure_only.
    """
    return table_similarity(pred, gt, structure_only).value


def _to_shapely(polygon) -> ShapelyPolygon:
    if isinstance(polygon, Polygon):
        points = polygon.vertices()
    elif hasattr(polygon, "points") and not isinstance(polygon, (list, tuple)):
        points = list(polygon.points)
    else:
        points = [tuple(p) for p in polygon]
        if len(points) == 2:
            points = Polygon(points).vertices()
    if len(points) < 3:
        raise GeometryError(f"need at least 3 vertices, got {len(points)}")

    shape = ShapelyPolygon(points)
    if shape.area == 0:
        return shape
    if not shape.is_valid:
        raise GeometryError(f"self-intersecting polygon {points}")
    hull = shape.convex_hull
    if not math.isclose(shape.area, hull.area, rel_tol=1e-9):
        logger.warning(f"non-convex polygon with {len(points)} vertices evaluated on its convex hull")
        return hull
    return shape


def polygon_iou(a, b) -> float:
    """
    Intersection over union of two simple polygons

    Accepts core_model Polygons (2-point boxes included), spotting Quads or
    raw vertex lists. Non-convex regions are replaced by their convex hulls.

    Raises:
        GeometryError: For self-intersecting input
        MetricError: When both shapes have zero area
    """
    shape_a = _to_shapely(a)
    shape_b = _to_shapely(b)
    if shape_a.area == 0 and shape_b.area == 0:
        raise MetricError("degenerate zero-area union")
    if shape_a.area == 0 or shape_b.area == 0:
        return 0.0
    intersection = shape_a.intersection(shape_b).area
    union = shape_a.area + shape_b.area - intersection
    if union <= 0:
        raise MetricError("degenerate zero-area union")
    return min(max(intersection / union, 0.0), 1.0)


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_pred: List[int] = field(default_factory=list)
    unmatched_gt: List[int] = field(default_factory=list)


def greedy_match(
    pred: Sequence,
    gt: Sequence,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    tie_break: Optional[Callable[[int, int], float]] = None,
) -> MatchResult:
    """
    One-to-one matching by descending IoU, pairs below the threshold dropped

    Args:
        pred: Predicted geometries
        gt: Ground-truth geometries
        iou_threshold: Minimum IoU for a pair
        tie_break: Optional secondary score (higher wins) for equal IoUs
    """
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            try:
                iou = polygon_iou(p, g)
            except (GeometryError, MetricError) as exc:
                logger.warning(f"skipping pair pred {i} / gt {j}: {exc}")
                continue
            if iou >= iou_threshold and iou > 0:
                secondary = tie_break(i, j) if tie_break else 0.0
                candidates.append((-iou, -secondary, i, j, iou))
    candidates.sort()

    result = MatchResult()
    used_pred, used_gt = set(), set()
    for _, _, i, j, iou in candidates:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        result.pairs.append((i, j, iou))
    result.unmatched_pred = [i for i in range(len(pred)) if i not in used_pred]
    result.unmatched_gt = [j for j in range(len(gt)) if j not in used_gt]
    return result


def reading_order_edit(
    pred_page: PageDocument,
    gt_page: PageDocument,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    exclude_decorative: bool = True,
) -> float:
    """
    Normalized edit distance between GT and predicted block sequences

    Predictions are matched to GT blocks by polygon IoU; each GT block is a
    symbol, the prediction sequence lists the symbols of matched blocks in
    predicted order, and unmatched GT blocks have no counterpart.
    """
    def scored(page: PageDocument):
        return [
            e for e in page.ordered_elements()
            if not (exclude_decorative and e.category in READING_ORDER_EXCLUDED)
        ]

    gt_elements = scored(gt_page)
    pred_elements = scored(pred_page)
    match = greedy_match(
        [e.polygon for e in pred_elements],
        [e.polygon for e in gt_elements],
        iou_threshold,
    )
    gt_symbol_for_pred = {i: j for i, j, _ in match.pairs}
    gt_sequence = list(range(len(gt_elements)))
    pred_sequence = [gt_symbol_for_pred[i] for i in range(len(pred_elements)) if i in gt_symbol_for_pred]
    return normalized_edit_distance(pred_sequence, gt_sequence)


class SpottingScore(NamedTuple):
    accuracy: float
    match: MatchResult


def spotting_accuracy(pred: Sequence, gt: Sequence, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> SpottingScore:
    """
    Localization-gated recognition accuracy

    Each IoU-matched pair scores 1 - NED of its texts, everything unmatched
    scores 0, and the sum is divided by max(|pred|, |gt|). Two empty lists
    score 1.
    """
    if not pred and not gt:
        return SpottingScore(1.0, MatchResult())

    def text_similarity(i: int, j: int) -> float:
        return 1.0 - normalized_edit_distance(pred[i].text, gt[j].text)

    match = greedy_match([p.quad for p in pred], [g.quad for g in gt], iou_threshold, tie_break=text_similarity)
    total = sum(text_similarity(i, j) for i, j, _ in match.pairs)
    return SpottingScore(total / max(len(pred), len(gt)), match)


class CrossFilterResult(NamedTuple):
    kept: List
    rejected: List[int]
    match: MatchResult


def cross_filter(
    a: Sequence,
    b: Sequence,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    max_text_ned: float = 0.0,
) -> CrossFilterResult:
    """
    Keep the pseudo-labels two annotators agree on

    An instance of a survives when greedy IoU matching pairs it with an
    instance of b and their texts are within max_text_ned of each other.

    Args:
        a: Text instances from the first annotator; survivors are taken from here
        b: Text instances from the second annotator
        iou_threshold: Minimum IoU for two instances to be the same region
        max_text_ned: Largest normalized edit distance still counted as agreement

    Returns:
        Kept instances of a in input order, indices of the rejected ones and the match
    """
    if not 0.0 <= max_text_ned <= 1.0:
        raise MetricError(f"max_text_ned must be in [0, 1], got {max_text_ned}")

    def text_similarity(i: int, j: int) -> float:
        return 1.0 - normalized_edit_distance(a[i].text, b[j].text)

    match = greedy_match([x.quad for x in a], [y.quad for y in b], iou_threshold, tie_break=text_similarity)
    agreed = {i for i, j, _ in match.pairs if 1.0 - text_similarity(i, j) <= max_text_ned}
    rejected = [i for i in range(len(a)) if i not in agreed]
    if rejected:
        logger.debug(f"cross filter dropped {len(rejected)} of {len(a)} instances")
    return CrossFilterResult([a[i] for i in sorted(agreed)], rejected, match)


@dataclass(frozen=True)
class OverallWeights:
    text: float = 1.0 / 3.0
    formula: float = 1.0 / 3.0
    table: float = 1.0 / 3.0

    def __post_init__(self):
        values = (self.text, self.formula, self.table)
        if any(w < 0 for w in values):
            raise MetricError(f"weights must be non-negative, got {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise MetricError(f"weights must sum to 1, got {sum(values)!r}")

    @classmethod
    def parse(cls, text: str) -> "OverallWeights":
        """Parse 'w_text,w_formula,w_table'"""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError:
            raise MetricError(f"weights must be three comma-separated numbers, got {text!r}") from None
        if len(parts) != 3:
            raise MetricError(f"weights must be three comma-separated numbers, got {text!r}")
        return cls(*parts)

    def restricted(self, text: bool, formula: bool, table: bool) -> "OverallWeights":
        """Renormalize over the components that are present"""
        kept = (self.text if text else 0.0, self.formula if formula else 0.0, self.table if table else 0.0)
        total = sum(kept)
        if total == 0:
            raise MetricError("no weighted component is present")
        return OverallWeights(*(w / total for w in kept))


def overall(text_edit: float, formula_score: float, table_teds: float, weights: OverallWeights = OverallWeights()) -> float:
    """100 x [w_text (1 - text_edit) + w_formula formula + w_table table]"""
    score = weights.text * (1.0 - text_edit) + weights.formula * formula_score + weights.table * table_teds
    return 100.0 * score
