import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from loguru import logger
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    RootModel,
    ValidationError,
    field_validator,
    model_validator,
)

from file_io import atomic_write_text


class DocumentError(ValueError):
    """Raised when a ground-truth / prediction file violates the schema"""


class UnknownCategoryError(DocumentError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"unknown category label: {label!r}")


class GeometryError(DocumentError):
    """Raised for polygons that cannot describe a region"""


class Category(str, Enum):
    PARAGRAPH_TITLE = "paragraph_title"
    IMAGE = "image"
    TEXT = "text"
    NUMBER = "number"
    ABSTRACT = "abstract"
    CONTENT = "content"
    FIGURE_TITLE = "figure_title"
    DISPLAY_FORMULA = "display_formula"
    TABLE = "table"
    REFERENCE = "reference"
    DOC_TITLE = "doc_title"
    FOOTNOTE = "footnote"
    HEADER = "header"
    ALGORITHM = "algorithm"
    FOOTER = "footer"
    SEAL = "seal"
    CHART = "chart"
    FORMULA_NUMBER = "formula_number"
    ASIDE_TEXT = "aside_text"
    REFERENCE_CONTENT = "reference_content"
    HEADER_IMAGE = "header_image"
    FOOTER_IMAGE = "footer_image"
    INLINE_FORMULA = "inline_formula"
    VERTICAL_TEXT = "vertical_text"
    VISION_FOOTNOTE = "vision_footnote"

    @classmethod
    def parse(cls, label: str) -> "Category":
        """Map a schema label to its variant; unknown labels are an error, never a default"""
        try:
            return cls(label)
        except ValueError:
            raise UnknownCategoryError(label) from None


# Page furniture: kept in structured output, left out of Markdown
DECORATIVE_CATEGORIES = frozenset({
    Category.HEADER,
    Category.FOOTER,
    Category.HEADER_IMAGE,
    Category.FOOTER_IMAGE,
})

# Regions with no text for the recognition stage to read
VISUAL_CATEGORIES = frozenset({
    Category.IMAGE,
    Category.HEADER_IMAGE,
    Category.FOOTER_IMAGE,
})


class ContentKind(str, Enum):
    PLAIN_TEXT = "plain_text"
    TABLE_HTML = "table_html"
    FORMULA_LATEX = "formula_latex"
    CHART_TABLE = "chart_table"
    SEAL_TEXT = "seal_text"


EXPECTED_CONTENT_KIND = {
    Category.TABLE: ContentKind.TABLE_HTML,
    Category.DISPLAY_FORMULA: ContentKind.FORMULA_LATEX,
    Category.INLINE_FORMULA: ContentKind.FORMULA_LATEX,
    Category.CHART: ContentKind.CHART_TABLE,
    Category.SEAL: ContentKind.SEAL_TEXT,
}


def expected_content_kind(category: Category) -> ContentKind:
    return EXPECTED_CONTENT_KIND.get(category, ContentKind.PLAIN_TEXT)


class _SchemaModel(BaseModel):
    """Base for file-schema models: unknown fields are dropped with a warning"""

    model_config = ConfigDict(extra="ignore")

    @model_validator(mode="before")
    @classmethod
    def _warn_unknown_fields(cls, data: Any) -> Any:
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(cls.model_fields))
            if unknown:
                logger.warning(f"{cls.__name__}: ignoring unknown fields {unknown}")
        return data


class Polygon(RootModel[List[Tuple[float, float]]]):
    """
    Region outline in pixel coordinates.

    Two points are an axis-aligned box shorthand (TL, BR); four points are a
    quad in TL, TR, BR, BL order; any other length >= 3 is a multi-point region.
    """

    @model_validator(mode="after")
    def _check_geometry(self) -> "Polygon":
        points = self.root
        if len(points) < 2:
            raise GeometryError(f"polygon needs at least 2 points, got {len(points)}")
        for x, y in points:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise GeometryError(f"non-finite coordinate ({x}, {y})")
        if len(points) == 2:
            (x_tl, y_tl), (x_br, y_br) = points
            if x_tl > x_br:
                raise GeometryError(f"2-point box has x_TL > x_BR ({x_tl} > {x_br})")
            if y_tl > y_br:
                raise GeometryError(f"2-point box has y_TL > y_BR ({y_tl} > {y_br})")
        return self

    @property
    def points(self) -> List[Tuple[float, float]]:
        return self.root

    @property
    def is_box(self) -> bool:
        return len(self.root) == 2

    def vertices(self) -> List[Tuple[float, float]]:
        """Outline as a vertex ring; a box shorthand expands to its four corners"""
        if self.is_box:
            (x0, y0), (x1, y1) = self.root
            return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        return list(self.root)

    def bounds(self) -> Tuple[float, float, float, float]:
        xs = [x for x, _ in self.root]
        ys = [y for _, y in self.root]
        return min(xs), min(ys), max(xs), max(ys)


class ContentPayload(_SchemaModel):
    kind: ContentKind
    value: str


class LayoutElement(_SchemaModel):
    id: int = Field(ge=0)
    category: Category
    polygon: Polygon
    confidence: float = Field(ge=0.0, le=1.0)
    order: Optional[int] = Field(default=None, ge=0)
    content: Optional[ContentPayload] = None

    @field_validator("category", mode="before")
    @classmethod
    def _parse_category(cls, value: Any) -> Category:
        if isinstance(value, Category):
            return value
        if not isinstance(value, str):
            raise DocumentError(f"category must be a string, got {type(value).__name__}")
        return Category.parse(value)


class PageDocument(_SchemaModel):
    page_index: int = Field(ge=0)
    width_px: PositiveInt
    height_px: PositiveInt
    elements: List[LayoutElement] = Field(default_factory=list)

    def ordered_elements(self) -> List[LayoutElement]:
        """Elements in reading order; unranked elements trail, by id"""
        return sorted(
            self.elements,
            key=lambda e: (e.order is None, e.order if e.order is not None else 0, e.id),
        )

    def element_by_id(self, element_id: int) -> Optional[LayoutElement]:
        for element in self.elements:
            if element.id == element_id:
                return element
        return None


class DocumentFile(_SchemaModel):
    pages: List[PageDocument]


class PageDescriptor(BaseModel):
    """What the input-preparation stage consumes: a pre-rendered page reference"""

    page_index: int = Field(ge=0)
    width_px: PositiveInt
    height_px: PositiveInt
    source: str = ""


def descriptors_for(pages: Iterable[PageDocument], source: str = "") -> List[PageDescriptor]:
    return [
        PageDescriptor(page_index=p.page_index, width_px=p.width_px, height_px=p.height_px, source=source)
        for p in pages
    ]


def _raise_domain_error(exc: ValidationError, source: str) -> None:
    for error in exc.errors():
        cause = (error.get("ctx") or {}).get("error")
        if isinstance(cause, DocumentError):
            raise cause from exc
    raise DocumentError(f"{source}: schema violation: {exc}") from exc


def parse_document(data: Any, source: str = "<memory>") -> List[PageDocument]:
    """
    Validate an already-decoded document object

    Args:
        data: Decoded JSON object with a top-level "pages" list
        source: Name used in error messages

    Returns:
        List of PageDocument with page invariants enforced (clamping logged)

    Raises:
        DocumentError: On schema violations, unknown categories or bad geometry
    """
    if not isinstance(data, dict) or "pages" not in data:
        raise DocumentError(f"{source}: top-level object with a 'pages' list is required")
    try:
        document = DocumentFile.model_validate(data)
    except ValidationError as exc:
        _raise_domain_error(exc, source)
    for page in document.pages:
        for warning in validate_page(page):
            logger.warning(f"{source} page {page.page_index}: {warning}")
    return document.pages


def load_document(path: Union[str, Path]) -> List[PageDocument]:
    """
    Load a ground-truth or prediction file

    Args:
        path: UTF-8 JSON file in the pages schema

    Returns:
        List of PageDocument, ordering fields preserved verbatim
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}: invalid JSON: {exc}") from exc
    return parse_document(data, source=str(path))


def dump_document(pages: Iterable[PageDocument]) -> str:
    """Canonical JSON form: schema field order, two-space indent, trailing newline"""
    payload = {"pages": [page.model_dump(mode="json") for page in pages]}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def save_document(pages: Iterable[PageDocument], path: Union[str, Path]) -> None:
    atomic_write_text(path, dump_document(pages))


def validate_page(page: PageDocument) -> List[str]:
    """
    Check page invariants, clamping out-of-bounds vertices in place

    Clamping is the only mutation; everything else is reported.

    Returns:
        Warning messages, empty iff the page was already valid
    """
    warnings: List[str] = []

    seen: Dict[int, int] = {}
    for element in page.elements:
        seen[element.id] = seen.get(element.id, 0) + 1
    for element_id, count in seen.items():
        if count > 1:
            warnings.append(f"duplicate element id {element_id} ({count} occurrences)")

    for element in page.elements:
        clamped: List[Tuple[float, float]] = []
        changed = False
        for x, y in element.polygon.points:
            cx = min(max(x, 0.0), float(page.width_px))
            cy = min(max(y, 0.0), float(page.height_px))
            if (cx, cy) != (x, y):
                warnings.append(
                    f"element {element.id} vertex ({x}, {y}) outside "
                    f"{page.width_px}x{page.height_px}, clamped to ({cx}, {cy})"
                )
                changed = True
            clamped.append((cx, cy))
        if changed:
            element.polygon = Polygon(clamped)

    orders = [e.order for e in page.elements]
    ranked = [o for o in orders if o is not None]
    if ranked and len(ranked) != len(orders):
        warnings.append(f"{len(orders) - len(ranked)} of {len(orders)} elements have no order rank")
    elif ranked and sorted(ranked) != list(range(len(ranked))):
        warnings.append(f"order ranks are not a permutation of 0..{len(ranked) - 1}")

    return warnings
