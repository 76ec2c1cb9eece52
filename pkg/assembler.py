import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from loguru import logger
from pydantic import BaseModel, Field

from core_model import (
    DECORATIVE_CATEGORIES,
    Category,
    ContentKind,
    LayoutElement,
    PageDocument,
    expected_content_kind,
)
from file_io import atomic_write_text
from table_tree import TableParseError, TableTree, column_count, normalize_cell_text, parse_table_html, to_html

MAX_HEADING_LEVEL = 6
NUMBERING_PREFIX_RE = re.compile(r"^(\d+(?:\.\d+)*)\.?(?=\s|$)")

PLACEHOLDER_CATEGORIES = frozenset({
    Category.IMAGE,
    Category.CHART,
    Category.HEADER_IMAGE,
    Category.FOOTER_IMAGE,
})


class StructuredBlock(BaseModel):
    category: Category
    kind: Optional[ContentKind] = None
    value: str = ""
    page_index: int
    element_id: int
    polygon: List[Tuple[float, float]] = Field(default_factory=list)
    heading_level: Optional[int] = None
    merged_from: Optional[List[Tuple[int, int]]] = None


class AssembledDocument(BaseModel):
    markdown: str
    blocks: List[StructuredBlock]

    def to_json(self) -> str:
        return json.dumps({"blocks": [b.model_dump(mode="json") for b in self.blocks]}, indent=2, ensure_ascii=False) + "\n"


class MergeDecision(BaseModel):
    tail: Tuple[int, int]
    head: Tuple[int, int]
    tail_columns: int
    head_columns: int
    header_duplicated: bool = False
    accepted: bool
    reason: str


@dataclass
class AssemblyOptions:
    merge_tables: bool = True
    include_decorative: bool = False


@dataclass
class AssemblyResult:
    document: AssembledDocument
    decisions: List[MergeDecision] = field(default_factory=list)


def heading_level(category: Category, text: str) -> Optional[int]:
    """
    Heading depth of a single block

    doc_title is level 1. paragraph_title is level 2 unless it opens with a
    dotted numbering prefix ("2.", "2.1", "2.1.3"), in which case it is one
    more than the number of segments, capped at 6.
    """
    if category == Category.DOC_TITLE:
        return 1
    if category != Category.PARAGRAPH_TITLE:
        return None
    match = NUMBERING_PREFIX_RE.match(text.strip())
    if match is None:
        return 2
    segments = match.group(1).count(".") + 1
    return min(1 + segments, MAX_HEADING_LEVEL)


def heading_levels(blocks: Sequence[Tuple[Category, str]]) -> List[Optional[int]]:
    """Level for each (category, text) block; None for non-headings"""
    return [heading_level(category, text) for category, text in blocks]


def _cells_text(row: TableTree) -> List[str]:
    return [normalize_cell_text(cell.text) for cell in row.cells()]


def _body_of(table: TableTree) -> TableTree:
    """Node that takes appended rows: the last tbody, else the table itself when it holds rows directly"""
    for child in reversed(table.children):
        if child.tag == "tbody":
            return child
    if any(child.tag == "tr" for child in table.children):
        return table
    body = TableTree("tbody")
    table.children.append(body)
    return body


def merge_tables(
    tail: TableTree,
    head: TableTree,
    tail_ref: Tuple[int, int] = (0, 0),
    head_ref: Tuple[int, int] = (1, 0),
) -> Tuple[MergeDecision, Optional[TableTree]]:
    """
    Join a table split across a page break

    Accepted iff both fragments have the same effective column count. When the
    head's first row repeats the tail's header row cell by cell it is dropped.

    Args:
        tail: Table ending page p
        head: Table opening page p + 1
        tail_ref: (page, element id) of the tail, for the decision record
        head_ref: (page, element id) of the head

    Returns:
        The decision and, when accepted, the merged tree: the tail with its
        thead kept and the head's rows appended to its body
    """
    if tail.tag != "table" or head.tag != "table":
        raise TableParseError("merge_tables expects trees rooted at <table>")
    tail_rows, head_rows = tail.rows(), head.rows()
    if not tail_rows or not head_rows:
        raise TableParseError("cannot merge a table fragment without rows")

    tail_columns, head_columns = column_count(tail), column_count(head)
    if tail_columns != head_columns:
        decision = MergeDecision(
            tail=tail_ref, head=head_ref, tail_columns=tail_columns, head_columns=head_columns,
            accepted=False, reason=f"column count mismatch {tail_columns}≠{head_columns}",
        )
        return decision, None

    duplicated = _cells_text(head_rows[0]) == _cells_text(tail_rows[0])
    kept_head = head_rows[1:] if duplicated else head_rows
    merged = tail.copy()
    merged_body = _body_of(merged)
    merged_body.children.extend(row.copy() for row in kept_head)
    reason = "column counts match, repeated header dropped" if duplicated else "column counts match"
    decision = MergeDecision(
        tail=tail_ref, head=head_ref, tail_columns=tail_columns, head_columns=head_columns,
        header_duplicated=duplicated, accepted=True, reason=reason,
    )
    return decision, merged


def _render(block: StructuredBlock) -> str:
    if block.category in PLACEHOLDER_CATEGORIES:
        points = ", ".join(f"({x:g}, {y:g})" for x, y in block.polygon)
        caption = f": {block.value}" if block.value else ""
        return f"[{block.category.value} p{block.page_index}#{block.element_id} polygon {points}]{caption}"
    if block.heading_level is not None:
        return "#" * block.heading_level + " " + block.value.strip()
    if block.kind == ContentKind.FORMULA_LATEX and block.category == Category.DISPLAY_FORMULA:
        return f"$$\n{block.value}\n$$"
    return block.value


def _block_for(page: PageDocument, element: LayoutElement) -> StructuredBlock:
    kind = element.content.kind if element.content is not None else None
    value = element.content.value if element.content is not None else ""
    expected = expected_content_kind(element.category)
    if kind is not None and kind != expected and element.category not in PLACEHOLDER_CATEGORIES:
        logger.warning(
            f"page {page.page_index} element {element.id}: {element.category.value} carries "
            f"{kind.value} content, emitted as plain text"
        )
        kind = ContentKind.PLAIN_TEXT
    return StructuredBlock(
        category=element.category,
        kind=kind,
        value=value,
        page_index=page.page_index,
        element_id=element.id,
        polygon=element.polygon.vertices(),
        heading_level=heading_level(element.category, value),
    )


def _is_content_block(block: StructuredBlock) -> bool:
    return block.category not in DECORATIVE_CATEGORIES


def _last_page(block: StructuredBlock) -> int:
    """Page the block ends on, following any merged continuation"""
    return block.merged_from[-1][0] if block.merged_from else block.page_index


def _try_merge(previous: StructuredBlock, block: StructuredBlock) -> Optional[MergeDecision]:
    """Merge block into previous in place when both are table fragments that fit"""
    if previous.category != Category.TABLE or block.category != Category.TABLE:
        return None
    if previous.kind != ContentKind.TABLE_HTML or block.kind != ContentKind.TABLE_HTML:
        return None
    tail_ref = (previous.merged_from or [(previous.page_index, previous.element_id)])[-1]
    head_ref = (block.page_index, block.element_id)
    try:
        decision, merged = merge_tables(parse_table_html(previous.value), parse_table_html(block.value), tail_ref, head_ref)
    except TableParseError as exc:
        logger.warning(f"table merge {tail_ref} + {head_ref} skipped: {exc}")
        return None
    if merged is not None:
        previous.value = to_html(merged)
        previous.merged_from = (previous.merged_from or [(previous.page_index, previous.element_id)]) + [head_ref]
    return decision


def assemble_document(pages: Sequence[PageDocument], options: Optional[AssemblyOptions] = None) -> AssemblyResult:
    """
    Build Markdown and structured blocks from recognized pages

    Elements are emitted by (page_index, order); tables become HTML blocks,
    display formulas $$ fences, images and charts placeholders naming their
    polygon. Decorative elements stay in the structured output only. A table
    ending one page and a table opening the next are merged when their
    column counts agree.
    """
    options = options or AssemblyOptions()
    blocks: List[StructuredBlock] = []
    decisions: List[MergeDecision] = []

    for page in sorted(pages, key=lambda p: p.page_index):
        page_blocks = [_block_for(page, element) for element in page.ordered_elements()]
        first_content = next((b for b in page_blocks if _is_content_block(b)), None)
        previous_content = next((b for b in reversed(blocks) if _is_content_block(b)), None)
        for block in page_blocks:
            if (
                options.merge_tables
                and block is first_content
                and previous_content is not None
                and _last_page(previous_content) == page.page_index - 1
            ):
                decision = _try_merge(previous_content, block)
                if decision is not None:
                    decisions.append(decision)
                    if decision.accepted:
                        continue
            blocks.append(block)

    rendered = [
        _render(b) for b in blocks
        if (options.include_decorative or _is_content_block(b)) and (b.value or b.category in PLACEHOLDER_CATEGORIES)
    ]
    markdown = "\n\n".join(rendered)
    return AssemblyResult(AssembledDocument(markdown=markdown, blocks=blocks), decisions)


def assemble(pages: Sequence[PageDocument], options: Optional[AssemblyOptions] = None) -> AssembledDocument:
    return assemble_document(pages, options).document


def write_merge_log(decisions: Sequence[MergeDecision], path: Union[str, Path]) -> None:
    """One JSON object per merge decision"""
    lines = [decision.model_dump_json() for decision in decisions]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
