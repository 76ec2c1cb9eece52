import html as html_escape
from collections import defaultdict
from typing import Dict, List, Optional, Set

from lxml import etree, html

TABLE_LABELS = frozenset({"table", "thead", "tbody", "tr", "td", "th"})
CELL_LABELS = frozenset({"td", "th"})
# Browsers clamp colspan at 1000; larger spans are treated as malformed
MAX_SPAN = 1000


class TableParseError(ValueError):
    """Raised when table HTML does not describe a well-formed table tree"""


def normalize_cell_text(text: str) -> str:
    return " ".join(text.split())


class TableTree:
    """
    Ordered labeled tree of a table.

    Only table/thead/tbody/tr/td/th become nodes; td/th carry spans and
    whitespace-normalized cell text. The node interface (.children) is the
    one the tree edit distance expects.
    """

    def __init__(self, tag: str, colspan: int = 1, rowspan: int = 1, text: str = "", children: Optional[List["TableTree"]] = None):
        self.tag = tag
        self.colspan = colspan
        self.rowspan = rowspan
        self.text = text
        self.children: List[TableTree] = list(children or [])

    @property
    def is_cell(self) -> bool:
        return self.tag in CELL_LABELS

    def node_count(self) -> int:
        return 1 + sum(child.node_count() for child in self.children)

    def rows(self) -> List["TableTree"]:
        """tr nodes in document order"""
        if self.tag == "tr":
            return [self]
        found: List[TableTree] = []
        for child in self.children:
            found.extend(child.rows())
        return found

    def cells(self) -> List["TableTree"]:
        return [child for child in self.children if child.is_cell]

    def copy(self) -> "TableTree":
        return TableTree(self.tag, self.colspan, self.rowspan, self.text, [c.copy() for c in self.children])

    def bracket(self) -> str:
        """Bracket notation, handy in assertion messages"""
        label = self.tag
        if self.is_cell:
            label += f"[{self.colspan}x{self.rowspan}]{self.text!r}"
        return "{" + label + "".join(child.bracket() for child in self.children) + "}"

    def __eq__(self, other) -> bool:
        if not isinstance(other, TableTree):
            return NotImplemented
        return (
            self.tag == other.tag
            and self.colspan == other.colspan
            and self.rowspan == other.rowspan
            and self.text == other.text
            and self.children == other.children
        )

    def __repr__(self) -> str:
        return f"TableTree({self.bracket()})"


def _span(element, name: str) -> int:
    raw = element.get(name, "1")
    try:
        value = int(str(raw).strip())
    except ValueError:
        raise TableParseError(f"{name}={raw!r} is not an integer") from None
    if value < 1:
        raise TableParseError(f"{name}={value} must be positive")
    if value > MAX_SPAN:
        raise TableParseError(f"{name}={value} exceeds {MAX_SPAN}")
    return value


def _convert(element) -> TableTree:
    tag = element.tag.lower()
    if tag in CELL_LABELS:
        return TableTree(
            tag,
            colspan=_span(element, "colspan"),
            rowspan=_span(element, "rowspan"),
            text=normalize_cell_text(element.text_content()),
        )
    children = [
        _convert(child)
        for child in element
        if isinstance(child.tag, str) and child.tag.lower() in TABLE_LABELS
    ]
    return TableTree(tag, children=children)


def parse_table_html(markup: str) -> TableTree:
    """
    Parse table HTML into a TableTree rooted at <table>

    Raises:
        TableParseError: When the markup is empty, unparsable or has no table
    """
    if not markup or not markup.strip():
        raise TableParseError("empty table markup")
    try:
        root = html.fromstring(markup)
    except (etree.ParserError, ValueError) as exc:
        raise TableParseError(f"unparsable table markup: {exc}") from exc
    table = root if root.tag == "table" else root.find(".//table")
    if table is None:
        raise TableParseError("no <table> element in markup")
    return _convert(table)


def to_html(tree: TableTree) -> str:
    if tree.is_cell:
        attrs = ""
        if tree.colspan > 1:
            attrs += f' colspan="{tree.colspan}"'
        if tree.rowspan > 1:
            attrs += f' rowspan="{tree.rowspan}"'
        return f"<{tree.tag}{attrs}>{html_escape.escape(tree.text, quote=False)}</{tree.tag}>"
    inner = "".join(to_html(child) for child in tree.children)
    return f"<{tree.tag}>{inner}</{tree.tag}>"


def column_count(tree: TableTree) -> int:
    """Effective column count after expanding colspan and rowspan occupancy"""
    rows = tree.rows()
    occupied: Dict[int, Set[int]] = defaultdict(set)
    widest = 0
    for r, row in enumerate(rows):
        col = 0
        for cell in row.cells():
            while col in occupied[r]:
                col += 1
            # Spans past the last row occupy nothing
            for dr in range(min(cell.rowspan, len(rows) - r)):
                for dc in range(cell.colspan):
                    occupied[r + dr].add(col + dc)
            col += cell.colspan
        if occupied[r]:
            widest = max(widest, max(occupied[r]) + 1)
    return widest
