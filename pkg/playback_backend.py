from typing import Dict, List, Sequence

from backend import Backend, BackendError, BlockDescriptor, LayoutResult, RecognizedBlock
from core_model import LayoutElement, PageDescriptor, PageDocument
from reading_order import order_from_margin_matrix

STRIPPED_ORDER_MARGIN = 4.0


class PlaybackBackend(Backend):
    """Oracle backend that replays ground-truth layout and content"""

    name = "playback"

    def __init__(self, gt_pages: Sequence[PageDocument], strip_order: bool = False):
        self.pages: Dict[int, PageDocument] = {page.page_index: page for page in gt_pages}
        self.strip_order = strip_order

    def _page(self, page_index: int) -> PageDocument:
        page = self.pages.get(page_index)
        if page is None:
            raise BackendError(f"page {page_index} is missing from the ground truth")
        return page

    def prepare(self, page_id: int, descriptor: PageDescriptor) -> PageDocument:
        page = self._page(descriptor.page_index)
        return PageDocument(page_index=page.page_index, width_px=page.width_px, height_px=page.height_px)

    def analyze_layout(self, page_id: int, page: PageDocument) -> LayoutResult:
        gt = self._page(page.page_index)
        elements: List[LayoutElement] = [
            element.model_copy(update={"content": None}, deep=True) for element in gt.elements
        ]
        if not self.strip_order:
            return LayoutResult(elements)

        ranked = all(e.order is not None for e in elements)
        true_perm = sorted(range(len(elements)), key=lambda i: (elements[i].order or 0, elements[i].id))
        for element in elements:
            element.order = None
        if not ranked or not elements:
            return LayoutResult(elements)
        return LayoutResult(elements, order_from_margin_matrix(true_perm, STRIPPED_ORDER_MARGIN))

    def recognize(self, batch: List[BlockDescriptor]) -> List[RecognizedBlock]:
        results = []
        for block in batch:
            element = self._page(block.page_index).element_by_id(block.element_id)
            if element is None:
                raise BackendError(f"page {block.page_index} has no element {block.element_id}")
            content = element.content.model_copy() if element.content is not None else None
            results.append(RecognizedBlock(content, len(content.value) if content is not None else 0))
        return results


def create_playback_backend(gt_pages: Sequence[PageDocument], strip_order: bool = False) -> PlaybackBackend:
    """
    Factory function to create a playback backend instance

    Args:
        gt_pages: Ground-truth pages to replay
        strip_order: Drop order ranks and hand out relation matrices instead

    Returns:
        PlaybackBackend instance
    """
    return PlaybackBackend(gt_pages, strip_order)
