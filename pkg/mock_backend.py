import time
from dataclasses import dataclass
from typing import List

import numpy as np
from loguru import logger

from backend import Backend, BlockDescriptor, LayoutResult, RecognizedBlock, Stage
from core_model import (
    VISUAL_CATEGORIES,
    Category,
    ContentPayload,
    LayoutElement,
    PageDescriptor,
    PageDocument,
    Polygon,
    expected_content_kind,
)
from reading_order import order_from_margin_matrix

STAGE_SEED = {Stage.PREPARE: 0, Stage.LAYOUT: 1, Stage.RECOGNITION: 2}
RELATION_MARGIN = 4.0


@dataclass(frozen=True)
class LatencyModel:
    """
    Per-call service times in milliseconds

    Recognition costs recognition_ms per batch plus per_item_ms per block.
    Each call adds a uniform jitter in [0, jitter_ms) drawn from a generator
    keyed by (seed, stage, first page id), so a call's cost does not depend on
    thread scheduling.
    """

    prep_ms: float = 0.0
    layout_ms: float = 0.0
    recognition_ms: float = 0.0
    per_item_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        values = (self.prep_ms, self.layout_ms, self.recognition_ms, self.per_item_ms, self.jitter_ms)
        if any(v < 0 for v in values):
            raise ValueError(f"latencies must be non-negative, got {values}")

    @classmethod
    def from_stage_latencies(cls, text: str, seed: int = 0) -> "LatencyModel":
        """Parse 'prep,layout,recognition' milliseconds"""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError:
            raise ValueError(f"stage latency must be three comma-separated numbers, got {text!r}") from None
        if len(parts) != 3:
            raise ValueError(f"stage latency must be three comma-separated numbers, got {text!r}")
        return cls(prep_ms=parts[0], layout_ms=parts[1], recognition_ms=parts[2], seed=seed)

    def service_ms(self, stage: Stage, page_id: int, items: int = 1) -> float:
        base = {
            Stage.PREPARE: self.prep_ms,
            Stage.LAYOUT: self.layout_ms,
            Stage.RECOGNITION: self.recognition_ms + self.per_item_ms * items,
        }[stage]
        if self.jitter_ms > 0:
            rng = np.random.default_rng([self.seed, STAGE_SEED[stage], page_id])
            base += float(rng.uniform(0.0, self.jitter_ms))
        return base


class MockBackend(Backend):
    """Synthetic layout and recognition with modelled latencies"""

    name = "mock"

    def __init__(self, latency: LatencyModel, blocks_per_page: int = 4, tokens_per_block: int = 32, realtime: bool = False):
        """
        Initialize the mock backend

        Args:
            latency: Service-time model
            blocks_per_page: Text blocks emitted for every page
            tokens_per_block: Token count reported for every recognized block
            realtime: Sleep for the modelled time on each call (wall-clock runs)
        """
        if blocks_per_page < 0 or tokens_per_block < 0:
            raise ValueError("blocks_per_page and tokens_per_block must be non-negative")
        self.latency = latency
        self.blocks_per_page = blocks_per_page
        self.tokens_per_block = tokens_per_block
        self.realtime = realtime

    def _wait(self, stage: Stage, page_id: int, items: int = 1):
        if self.realtime:
            time.sleep(self.service_ms(stage, page_id, items) / 1000.0)

    def service_ms(self, stage: Stage, page_id: int, items: int = 1) -> float:
        return self.latency.service_ms(stage, page_id, items)

    def prepare(self, page_id: int, descriptor: PageDescriptor) -> PageDocument:
        self._wait(Stage.PREPARE, page_id)
        return PageDocument(page_index=descriptor.page_index, width_px=descriptor.width_px, height_px=descriptor.height_px)

    def analyze_layout(self, page_id: int, page: PageDocument) -> LayoutResult:
        self._wait(Stage.LAYOUT, page_id)
        n = self.blocks_per_page
        band = page.height_px / max(n, 1)
        elements: List[LayoutElement] = []
        for index in range(n):
            # Title first, then body text stacked top to bottom
            category = Category.DOC_TITLE if index == 0 and page.page_index == 0 else Category.TEXT
            top = index * band
            elements.append(LayoutElement(
                id=index,
                category=category,
                polygon=Polygon([(0.0, top), (float(page.width_px), top + band)]),
                confidence=0.9,
            ))
        # Emit elements bottom-up so the relation matrix does real work
        elements.reverse()
        relations = order_from_margin_matrix(list(range(n))[::-1], RELATION_MARGIN) if n else None
        return LayoutResult(elements, relations)

    def recognize(self, batch: List[BlockDescriptor]) -> List[RecognizedBlock]:
        if batch:
            self._wait(Stage.RECOGNITION, batch[0].page_id, len(batch))
        results = []
        for block in batch:
            if block.category in VISUAL_CATEGORIES:
                results.append(RecognizedBlock(None, 0))
                continue
            text = f"Synthetic block {block.element_id} of page {block.page_index}."
            content = ContentPayload(kind=expected_content_kind(block.category), value=text)
            results.append(RecognizedBlock(content, self.tokens_per_block))
        logger.debug(f"mock recognized batch of {len(batch)}")
        return results


def create_mock_backend(latency: LatencyModel = LatencyModel(), blocks_per_page: int = 4,
                        tokens_per_block: int = 32, realtime: bool = False) -> MockBackend:
    """
    Factory function to create a mock backend instance

    Args:
        latency: Service-time model with its jitter seed
        blocks_per_page: Text blocks per synthetic page
        tokens_per_block: Fixed token count per recognized block
        realtime: Sleep for modelled latencies

    Returns:
        MockBackend instance
    """
    return MockBackend(latency, blocks_per_page, tokens_per_block, realtime)
