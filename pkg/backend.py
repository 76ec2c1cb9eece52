from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

from core_model import Category, ContentPayload, LayoutElement, PageDescriptor, PageDocument, Polygon
from reading_order import RelationMatrix


class BackendError(RuntimeError):
    """Raised by a backend that cannot serve a request"""


class Stage(str, Enum):
    PREPARE = "prepare"
    LAYOUT = "layout"
    RECOGNITION = "recognition"


@dataclass(frozen=True)
class BlockDescriptor:
    """What the recognition stage is handed for one region: no pixels, just provenance"""

    page_id: int
    page_index: int
    element_id: int
    category: Category
    polygon: Polygon


@dataclass(frozen=True)
class LayoutResult:
    elements: List[LayoutElement]
    relations: Optional[RelationMatrix] = None


@dataclass(frozen=True)
class RecognizedBlock:
    # None for regions with nothing to read
    content: Optional[ContentPayload]
    tokens: int


class Backend(ABC):
    """Abstract base class for layout and recognition backends"""

    name = "backend"

    @abstractmethod
    def prepare(self, page_id: int, descriptor: PageDescriptor) -> PageDocument:
        """
        Turn a page reference into an empty page shell

        Args:
            page_id: Run-local sequence number
            descriptor: Page reference from the input stream

        Returns:
            PageDocument with geometry and no elements
        """
        pass

    @abstractmethod
    def analyze_layout(self, page_id: int, page: PageDocument) -> LayoutResult:
        """
        Detect layout elements on a prepared page

        Args:
            page_id: Run-local sequence number
            page: Page shell from prepare

        Returns:
            LayoutResult with elements and, optionally, a relation matrix
            aligned with the element list
        """
        pass

    @abstractmethod
    def recognize(self, batch: List[BlockDescriptor]) -> List[RecognizedBlock]:
        """
        Recognize a batch of regions, possibly from several pages

        Args:
            batch: Region descriptors in launch order

        Returns:
            One RecognizedBlock per descriptor, positionally aligned
        """
        pass

    def service_ms(self, stage: Stage, page_id: int, items: int = 1) -> float:
        """Modelled service time of one call; used by the simulated clock"""
        return 0.0
