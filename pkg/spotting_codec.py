import json
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

from loguru import logger

GRID_MAX = 1000
LOC_TOKENS_PER_INSTANCE = 8
LOC_TOKEN_RE = re.compile(r"<LOC_([0-9]+)>")
LOC_INDEX_DIGITS = len(str(GRID_MAX))

SpottingSequence = str


class SpottingError(ValueError):
    """Raised for values the LOC-token format cannot represent"""


class CoordSpace(str, Enum):
    GRID = "grid"
    NORMALIZED = "normalized"
    PIXEL = "pixel"


def loc_token(index: int) -> str:
    return f"<LOC_{index}>"


def quantize(coord: float) -> int:
    """
    Map a normalized coordinate onto the 0..1000 LOC grid

    round(coord * 1000) with ties away from zero, evaluated in decimal so
    0.2535 lands on 254 rather than on the binary float just below it.
    Values outside [0, 1] are clamped with a warning.
    """
    if not math.isfinite(coord):
        raise SpottingError(f"cannot quantize non-finite coordinate {coord}")
    if coord < 0.0 or coord > 1.0:
        logger.warning(f"normalized coordinate {coord} outside [0, 1], clamped")
        coord = min(max(coord, 0.0), 1.0)
    scaled = Decimal(repr(float(coord))) * GRID_MAX
    return int(scaled.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def dequantize(index: int, extent_px: int) -> float:
    """Pixel coordinate of a grid index along an axis of extent_px pixels"""
    if not (0 <= index <= GRID_MAX):
        raise SpottingError(f"grid index {index} outside 0..{GRID_MAX}")
    if extent_px <= 0:
        raise SpottingError(f"extent must be positive, got {extent_px}")
    return index * extent_px / GRID_MAX


@dataclass(frozen=True)
class Quad:
    """Four vertices in fixed TL, TR, BR, BL order"""

    points: Tuple[Tuple[float, float], ...]
    space: CoordSpace = CoordSpace.GRID

    def __post_init__(self):
        points = tuple((float(x), float(y)) if self.space != CoordSpace.GRID else (x, y) for x, y in self.points)
        if len(points) != 4:
            raise SpottingError(f"a quad has exactly 4 vertices, got {len(points)}")
        if self.space == CoordSpace.GRID:
            for x, y in points:
                for value in (x, y):
                    if isinstance(value, bool) or not isinstance(value, int) or not (0 <= value <= GRID_MAX):
                        raise SpottingError(f"grid coordinates must be integers in 0..{GRID_MAX}, got {value!r}")
        object.__setattr__(self, "points", points)

    def to_grid(self, width_px: int, height_px: int) -> "Quad":
        """Quantize onto the LOC grid; x is normalized by width and y by height"""
        if self.space == CoordSpace.GRID:
            return self
        if self.space == CoordSpace.PIXEL:
            normalized = [(x / width_px, y / height_px) for x, y in self.points]
        else:
            normalized = list(self.points)
        return Quad(tuple((quantize(x), quantize(y)) for x, y in normalized), CoordSpace.GRID)

    def to_pixels(self, width_px: int, height_px: int) -> "Quad":
        if self.space == CoordSpace.PIXEL:
            return self
        if self.space == CoordSpace.GRID:
            pixels = [(dequantize(x, width_px), dequantize(y, height_px)) for x, y in self.points]
        else:
            pixels = [(x * width_px, y * height_px) for x, y in self.points]
        return Quad(tuple(pixels), CoordSpace.PIXEL)

    def flat(self) -> List[float]:
        return [value for point in self.points for value in point]


@dataclass(frozen=True)
class TextInstance:
    text: str
    quad: Quad

    def __post_init__(self):
        if not self.text:
            raise SpottingError("text instance needs non-empty text")
        if LOC_TOKEN_RE.search(self.text):
            raise SpottingError(f"text contains a LOC token: {self.text!r}")


@dataclass(frozen=True)
class DecodeFault:
    offset: int
    token_count: int
    reason: str


class DecodeResult(NamedTuple):
    instances: List[TextInstance]
    faults: List[DecodeFault]


def encode(instances: Sequence[TextInstance], width_px: int, height_px: int) -> SpottingSequence:
    """
    Serialize instances as text followed by eight LOC tokens each

    Args:
        instances: Instances in reading order
        width_px: Image width used to normalize x
        height_px: Image height used to normalize y

    Returns:
        Concatenated token stream, instances in input order
    """
    parts: List[str] = []
    for instance in instances:
        if not instance.text:
            raise SpottingError("cannot encode an instance with empty text")
        if instance.text.endswith(" "):
            raise SpottingError(f"cannot encode {instance.text!r}: a trailing space is read back as a separator")
        grid = instance.quad.to_grid(width_px, height_px)
        parts.append(instance.text)
        parts.extend(loc_token(int(v)) for v in grid.flat())
    return "".join(parts)


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8", errors="surrogatepass"))


def decode(sequence: Union[SpottingSequence, bytes], trim_trailing_space: bool = True) -> DecodeResult:
    """
    Parse a token stream back into text instances

    Left to right, a run of exactly eight adjacent LOC tokens closes the text
    segment before it. Runs of any other length, out-of-range indices and runs
    with no text in front are reported as faults and their tokens dropped;
    parsing carries on after them. Never raises on malformed input.

    Args:
        sequence: Model output, as text or raw bytes
        trim_trailing_space: Drop a single space padding the end of each text segment

    Returns:
        DecodeResult of grid-space instances and faults with byte offsets
    """
    if isinstance(sequence, (bytes, bytearray)):
        text = bytes(sequence).decode("utf-8", errors="replace")
    else:
        text = sequence

    runs: List[List[re.Match]] = []
    for match in LOC_TOKEN_RE.finditer(text):
        if runs and runs[-1][-1].end() == match.start():
            runs[-1].append(match)
        else:
            runs.append([match])

    instances: List[TextInstance] = []
    faults: List[DecodeFault] = []
    cursor = 0
    for run in runs:
        segment_start = cursor
        segment = text[cursor:run[0].start()]
        cursor = run[-1].end()
        if trim_trailing_space and segment.endswith(" "):
            segment = segment[:-1]
        run_offset = _byte_offset(text, run[0].start())

        if len(run) != LOC_TOKENS_PER_INSTANCE:
            faults.append(DecodeFault(run_offset, len(run), f"{len(run)} LOC tokens, expected {LOC_TOKENS_PER_INSTANCE}"))
            continue
        digits = [m.group(1).lstrip("0") or "0" for m in run]
        # Long digit strings are out of range; int() of them can raise
        if any(len(d) > LOC_INDEX_DIGITS for d in digits) or any(int(d) > GRID_MAX for d in digits):
            faults.append(DecodeFault(run_offset, len(run), f"LOC index above {GRID_MAX}"))
            continue
        if not segment:
            faults.append(DecodeFault(_byte_offset(text, segment_start), len(run), "LOC run without preceding text"))
            continue
        values = [int(d) for d in digits]
        points = tuple((values[i], values[i + 1]) for i in range(0, LOC_TOKENS_PER_INSTANCE, 2))
        instances.append(TextInstance(segment, Quad(points, CoordSpace.GRID)))

    trailing = text[cursor:]
    if trailing.strip():
        faults.append(DecodeFault(_byte_offset(text, cursor), 0, "text without location tokens"))

    return DecodeResult(instances, faults)


@dataclass
class SpottingRecord:
    image: str
    instances: List[TextInstance]
    width_px: Optional[int] = None
    height_px: Optional[int] = None
    dimension: Optional[str] = None
    faults: List[DecodeFault] = field(default_factory=list)


def parse_spotting_record(data: dict) -> SpottingRecord:
    """
    One JSON-lines record; raw model output is decoded and mapped to pixels

    Explicit "instances" quads are taken as pixel coordinates.
    """
    image = data.get("image")
    if not isinstance(image, str):
        raise SpottingError("spotting record needs an 'image' string")
    width, height = data.get("width_px"), data.get("height_px")
    dimension = data.get("dimension")

    if "raw" in data:
        if not (isinstance(width, int) and isinstance(height, int)):
            raise SpottingError(f"{image}: raw records need integer width_px and height_px")
        result = decode(data["raw"])
        for fault in result.faults:
            logger.warning(f"{image}: decode fault at byte {fault.offset}: {fault.reason}")
        instances = [TextInstance(i.text, i.quad.to_pixels(width, height)) for i in result.instances]
        return SpottingRecord(image, instances, width, height, dimension, result.faults)

    instances = []
    for item in data.get("instances", []):
        quad = Quad(tuple(tuple(p) for p in item["quad"]), CoordSpace.PIXEL)
        instances.append(TextInstance(item["text"], quad))
    return SpottingRecord(image, instances, width, height, dimension)


def load_spotting_file(path: Union[str, Path]) -> List[SpottingRecord]:
    records = []
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(parse_spotting_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SpottingError(f"{path}:{line_number}: {exc}") from exc
    return records
