import json
import tomllib
from pathlib import Path
from typing import List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from backend import Backend
from batch_policy import DEFAULT_BATCH_CAPACITY, DEFAULT_MAX_WAIT_MS, DEFAULT_QUEUE_CAPACITY, BatchPolicy
from core_model import PageDocument, load_document
from metrics import DEFAULT_IOU_THRESHOLD, OverallWeights
from mock_backend import LatencyModel, create_mock_backend
from playback_backend import create_playback_backend

BACKEND_KINDS = ("mock", "playback")


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration"""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PipelineSettings(_Section):
    batch_capacity: int = Field(default=DEFAULT_BATCH_CAPACITY, ge=1)
    max_wait_ms: float = Field(default=DEFAULT_MAX_WAIT_MS, ge=0)
    queue_capacity: int = Field(default=DEFAULT_QUEUE_CAPACITY, ge=1)
    recognition_workers: int = Field(default=1, ge=1)
    # Run on the simpy clock instead of threads
    simulated_clock: bool = False

    def policy(self) -> BatchPolicy:
        return BatchPolicy(self.batch_capacity, self.max_wait_ms)


class BackendSettings(_Section):
    kind: str = "mock"
    # mock
    prep_ms: float = Field(default=0.0, ge=0)
    layout_ms: float = Field(default=0.0, ge=0)
    recognition_ms: float = Field(default=0.0, ge=0)
    per_item_ms: float = Field(default=0.0, ge=0)
    jitter_ms: float = Field(default=0.0, ge=0)
    blocks_per_page: int = Field(default=4, ge=0)
    tokens_per_block: int = Field(default=32, ge=0)
    realtime: bool = False
    # playback
    gt: Optional[str] = None
    strip_order: bool = False


class MetricSettings(_Section):
    weights: List[float] = Field(default_factory=lambda: [1.0 / 3.0] * 3)
    iou_threshold: float = Field(default=DEFAULT_IOU_THRESHOLD, gt=0, le=1)
    exclude_decorative: bool = True
    workers: int = Field(default=1, ge=1)

    def overall_weights(self) -> OverallWeights:
        if len(self.weights) != 3:
            raise ConfigError(f"metrics.weights needs three values, got {self.weights}")
        try:
            return OverallWeights(*self.weights)
        except ValueError as exc:
            raise ConfigError(f"metrics.weights: {exc}") from exc


class AppConfig(_Section):
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    backend: BackendSettings = Field(default_factory=BackendSettings)
    metrics: MetricSettings = Field(default_factory=MetricSettings)
    seed: int = 0


def load_config(path: Union[str, Path, None]) -> AppConfig:
    """
    Load a TOML or JSON config file, picked by extension

    Args:
        path: Config file, or None for the defaults

    Returns:
        Validated AppConfig

    Raises:
        ConfigError: For unreadable files, unknown extensions or invalid values
    """
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            data = tomllib.loads(raw)
        elif suffix == ".json":
            data = json.loads(raw)
        else:
            raise ConfigError(f"config {path} must end in .toml or .json")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid {suffix[1:].upper()}: {exc}") from exc

    try:
        return AppConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def create_backend_from_config(settings: BackendSettings, seed: int = 0,
                               gt_pages: Optional[Sequence[PageDocument]] = None) -> Backend:
    """
    Factory function to create a backend from its config section

    Args:
        settings: The [backend] section
        seed: Jitter seed for the mock backend
        gt_pages: Ground truth for playback; settings.gt wins when both are given

    Returns:
        Backend instance

    Raises:
        ConfigError: If the kind is unknown or playback has no ground truth
    """
    kind = settings.kind.lower()
    if kind == "mock":
        latency = LatencyModel(
            prep_ms=settings.prep_ms,
            layout_ms=settings.layout_ms,
            recognition_ms=settings.recognition_ms,
            per_item_ms=settings.per_item_ms,
            jitter_ms=settings.jitter_ms,
            seed=seed,
        )
        return create_mock_backend(latency, settings.blocks_per_page, settings.tokens_per_block, settings.realtime)
    elif kind == "playback":
        if settings.gt is not None:
            gt_pages = load_document(settings.gt)
        elif gt_pages is None:
            raise ConfigError("playback backend needs ground truth (backend.gt or an input document)")
        return create_playback_backend(gt_pages, settings.strip_order)
    else:
        raise ConfigError(f"unknown backend kind {settings.kind!r}; valid kinds: {', '.join(BACKEND_KINDS)}")
