import json
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from file_io import atomic_write_text
from uacs_planner import EmbeddingSet, PlanningError

HEADER_DTYPE = np.dtype("<u4")
VALUE_DTYPE = np.dtype("<f4")


def ids_path_for(path: Union[str, Path]) -> Path:
    """Sidecar id list: embeddings.bin -> embeddings.ids.json"""
    return Path(path).with_suffix(".ids.json")


def read_embeddings(path: Union[str, Path]) -> EmbeddingSet:
    """
    Load a little-endian f32 matrix with an (M: u32, e: u32) header

    Args:
        path: Binary embeddings file; ids are read from the .ids.json sidecar

    Returns:
        EmbeddingSet with M rows of dimension e
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise PlanningError(f"{path}: missing 8-byte header")
    m, e = (int(v) for v in np.frombuffer(raw[:8], dtype=HEADER_DTYPE))
    expected = 8 + m * e * VALUE_DTYPE.itemsize
    if len(raw) != expected:
        raise PlanningError(f"{path}: header says {m}x{e} but file has {len(raw)} bytes (expected {expected})")
    vectors = np.frombuffer(raw[8:], dtype=VALUE_DTYPE).reshape(m, e)

    ids_path = ids_path_for(path)
    ids = json.loads(ids_path.read_text(encoding="utf-8"))
    if not isinstance(ids, list):
        raise PlanningError(f"{ids_path}: expected a JSON list of sample ids")
    return EmbeddingSet(vectors, [str(i) for i in ids])


def write_embeddings(path: Union[str, Path], vectors, ids: Sequence[str]) -> None:
    matrix = np.asarray(vectors, dtype=VALUE_DTYPE)
    if matrix.ndim != 2:
        raise PlanningError(f"expected a 2-D matrix, got shape {matrix.shape}")
    header = np.array(matrix.shape, dtype=HEADER_DTYPE).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(matrix).tobytes())
    atomic_write_text(ids_path_for(path), json.dumps(list(ids)))


def read_rollouts(path: Union[str, Path]) -> Dict[str, List[str]]:
    """Rollout file: JSON object mapping sample id -> list of decoded outputs"""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise PlanningError(f"{path}: expected an object of sample id -> list of strings")
    return {str(k): [str(s) for s in v] for k, v in data.items()}


def read_tasks(path: Union[str, Path]) -> Dict[str, str]:
    """Task file: JSON object mapping sample id -> task name"""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise PlanningError(f"{path}: expected an object of sample id -> task name")
    return {str(k): v for k, v in data.items()}
