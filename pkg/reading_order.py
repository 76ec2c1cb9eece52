import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from loguru import logger
from scipy.special import expit

from core_model import LayoutElement

ANTISYMMETRY_TOLERANCE = 1e-9
SYMMETRIZE_WARN_THRESHOLD = 1e-6


class RelationError(ValueError):
    """Raised for inconsistent query / weight shapes or malformed relation matrices"""


def _as_finite_matrix(values, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise RelationError(f"{name} must be a 2-D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise RelationError(f"{name} contains non-finite entries")
    return matrix


@dataclass(frozen=True)
class ProjectionWeights:
    """
    Learned query/key projections.

    Each matrix has d_h rows and d columns and is applied as W·q, so a
    d-dimensional query maps to a d_h-dimensional projection.
    """

    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self):
        w_q = _as_finite_matrix(self.w_q, "W_q")
        w_k = _as_finite_matrix(self.w_k, "W_k")
        if w_q.shape != w_k.shape:
            raise RelationError(f"W_q shape {w_q.shape} differs from W_k shape {w_k.shape}")
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_k", w_k)

    @property
    def hidden_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def query_dim(self) -> int:
        return self.w_q.shape[1]


@dataclass(frozen=True)
class RelationMatrix:
    """N x N anti-symmetric precedence scores; S[i][j] > 0 means i reads before j"""

    scores: np.ndarray

    @property
    def size(self) -> int:
        return self.scores.shape[0]

    def antisymmetry_error(self) -> float:
        if self.size == 0:
            return 0.0
        return float(np.max(np.abs(self.scores + self.scores.T)))

    @classmethod
    def from_external(cls, values) -> "RelationMatrix":
        """
        Accept a matrix produced elsewhere, projecting it onto the anti-symmetric part

        A warning is logged when the projection moves any entry by more than 1e-6.
        """
        scores = _as_finite_matrix(values, "relation matrix") if np.size(values) else np.zeros((0, 0))
        if scores.shape[0] != scores.shape[1]:
            raise RelationError(f"relation matrix must be square, got shape {scores.shape}")
        projected = (scores - scores.T) / 2.0
        correction = float(np.max(np.abs(projected - scores))) if scores.size else 0.0
        if correction > SYMMETRIZE_WARN_THRESHOLD:
            logger.warning(f"relation matrix was not anti-symmetric; corrected by up to {correction:.3g}")
        return cls(projected)

    def to_json(self) -> dict:
        return {"n": self.size, "s": self.scores.tolist()}


@dataclass(frozen=True)
class ReadingOrder:
    ranks: List[int]
    votes: List[float]

    def positions(self) -> List[int]:
        """positions()[i] is the reading rank of element i"""
        positions = [0] * len(self.ranks)
        for rank, index in enumerate(self.ranks):
            positions[index] = rank
        return positions


def score_relations(queries, weights: ProjectionWeights) -> RelationMatrix:
    """
    Pairwise precedence scores between refined layout queries

    S[i][j] = (f(q_i, q_j) - f(q_j, q_i)) / sqrt(d_h) with
    f(q_i, q_j) = (W_q q_i) · (W_k q_j). f is computed once per ordered pair and
    the difference taken afterwards, so S + S^T is exactly zero.

    Args:
        queries: N x d query matrix (N may be 0)
        weights: Projection matrices with d columns

    Returns:
        RelationMatrix of shape N x N
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        return RelationMatrix(np.zeros((0, 0)))
    q = _as_finite_matrix(q, "queries")
    if q.shape[1] != weights.query_dim:
        raise RelationError(f"query dimension {q.shape[1]} does not match projection input dimension {weights.query_dim}")

    projected_q = q @ weights.w_q.T
    projected_k = q @ weights.w_k.T
    pairwise = projected_q @ projected_k.T
    scores = (pairwise - pairwise.T) / math.sqrt(weights.hidden_dim)
    return RelationMatrix(scores)


def vote(relations: RelationMatrix) -> ReadingOrder:
    """
    Turn precedence scores into a reading order

    V_j sums sigma(S[i][j]) over i != j, i.e. how strongly the others precede
    j. Elements are read in ascending V_j; equal votes keep index order.
    """
    n = relations.size
    if n == 0:
        return ReadingOrder(ranks=[], votes=[])
    error = relations.antisymmetry_error()
    if error > ANTISYMMETRY_TOLERANCE:
        raise RelationError(f"relation matrix is not anti-symmetric (max |S + S^T| = {error:.3g})")

    probabilities = expit(relations.scores)
    np.fill_diagonal(probabilities, 0.0)
    votes = probabilities.sum(axis=0)
    ranks = np.argsort(votes, kind="stable")
    return ReadingOrder(ranks=[int(i) for i in ranks], votes=[float(v) for v in votes])


def _check_permutation(perm: Sequence[int]) -> List[int]:
    perm = [int(i) for i in perm]
    if sorted(perm) != list(range(len(perm))):
        raise RelationError(f"not a permutation of 0..{len(perm) - 1}: {perm}")
    return perm


def order_from_margin_matrix(true_perm: Sequence[int], margin: float) -> RelationMatrix:
    """
    Relation matrix that scores +margin for every pair read in true_perm order

    Args:
        true_perm: true_perm[k] is the element read k-th
        margin: Positive score magnitude
    """
    if not (margin > 0 and math.isfinite(margin)):
        raise RelationError(f"margin must be a positive finite number, got {margin}")
    perm = _check_permutation(true_perm)
    n = len(perm)
    position = np.empty(n, dtype=np.int64)
    position[perm] = np.arange(n)
    before = position[:, None] < position[None, :]
    scores = np.where(before, margin, -margin).astype(np.float64)
    np.fill_diagonal(scores, 0.0)
    return RelationMatrix(scores)


def load_relation_matrix(path: Union[str, Path]) -> RelationMatrix:
    """Read the {"n": int, "s": [[...]]} exchange format"""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    n = data.get("n")
    rows = data.get("s")
    if not isinstance(n, int) or not isinstance(rows, list) or len(rows) != n or any(len(r) != n for r in rows):
        raise RelationError(f"{path}: expected n x n matrix under 's' with n = {n!r}")
    return RelationMatrix.from_external(np.asarray(rows, dtype=np.float64).reshape(n, n))


def geometric_order(elements: Sequence[LayoutElement]) -> List[int]:
    """Top-to-bottom, then left-to-right order of element indices"""
    def key(index: int):
        min_x, min_y, _, _ = elements[index].polygon.bounds()
        return min_y, min_x, index

    return sorted(range(len(elements)), key=key)


def apply_order(elements: List[LayoutElement], ranks: Sequence[int]) -> None:
    """Write reading ranks into elements; ranks[k] is the index read k-th"""
    for rank, index in enumerate(ranks):
        elements[index].order = rank
