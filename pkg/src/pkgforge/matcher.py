"""Segment-to-headline and segment-to-node scoring.

Scores are plain dot products between a segment feature and each headline
embedding, computed in f64. A node's score is the max over its member
headlines. Every ranking in the pipeline uses one tie rule: descending
score, then ascending id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus_io import StepDatabase
from .dedup import NodeAssignment

DEFAULT_MATCH_THRESHOLD = 10.0
DEFAULT_TOP_K = 3


@dataclass
class SegmentMatches:
    video_id: str
    segment_index: int
    headline_scores: np.ndarray  # (num_headlines,) float64
    matched_headlines: list[int]  # score strictly above threshold, ranked
    node_scores: np.ndarray  # (num_nodes,) float64, max over members


def headline_scores(segment: np.ndarray, db: StepDatabase) -> np.ndarray:
    """Dot product of one segment feature against every headline embedding."""
    segment = np.asarray(segment, dtype=np.float64)
    emb = db.embedding_matrix()
    if segment.shape[0] != emb.shape[1]:
        raise ValueError(
            f"segment dimension {segment.shape[0]} does not match database dimension {emb.shape[1]}"
        )
    return emb @ segment


def score_video(segments: np.ndarray, db: StepDatabase) -> np.ndarray:
    """(L, num_headlines) score matrix for all segments of one video."""
    segments = np.asarray(segments, dtype=np.float64)
    emb = db.embedding_matrix()
    if segments.shape[1] != emb.shape[1]:
        raise ValueError(
            f"segment dimension {segments.shape[1]} does not match database dimension {emb.shape[1]}"
        )
    return segments @ emb.T


def ranked_indices(scores: np.ndarray, candidates: np.ndarray) -> list[int]:
    """Candidate indices ordered by descending score, ties by ascending index."""
    order = np.lexsort((candidates, -scores[candidates]))
    return [int(candidates[i]) for i in order]


def matched_headlines(
    scores: np.ndarray, match_threshold: float = DEFAULT_MATCH_THRESHOLD
) -> list[int]:
    """Headline indices scoring strictly above the threshold, ranked."""
    candidates = np.nonzero(scores > match_threshold)[0]
    return ranked_indices(scores, candidates)


def node_scores_from_headlines(scores: np.ndarray, assignment: NodeAssignment) -> np.ndarray:
    """Aggregate headline scores to nodes by taking the member-wise max."""
    node_scores = np.full(assignment.num_nodes, -np.inf)
    np.maximum.at(node_scores, assignment.node_of, scores)
    return node_scores


def top_k_nodes(
    node_scores: np.ndarray,
    k: int = DEFAULT_TOP_K,
    background_floor: float | None = None,
) -> list[int]:
    """Up to k node ids with the largest positive score.

    Only nodes with score > 0 have any support and are considered. With
    background_floor set, an all-below-floor segment matches nothing at all
    instead of being forced onto irrelevant nodes.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    node_scores = np.asarray(node_scores, dtype=np.float64)
    if background_floor is not None:
        if node_scores.size == 0 or float(np.max(node_scores)) < background_floor:
            return []
    candidates = np.nonzero(node_scores > 0)[0]
    return ranked_indices(node_scores, candidates)[:k]


def vsm_top_headlines(scores: np.ndarray, k: int = DEFAULT_TOP_K) -> list[int]:
    """Top-k raw headlines by score, without node aggregation."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.nonzero(scores > 0)[0]
    return ranked_indices(scores, candidates)[:k]


def match_segment(
    video_id: str,
    segment_index: int,
    scores: np.ndarray,
    assignment: NodeAssignment,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> SegmentMatches:
    return SegmentMatches(
        video_id=video_id,
        segment_index=segment_index,
        headline_scores=scores,
        matched_headlines=matched_headlines(scores, match_threshold),
        node_scores=node_scores_from_headlines(scores, assignment),
    )
