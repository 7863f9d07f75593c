"""Segment scoring, match thresholds, and ranking tie rules."""

import numpy as np
import pytest

from pkgforge import matcher
from pkgforge.corpus_io import StepDatabase, StepHeadline, Task
from pkgforge.dedup import assignment_from_roots, cluster_headlines


def _db(vectors):
    steps = tuple(
        StepHeadline(headline_text=f"h{i}", embedding=np.asarray(v, dtype=float))
        for i, v in enumerate(vectors)
    )
    return StepDatabase(tasks=(Task(task_id="t0", task_name="t", steps=steps),))


class TestHeadlineScores:
    def test_unit_dots(self):
        db = _db([(1.0, 0.0), (0.0, 1.0)])
        np.testing.assert_array_equal(
            matcher.headline_scores(np.array([1.0, 0.0]), db), [1.0, 0.0]
        )

    def test_zero_segment(self):
        db = _db([(1.0, 2.0), (3.0, 4.0)])
        np.testing.assert_array_equal(matcher.headline_scores(np.zeros(2), db), [0.0, 0.0])

    def test_plain_dot(self):
        db = _db([(4.0, -1.0)])
        assert matcher.headline_scores(np.array([2.0, 3.0]), db)[0] == 5.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            matcher.headline_scores(np.ones(3), _db([(1.0, 0.0)]))


class TestMatchedHeadlines:
    def test_strictly_above_threshold(self):
        assert matcher.matched_headlines(np.array([12.1, 9.9, 10.0]), 10.0) == [0]

    def test_none_above(self):
        assert matcher.matched_headlines(np.array([1.0, 2.0]), 10.0) == []

    def test_tie_by_index(self):
        assert matcher.matched_headlines(np.array([11.0, 11.0]), 10.0) == [0, 1]

    def test_ordered_by_descending_score(self):
        assert matcher.matched_headlines(np.array([11.0, 13.0, 12.0]), 10.0) == [1, 2, 0]


class TestTopKNodes:
    def test_scores_and_ties(self):
        # ids: A=0, B=1, C=2, D=3 with scores 5, 7, 7, 1
        assert matcher.top_k_nodes(np.array([5.0, 7.0, 7.0, 1.0]), k=3) == [1, 2, 0]

    def test_fewer_candidates_than_k(self):
        assert matcher.top_k_nodes(np.array([2.0, 1.0]), k=3) == [0, 1]

    def test_all_equal_scores(self):
        assert matcher.top_k_nodes(np.full(5, 3.0), k=3) == [0, 1, 2]

    def test_nonpositive_scores_have_no_support(self):
        assert matcher.top_k_nodes(np.array([-1.0, 0.0, 2.0]), k=3) == [2]

    def test_background_floor(self):
        scores = np.array([4.0, 3.0])
        assert matcher.top_k_nodes(scores, k=2, background_floor=5.0) == []
        assert matcher.top_k_nodes(scores, k=2, background_floor=3.5) == [0, 1]

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            scores = rng.uniform(0.1, 9.0, size=12)
            scale = float(rng.uniform(0.01, 50.0))
            assert matcher.top_k_nodes(scores, 4) == matcher.top_k_nodes(scores * scale, 4)


class TestVsmTopHeadlines:
    def test_sort_descending(self):
        assert matcher.vsm_top_headlines(np.array([3.0, 1.0, 2.0]), k=2) == [0, 2]

    def test_k_larger_than_count(self):
        assert matcher.vsm_top_headlines(np.array([3.0, 1.0, 2.0]), k=9) == [0, 2, 1]

    def test_tie_ascending_index(self):
        assert matcher.vsm_top_headlines(np.array([2.0, 2.0, 2.0]), k=2) == [0, 1]


class TestNodeAggregation:
    def test_max_over_members(self):
        assignment = assignment_from_roots([0, 0, 1])
        scores = np.array([1.0, 5.0, 2.0])
        np.testing.assert_array_equal(
            matcher.node_scores_from_headlines(scores, assignment), [5.0, 2.0]
        )

    def test_aggregation_law_random(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(2, 20))
            emb = rng.normal(size=(n, 3))
            assignment = cluster_headlines(emb, float(rng.uniform(0.05, 0.9)))
            scores = rng.normal(size=n)
            node_scores = matcher.node_scores_from_headlines(scores, assignment)
            for nid, members in enumerate(assignment.members_of):
                assert node_scores[nid] == max(scores[m] for m in members)

    def test_match_segment_consistency(self):
        rng = np.random.default_rng(2)
        db = _db(rng.normal(size=(6, 4)))
        assignment = assignment_from_roots([0, 0, 1, 2, 2, 3])
        seg = rng.normal(size=4) * 10
        sm = matcher.match_segment("v", 0, matcher.headline_scores(seg, db), assignment, 5.0)
        assert set(sm.matched_headlines) <= set(range(6))
        assert all(sm.headline_scores[h] > 5.0 for h in sm.matched_headlines)
        assert sm.node_scores.shape == (4,)
