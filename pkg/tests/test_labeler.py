"""Pseudo-label operations and the labels.jsonl format."""

import numpy as np
import pytest

from pkgforge import labeler
from pkgforge.corpus_io import SegmentCorpus, StepDatabase, StepHeadline, Task, Video
from pkgforge.dedup import assignment_from_roots
from pkgforge.graph import DirectedEdge, ProceduralKnowledgeGraph, StepNode, assemble_graph


def _tiny_world():
    """Two tasks sharing node 1; dims picked for explicit dot products.

    task t0 steps: h0 -> node 0, h1 -> node 1
    task t1 steps: h2 -> node 1 (duplicate of h1), h3 -> node 2
    """
    e = np.eye(3) * 2.0
    steps0 = (
        StepHeadline(headline_text="h0", embedding=e[0]),
        StepHeadline(headline_text="h1", embedding=e[1]),
    )
    steps1 = (
        StepHeadline(headline_text="h2", embedding=e[1]),
        StepHeadline(headline_text="h3", embedding=e[2]),
    )
    db = StepDatabase(
        tasks=(
            Task(task_id="t0", task_name="task zero", steps=steps0),
            Task(task_id="t1", task_name="task one", steps=steps1),
        )
    )
    assignment = assignment_from_roots([0, 1, 1, 2])
    pkg = assemble_graph(db, assignment, [(0, 1), (1, 2)], {})
    return db, assignment, pkg


class TestVnmAndVtm:
    def test_vnm_top3(self):
        got = labeler.vnm_labels(np.array([9.0, 7.0, 3.0, 1.0]), k=3)
        assert got == [(0, 9.0), (1, 7.0), (2, 3.0)]

    def test_vnm_fewer_than_k(self):
        assert labeler.vnm_labels(np.array([2.0, 5.0]), k=3) == [(1, 5.0), (0, 2.0)]

    def test_vnm_tie_rule(self):
        assert [n for n, _ in labeler.vnm_labels(np.full(5, 2.0), k=3)] == [0, 1, 2]

    def test_vtm_db_union_sorted(self):
        _, _, pkg = _tiny_world()
        assert labeler.vtm_db_labels([1], pkg) == ["t0", "t1"]
        assert labeler.vtm_db_labels([0, 1, 2], pkg) == ["t0", "t1"]
        assert labeler.vtm_db_labels([0], pkg) == ["t0"]


class TestOccurrenceMatrix:
    def test_single_increment(self):
        _, assignment, _ = _tiny_world()
        occ, skipped = labeler.build_occurrence_matrix(
            [[1]], ["task zero"], [0], assignment
        )
        assert skipped == 0
        # node 1 members are headlines 1 and 2
        assert occ.counts[1, occ.column_of["task zero"]] == 1
        assert occ.counts[2, occ.column_of["task zero"]] == 1
        assert occ.counts.sum() == 2

    def test_additivity(self):
        _, assignment, _ = _tiny_world()
        occ, _ = labeler.build_occurrence_matrix(
            [[1], [1]], ["task zero"], [0, 0], assignment
        )
        assert occ.counts[1, 0] == 2 and occ.counts[2, 0] == 2

    def test_unnamed_videos_skipped(self):
        _, assignment, _ = _tiny_world()
        occ, skipped = labeler.build_occurrence_matrix([[0]], [None], [0], assignment)
        assert skipped == 1
        assert occ.counts.shape == (4, 0)

    def test_count_conservation(self):
        rng = np.random.default_rng(0)
        _, assignment, _ = _tiny_world()
        names = ["a", "b", None]
        video_of = [int(rng.integers(0, 3)) for _ in range(30)]
        vnm = [list(rng.choice(3, size=int(rng.integers(0, 3)), replace=False)) for _ in range(30)]
        occ, _ = labeler.build_occurrence_matrix(vnm, names, video_of, assignment)
        expected = sum(
            sum(len(assignment.members_of[n]) for n in nodes)
            for nodes, vi in zip(vnm, video_of)
            if names[vi] is not None
        )
        assert occ.counts.sum() == expected


class TestCorpusVariants:
    def test_vtm_corpus_ranking(self):
        _, assignment, _ = _tiny_world()
        occ = labeler.OccurrenceMatrix(
            counts=np.array([[5, 0], [0, 2], [0, 0], [0, 0]]), task_names=("T1", "T2")
        )
        assert labeler.vtm_corpus_labels([0], occ, assignment) == ["T1"]
        assert labeler.vtm_corpus_labels([0, 1], occ, assignment) == ["T1", "T2"]

    def test_vtm_corpus_all_zero(self):
        _, assignment, _ = _tiny_world()
        occ = labeler.OccurrenceMatrix(counts=np.zeros((4, 2), dtype=int), task_names=("T1", "T2"))
        assert labeler.vtm_corpus_labels([0, 1, 2], occ, assignment) == []

    def test_vtm_corpus_lexicographic_tie(self):
        _, assignment, _ = _tiny_world()
        occ = labeler.OccurrenceMatrix(
            counts=np.array([[4, 4], [0, 0], [0, 0], [0, 0]]), task_names=("TB", "TA")
        )
        assert labeler.vtm_corpus_labels([0], occ, assignment) == ["TA", "TB"]

    def test_tcl_db(self):
        db, assignment, pkg = _tiny_world()
        tasks_of = labeler.task_node_map(db, assignment)
        assert tasks_of == {"t0": (0, 1), "t1": (1, 2)}
        assert labeler.tcl_db_labels(["t0"], tasks_of) == [0, 1]
        assert labeler.tcl_db_labels(["t0", "t1"], tasks_of) == [0, 1, 2]
        assert labeler.tcl_db_labels([], tasks_of) == []

    def test_tcl_corpus_top3_nonzero(self):
        _, assignment, _ = _tiny_world()
        # headline counts chosen so node totals are node0=7, node1=3, node2=0
        occ = labeler.OccurrenceMatrix(
            counts=np.array([[7], [1], [2], [0]]), task_names=("T1",)
        )
        assert labeler.tcl_corpus_labels(["T1"], occ, assignment, k=3) == [0, 1]
        assert labeler.tcl_corpus_labels(["T1"], occ, assignment, k=1) == [0]

    def test_tcl_corpus_union(self):
        _, assignment, _ = _tiny_world()
        occ = labeler.OccurrenceMatrix(
            counts=np.array([[1, 0], [0, 1], [0, 1], [0, 0]]), task_names=("T1", "T2")
        )
        assert labeler.tcl_corpus_labels(["T1", "T2"], occ, assignment) == [0, 1]


class TestNrl:
    def test_chain(self):
        _, _, pkg = _tiny_world()
        got = labeler.nrl_labels([1], pkg, hops=1, top_per_hop=(5,))
        assert got["in"] == [[(0, 1.0)]]
        assert got["out"] == [[(2, 1.0)]]

    def test_isolated_node(self):
        nodes = [StepNode(0, (("t", 0, "h"),)), StepNode(1, (("t", 1, "g"),))]
        pkg = ProceduralKnowledgeGraph(nodes=nodes, edges=[])
        got = labeler.nrl_labels([0], pkg, hops=2, top_per_hop=(5, 3))
        assert got == {"in": [[], []], "out": [[], []]}

    def test_diamond_second_hop(self):
        nodes = [StepNode(i, (("t", i, f"h{i}"),)) for i in range(4)]
        edges = [
            DirectedEdge(0, 1, 0.9, ("corpus",)),
            DirectedEdge(1, 3, 0.5, ("corpus",)),
            DirectedEdge(0, 2, 0.8, ("corpus",)),
            DirectedEdge(2, 3, 0.8, ("corpus",)),
        ]
        pkg = ProceduralKnowledgeGraph(nodes=nodes, edges=edges)
        got = labeler.nrl_labels([0], pkg, hops=2, top_per_hop=(5, 3))
        assert got["out"][1] == [(3, pytest.approx(0.64))]

    def test_top_per_hop_truncation(self):
        nodes = [StepNode(i, (("t", i, f"h{i}"),)) for i in range(8)]
        edges = [DirectedEdge(0, d, 1.0 - 0.01 * d, ("corpus",)) for d in range(1, 8)]
        pkg = ProceduralKnowledgeGraph(nodes=nodes, edges=edges)
        got = labeler.nrl_labels([0], pkg, hops=1, top_per_hop=(5,))
        assert [n for n, _ in got["out"][0]] == [1, 2, 3, 4, 5]


class TestEmitLabels:
    def _corpus(self):
        return SegmentCorpus(
            videos=[
                Video(
                    video_id="v0",
                    corpus_task_name="task zero",
                    segments=np.array([[10.0, 0.0, 0.0], [0.0, 10.0, 0.0]]),
                ),
                Video(
                    video_id="v1",
                    corpus_task_name="task one",
                    segments=np.array([[0.0, 0.0, 10.0]]),
                ),
            ]
        )

    def test_record_per_segment_in_order(self):
        db, _, pkg = _tiny_world()
        header, records = labeler.emit_labels(self._corpus(), db, pkg)
        assert header["num_segments"] == 3
        assert [(r.video_id, r.segment_index) for r in records] == [
            ("v0", 0),
            ("v0", 1),
            ("v1", 0),
        ]
        # segment (v0, 0) points at node 0 whose only task is t0
        assert records[0].vnm[0][0] == 0
        assert records[0].vtm_db == ["t0"]
        # tcl_db covers the matched nodes themselves
        for rec in records:
            assert set(n for n, _ in rec.vnm) <= set(rec.tcl_db)

    def test_empty_corpus(self):
        db, _, pkg = _tiny_world()
        header, records = labeler.emit_labels(SegmentCorpus(videos=[]), db, pkg)
        assert records == []
        assert header["num_segments"] == 0
        assert header["corpus_task_names"] == []

    def test_threads_do_not_change_output(self):
        db, _, pkg = _tiny_world()
        h1, r1 = labeler.emit_labels(self._corpus(), db, pkg, threads=1)
        h2, r2 = labeler.emit_labels(self._corpus(), db, pkg, threads=4)
        assert h1 == h2 and r1 == r2

    def test_referential_integrity(self):
        db, _, pkg = _tiny_world()
        header, records = labeler.emit_labels(self._corpus(), db, pkg)
        task_ids = set(header["task_ids"])
        names = set(header["corpus_task_names"])
        for rec in records:
            for nid, _ in rec.vnm:
                assert 0 <= nid < pkg.num_nodes
            assert set(rec.vtm_db) <= task_ids
            assert set(rec.vtm_corpus) <= names
            for nid in rec.tcl_db + rec.tcl_corpus:
                assert 0 <= nid < pkg.num_nodes
            for hops in rec.nrl.values():
                for hop in hops:
                    for nid, conf in hop:
                        assert 0 <= nid < pkg.num_nodes
                        assert 0.0 < conf <= 1.0
            for hid, _ in rec.vsm:
                assert 0 <= hid < db.num_headlines

    def test_save_load_round_trip(self, tmp_path):
        db, _, pkg = _tiny_world()
        header, records = labeler.emit_labels(self._corpus(), db, pkg)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        labeler.save_labels(header, records, p1)
        h2, r2 = labeler.load_labels(p1)
        labeler.save_labels(h2, r2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert h2 == header and r2 == records

    def test_empty_file_has_valid_header(self, tmp_path):
        db, _, pkg = _tiny_world()
        header, records = labeler.emit_labels(SegmentCorpus(videos=[]), db, pkg)
        path = tmp_path / "labels.jsonl"
        labeler.save_labels(header, records, path)
        h2, r2 = labeler.load_labels(path)
        assert h2["kind"] == "pkgforge-labels" and r2 == []
