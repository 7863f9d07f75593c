"""Per-segment pseudo labels mined from the knowledge graph.

Five label families are produced for every segment: matched step nodes
(vnm), matched tasks in database and corpus variants (vtm_db, vtm_corpus),
the step context those tasks imply (tcl_db, tcl_corpus), graph neighbors
of the matched nodes per hop and direction (nrl), and the headline-level
baseline (vsm). Labels are materialized to labels.jsonl: one header line
with the class-index spaces, then one record per segment in (video,
segment) order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matcher
from .corpus_io import CorpusFormatError, SegmentCorpus, StepDatabase, canonical_json
from .dedup import NodeAssignment
from .graph import ProceduralKnowledgeGraph, khop_neighbors

log = logging.getLogger(__name__)

LABELS_KIND = "pkgforge-labels"


@dataclass
class LabelConfig:
    vnm_top_k: int = 3
    vtm_corpus_top_k: int = 3
    tcl_corpus_top_k: int = 3
    nrl_hops: int = 2
    nrl_top_per_hop: tuple[int, ...] = (5, 3)
    vsm_top_k: int = 3
    background_floor: float | None = None

    def __post_init__(self):
        if self.nrl_hops > len(self.nrl_top_per_hop):
            raise ValueError("nrl_top_per_hop must cover every hop")


@dataclass
class OccurrenceMatrix:
    """Headline x corpus-task-name count matrix.

    Column order is the lexicographically sorted set of observed task
    names, which keeps reruns byte-identical.
    """

    counts: np.ndarray  # (num_headlines, num_corpus_tasks) int64
    task_names: tuple[str, ...]
    column_of: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.column_of = {name: i for i, name in enumerate(self.task_names)}


@dataclass
class PseudoLabelSet:
    video_id: str
    segment_index: int
    vnm: list[tuple[int, float]]
    vtm_db: list[str]
    vtm_corpus: list[str]
    tcl_db: list[int]
    tcl_corpus: list[int]
    nrl: dict[str, list[list[tuple[int, float]]]]  # direction -> per-hop ranked lists
    vsm: list[tuple[int, float]]


# ---------------------------------------------------------------------------
# individual label operations


def vnm_labels(
    node_scores: np.ndarray, k: int = 3, background_floor: float | None = None
) -> list[tuple[int, float]]:
    """Top-k matched nodes with their raw matching scores."""
    ids = matcher.top_k_nodes(node_scores, k=k, background_floor=background_floor)
    return [(nid, float(node_scores[nid])) for nid in ids]


def vtm_db_labels(vnm_nodes: list[int], graph: ProceduralKnowledgeGraph) -> list[str]:
    """Sorted union of the task ids behind the matched nodes' members."""
    tasks: set[str] = set()
    for nid in vnm_nodes:
        tasks.update(graph.nodes[nid].task_ids)
    return sorted(tasks)


def build_occurrence_matrix(
    segment_vnm: list[list[int]],
    video_task_names: list[str | None],
    video_of_segment: list[int],
    assignment: NodeAssignment,
) -> tuple[OccurrenceMatrix, int]:
    """Count matched-node member headlines against the videos' task names.

    Segments of videos without a task name are skipped; the number of such
    videos is returned alongside the matrix so callers can report it.
    """
    names = sorted({n for n in video_task_names if n is not None})
    column_of = {name: i for i, name in enumerate(names)}
    counts = np.zeros((assignment.num_headlines, len(names)), dtype=np.int64)
    skipped = {vi for vi, name in enumerate(video_task_names) if name is None}
    for seg_idx, nodes in enumerate(segment_vnm):
        vi = video_of_segment[seg_idx]
        if vi in skipped:
            continue
        col = column_of[video_task_names[vi]]
        for nid in nodes:
            for h in assignment.members_of[nid]:
                counts[h, col] += 1
    if skipped:
        log.warning("occurrence matrix skipped %d videos without task names", len(skipped))
    return OccurrenceMatrix(counts=counts, task_names=tuple(names)), len(skipped)


def vtm_corpus_labels(vnm_nodes: list[int], occ: OccurrenceMatrix, assignment: NodeAssignment, k: int = 3) -> list[str]:
    """Top-k corpus task names by summed member-headline occurrence."""
    if occ.counts.shape[1] == 0 or not vnm_nodes:
        return []
    totals = np.zeros(occ.counts.shape[1], dtype=np.int64)
    for nid in vnm_nodes:
        for h in assignment.members_of[nid]:
            totals += occ.counts[h]
    ranked = sorted(
        (i for i in range(len(totals)) if totals[i] > 0),
        key=lambda i: (-totals[i], occ.task_names[i]),
    )
    return [occ.task_names[i] for i in ranked[:k]]


def tcl_db_labels(
    vtm_tasks: list[str],
    task_nodes: dict[str, tuple[int, ...]],
) -> list[int]:
    """Union of the node ids every matched task's steps map to, sorted."""
    nodes: set[int] = set()
    for task_id in vtm_tasks:
        nodes.update(task_nodes[task_id])
    return sorted(nodes)


def tcl_corpus_labels(
    vtm_names: list[str],
    occ: OccurrenceMatrix,
    assignment: NodeAssignment,
    k: int = 3,
) -> list[int]:
    """Per matched corpus task, the top-k nonzero-occurrence nodes; unioned."""
    out: set[int] = set()
    node_of = assignment.node_of
    for name in vtm_names:
        col = occ.counts[:, occ.column_of[name]]
        node_counts = np.zeros(assignment.num_nodes, dtype=np.int64)
        np.add.at(node_counts, node_of, col)
        ranked = sorted(np.nonzero(node_counts > 0)[0], key=lambda n: (-node_counts[n], n))
        out.update(int(n) for n in ranked[:k])
    return sorted(out)


def nrl_labels(
    vnm_nodes: list[int],
    graph: ProceduralKnowledgeGraph,
    hops: int = 2,
    top_per_hop: tuple[int, ...] = (5, 3),
) -> dict[str, list[list[tuple[int, float]]]]:
    """Ranked k-hop neighbors of the matched node set, per direction and hop."""
    out: dict[str, list[list[tuple[int, float]]]] = {}
    for direction in ("in", "out"):
        per_hop = khop_neighbors(graph, vnm_nodes, hops, direction) if vnm_nodes else [{}] * hops
        ranked_hops = []
        for k, confidences in enumerate(per_hop):
            ranked = sorted(confidences.items(), key=lambda item: (-item[1], item[0]))
            ranked_hops.append([(nid, conf) for nid, conf in ranked[: top_per_hop[k]]])
        out[direction] = ranked_hops
    return out


# ---------------------------------------------------------------------------
# orchestration


def task_node_map(db: StepDatabase, assignment: NodeAssignment) -> dict[str, tuple[int, ...]]:
    """task_id -> sorted node ids of the task's own steps."""
    out: dict[str, tuple[int, ...]] = {}
    hidx = 0
    for task in db.tasks:
        ids = {int(assignment.node_of[hidx + si]) for si in range(len(task.steps))}
        hidx += len(task.steps)
        out[task.task_id] = tuple(sorted(ids))
    return out


def emit_labels(
    corpus: SegmentCorpus,
    db: StepDatabase,
    graph: ProceduralKnowledgeGraph,
    config: LabelConfig | None = None,
    threads: int = 1,
) -> tuple[dict, list[PseudoLabelSet]]:
    """Generate one PseudoLabelSet per segment, in (video, segment) order.

    Returns the labels file header (class-index spaces plus bookkeeping)
    and the records. Scoring is parallel over videos; everything
    downstream of the occurrence matrix is a pure function of it.
    """
    config = config or LabelConfig()
    assignment = graph.assignment(db)
    tasks_of = task_node_map(db, assignment)

    def score(video):
        return matcher.score_video(video.segments, db) if video.segments.shape[0] else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            score_matrices = list(ex.map(score, corpus.videos))
    else:
        score_matrices = [score(v) for v in corpus.videos]

    segment_vnm: list[list[tuple[int, float]]] = []
    segment_vsm: list[list[tuple[int, float]]] = []
    video_of_segment: list[int] = []
    for vi, scores in enumerate(score_matrices):
        if scores is None:
            continue
        for row in scores:
            node_scores = matcher.node_scores_from_headlines(row, assignment)
            segment_vnm.append(
                vnm_labels(node_scores, k=config.vnm_top_k, background_floor=config.background_floor)
            )
            vsm_ids = matcher.vsm_top_headlines(row, k=config.vsm_top_k)
            segment_vsm.append([(h, float(row[h])) for h in vsm_ids])
            video_of_segment.append(vi)

    occ, skipped = build_occurrence_matrix(
        [[nid for nid, _ in vnm] for vnm in segment_vnm],
        [v.corpus_task_name for v in corpus.videos],
        video_of_segment,
        assignment,
    )

    records: list[PseudoLabelSet] = []
    seg_cursor = 0
    for vi, video in enumerate(corpus.videos):
        for seg_idx in range(video.segments.shape[0]):
            vnm = segment_vnm[seg_cursor]
            vnm_ids = [nid for nid, _ in vnm]
            vtm_db = vtm_db_labels(vnm_ids, graph)
            vtm_corpus = vtm_corpus_labels(vnm_ids, occ, assignment, k=config.vtm_corpus_top_k)
            records.append(
                PseudoLabelSet(
                    video_id=video.video_id,
                    segment_index=seg_idx,
                    vnm=vnm,
                    vtm_db=vtm_db,
                    vtm_corpus=vtm_corpus,
                    tcl_db=tcl_db_labels(vtm_db, tasks_of),
                    tcl_corpus=tcl_corpus_labels(
                        vtm_corpus, occ, assignment, k=config.tcl_corpus_top_k
                    ),
                    nrl=nrl_labels(vnm_ids, graph, config.nrl_hops, config.nrl_top_per_hop),
                    vsm=segment_vsm[seg_cursor],
                )
            )
            seg_cursor += 1

    header = {
        "kind": LABELS_KIND,
        "config_hash": graph.config_hash,
        "num_videos": len(corpus.videos),
        "num_segments": len(records),
        "num_nodes": graph.num_nodes,
        "num_headlines": db.num_headlines,
        "task_ids": [t.task_id for t in db.tasks],
        "corpus_task_names": list(occ.task_names),
        "nrl_hops": config.nrl_hops,
        "skipped_unnamed_videos": skipped,
    }
    return header, records


# ---------------------------------------------------------------------------
# serialization


def _record_obj(rec: PseudoLabelSet) -> dict:
    return {
        "video_id": rec.video_id,
        "segment_index": rec.segment_index,
        "vnm": [[nid, score] for nid, score in rec.vnm],
        "vtm_db": rec.vtm_db,
        "vtm_corpus": rec.vtm_corpus,
        "tcl_db": rec.tcl_db,
        "tcl_corpus": rec.tcl_corpus,
        "nrl": {
            direction: [[[nid, conf] for nid, conf in hop] for hop in hops]
            for direction, hops in rec.nrl.items()
        },
        "vsm": [[hid, score] for hid, score in rec.vsm],
    }


def save_labels(header: dict, records: list[PseudoLabelSet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header) + "\n")
        for rec in records:
            fh.write(canonical_json(_record_obj(rec)) + "\n")


def load_labels(path: str | Path) -> tuple[dict, list[PseudoLabelSet]]:
    path = Path(path)
    records: list[PseudoLabelSet] = []
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CorpusFormatError(f"{path}: empty labels file")
        try:
            header = json.loads(header_line)
            if header.get("kind") != LABELS_KIND:
                raise ValueError(f"unexpected kind {header.get('kind')!r}")
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                records.append(
                    PseudoLabelSet(
                        video_id=obj["video_id"],
                        segment_index=int(obj["segment_index"]),
                        vnm=[(int(n), float(s)) for n, s in obj["vnm"]],
                        vtm_db=[str(t) for t in obj["vtm_db"]],
                        vtm_corpus=[str(t) for t in obj["vtm_corpus"]],
                        tcl_db=[int(n) for n in obj["tcl_db"]],
                        tcl_corpus=[int(n) for n in obj["tcl_corpus"]],
                        nrl={
                            direction: [[(int(n), float(c)) for n, c in hop] for hop in hops]
                            for direction, hops in obj["nrl"].items()
                        },
                        vsm=[(int(h), float(s)) for h, s in obj["vsm"]],
                    )
                )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"{path}: malformed labels file: {exc}") from exc
    return header, records
