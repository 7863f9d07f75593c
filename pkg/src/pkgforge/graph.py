"""Build and query the procedural knowledge graph.

Nodes are deduplicated step clusters; directed edges carry a confidence in
[0, 1] and remember whether they came from the step database (score 1.0),
the video corpus (log min-max normalized aggregate), or both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .corpus_io import CorpusFormatError, StepDatabase, canonical_json
from .dedup import NodeAssignment, assignment_from_roots

SOURCE_DATABASE = "database"
SOURCE_CORPUS = "corpus"

DEFAULT_INSTANCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class StepNode:
    node_id: int
    members: tuple[tuple[str, int, str], ...]  # (task_id, step_index, headline)

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(sorted({m[0] for m in self.members}))


@dataclass(frozen=True)
class DirectedEdge:
    src: int
    dst: int
    score: float
    sources: tuple[str, ...]  # sorted subset of {corpus, database}


@dataclass
class ProceduralKnowledgeGraph:
    nodes: list[StepNode]
    edges: list[DirectedEdge]
    config_hash: str | None = None
    out_edges: dict[int, list[tuple[int, float]]] = field(default_factory=dict, repr=False)
    in_edges: dict[int, list[tuple[int, float]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._check()
        self._index()

    def _check(self):
        ids = [n.node_id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be dense 0..N-1 in order")
        seen = set()
        for e in self.edges:
            if e.src == e.dst:
                raise ValueError(f"self-loop on node {e.src}")
            if (e.src, e.dst) in seen:
                raise ValueError(f"duplicate edge ({e.src}, {e.dst})")
            seen.add((e.src, e.dst))
            if not (0.0 <= e.score <= 1.0):
                raise ValueError(f"edge ({e.src}, {e.dst}) score {e.score} outside [0, 1]")
            if not (0 <= e.src < len(ids) and 0 <= e.dst < len(ids)):
                raise ValueError(f"edge ({e.src}, {e.dst}) references unknown node")

    def _index(self):
        self.out_edges = {n.node_id: [] for n in self.nodes}
        self.in_edges = {n.node_id: [] for n in self.nodes}
        for e in self.edges:
            self.out_edges[e.src].append((e.dst, e.score))
            self.in_edges[e.dst].append((e.src, e.score))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def assignment(self, db: StepDatabase) -> NodeAssignment:
        """Recover the headline partition this graph was built from."""
        pos = {}
        for hidx, (ti, si) in enumerate(db.headline_index()):
            pos[(db.tasks[ti].task_id, si)] = hidx
        roots = [0] * db.num_headlines
        covered = 0
        for node in self.nodes:
            for task_id, step_index, _ in node.members:
                key = (task_id, step_index)
                if key not in pos:
                    raise ValueError(f"graph member {key} not present in step database")
                roots[pos[key]] = node.node_id
                covered += 1
        if covered != db.num_headlines:
            raise ValueError("graph members do not cover the step database")
        return assignment_from_roots(roots)


# ---------------------------------------------------------------------------
# construction


def database_transitions(db: StepDatabase, assignment: NodeAssignment) -> list[tuple[int, int]]:
    """Node pairs for each adjacent headline pair of every task, deduplicated.

    Pairs that collapse onto one node after dedup are dropped; every
    returned pair carries an implicit score of 1.0.
    """
    pairs = set()
    hidx = 0
    for task in db.tasks:
        node_ids = [int(assignment.node_of[hidx + si]) for si in range(len(task.steps))]
        hidx += len(task.steps)
        for a, b in zip(node_ids, node_ids[1:]):
            if a != b:
                pairs.add((a, b))
    return sorted(pairs)


def corpus_transitions(
    video_matches: list[list[list[tuple[int, float]]]],
    instance_threshold: float = DEFAULT_INSTANCE_THRESHOLD,
) -> dict[tuple[int, int], float]:
    """Aggregate instance scores of adjacent-segment headline transitions.

    video_matches holds, per video and per segment, the matched
    (headline_index, score) pairs. Each adjacent segment pair contributes
    score_src * score_dst for every cross-product combination with
    differing headlines. Accumulation runs in (video, segment, src index,
    dst index) order so the floating-point sums are reproducible, and pairs
    whose aggregate is not strictly above the threshold are pruned.
    """
    aggregates: dict[tuple[int, int], float] = {}
    for segments in video_matches:
        for earlier, later in zip(segments, segments[1:]):
            for hs, ss in sorted(earlier):
                for hd, sd in sorted(later):
                    if hs == hd:
                        continue
                    key = (hs, hd)
                    aggregates[key] = aggregates.get(key, 0.0) + ss * sd
    return {
        pair: total for pair, total in sorted(aggregates.items()) if total > instance_threshold
    }


def normalize_scores(aggregates: dict[tuple[int, int], float]) -> dict[tuple[int, int], float]:
    """Log min-max normalization onto [0, 1]; a single distinct value maps to 1.0."""
    if not aggregates:
        return {}
    for pair, value in aggregates.items():
        if value <= 0.0:
            raise ValueError(f"aggregate for {pair} must be positive, got {value}")
    logs = {pair: math.log(value) for pair, value in aggregates.items()}
    lo = min(logs.values())
    hi = max(logs.values())
    if lo == hi:
        return {pair: 1.0 for pair in aggregates}
    span = hi - lo
    return {pair: (lv - lo) / span for pair, lv in sorted(logs.items())}


def assemble_graph(
    db: StepDatabase,
    assignment: NodeAssignment,
    db_pairs: list[tuple[int, int]],
    corpus_scores: dict[tuple[int, int], float],
    config_hash: str | None = None,
) -> ProceduralKnowledgeGraph:
    """Merge database and corpus transitions into the final edge list.

    Corpus scores arrive per headline pair (already normalized); they are
    mapped through the node assignment here. Per ordered node pair the edge
    keeps the maximum contributing score and the union of sources.
    """
    headline_meta = []
    for ti, si in db.headline_index():
        task = db.tasks[ti]
        headline_meta.append((task.task_id, si, task.steps[si].headline_text))

    nodes = [
        StepNode(node_id=nid, members=tuple(headline_meta[h] for h in members))
        for nid, members in enumerate(assignment.members_of)
    ]

    best: dict[tuple[int, int], float] = {}
    sources: dict[tuple[int, int], set[str]] = {}
    for pair in db_pairs:
        best[pair] = 1.0
        sources.setdefault(pair, set()).add(SOURCE_DATABASE)
    for (hs, hd), score in sorted(corpus_scores.items()):
        ns, nd = int(assignment.node_of[hs]), int(assignment.node_of[hd])
        if ns == nd:
            continue
        key = (ns, nd)
        if score > best.get(key, -1.0):
            best[key] = score
        sources.setdefault(key, set()).add(SOURCE_CORPUS)

    edges = [
        DirectedEdge(src=s, dst=d, score=best[(s, d)], sources=tuple(sorted(sources[(s, d)])))
        for s, d in sorted(best)
    ]
    return ProceduralKnowledgeGraph(nodes=nodes, edges=edges, config_hash=config_hash)


def build_graph(
    db: StepDatabase,
    corpus,
    dedup_threshold: float = 0.09,
    match_threshold: float = 10.0,
    instance_threshold: float = DEFAULT_INSTANCE_THRESHOLD,
    threads: int = 1,
    config_hash: str | None = None,
) -> ProceduralKnowledgeGraph:
    """Full construction: dedup headlines, match segments, assemble edges.

    Matching runs in parallel over videos when threads > 1; the aggregation
    that follows consumes per-video results in manifest order, so the
    output is independent of the thread count.
    """
    from concurrent.futures import ThreadPoolExecutor

    from . import matcher
    from .dedup import cluster_headlines

    assignment = cluster_headlines(db.embedding_matrix(), dedup_threshold)

    def match_video(video):
        if video.segments.shape[0] == 0:
            return []
        scores = matcher.score_video(video.segments, db)
        return [
            [(h, float(row[h])) for h in matcher.matched_headlines(row, match_threshold)]
            for row in scores
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            video_matches = list(ex.map(match_video, corpus.videos))
    else:
        video_matches = [match_video(v) for v in corpus.videos]

    aggregates = corpus_transitions(video_matches, instance_threshold)
    normalized = normalize_scores(aggregates)
    db_pairs = database_transitions(db, assignment)
    return assemble_graph(db, assignment, db_pairs, normalized, config_hash=config_hash)


# ---------------------------------------------------------------------------
# queries


def khop_neighbors(
    graph: ProceduralKnowledgeGraph,
    seed_nodes,
    hops: int,
    direction: str,
) -> list[dict[int, float]]:
    """Per hop k = 1..hops, node -> best path-product confidence from the seeds.

    Hop-k confidence is the maximum, over directed paths of exactly k edges
    leaving (direction "out") or entering (direction "in") any seed, of the
    product of edge scores along the path. Nodes may reappear at several
    hop depths; paths may revisit nodes.
    """
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    if direction not in ("in", "out"):
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    adjacency = graph.out_edges if direction == "out" else graph.in_edges
    for seed in seed_nodes:
        if seed not in adjacency:
            raise ValueError(f"seed node {seed} not in graph")

    frontier = {int(s): 1.0 for s in seed_nodes}
    result: list[dict[int, float]] = []
    for _ in range(hops):
        nxt: dict[int, float] = {}
        for node, conf in frontier.items():
            for other, weight in adjacency[node]:
                cand = weight * conf
                if cand > nxt.get(other, -1.0):
                    nxt[other] = cand
        result.append(nxt)
        frontier = nxt
    return result


# ---------------------------------------------------------------------------
# serialization


def save_graph(graph: ProceduralKnowledgeGraph, path: str | Path) -> None:
    obj = {
        "config_hash": graph.config_hash,
        "nodes": [
            {
                "node_id": n.node_id,
                "members": [
                    {"task_id": t, "step_index": s, "headline": h} for t, s, h in n.members
                ],
            }
            for n in sorted(graph.nodes, key=lambda n: n.node_id)
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "score": e.score, "sources": list(e.sources)}
            for e in sorted(graph.edges, key=lambda e: (e.src, e.dst))
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj) + "\n")


def load_graph(path: str | Path) -> ProceduralKnowledgeGraph:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        nodes = [
            StepNode(
                node_id=int(n["node_id"]),
                members=tuple(
                    (m["task_id"], int(m["step_index"]), m["headline"]) for m in n["members"]
                ),
            )
            for n in obj["nodes"]
        ]
        edges = [
            DirectedEdge(
                src=int(e["src"]),
                dst=int(e["dst"]),
                score=float(e["score"]),
                sources=tuple(e["sources"]),
            )
            for e in obj["edges"]
        ]
        config_hash = obj.get("config_hash")
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"{path}: malformed graph file: {exc}") from exc
    return ProceduralKnowledgeGraph(nodes=nodes, edges=edges, config_hash=config_hash)


def graph_stats(graph: ProceduralKnowledgeGraph, bins: int = 10) -> dict:
    histogram = [0] * bins
    for e in graph.edges:
        idx = min(int(e.score * bins), bins - 1)
        histogram[idx] += 1
    return {
        "num_nodes": graph.num_nodes,
        "num_multi_member_nodes": sum(1 for n in graph.nodes if len(n.members) > 1),
        "num_edges": len(graph.edges),
        "num_database_edges": sum(1 for e in graph.edges if SOURCE_DATABASE in e.sources),
        "num_corpus_edges": sum(1 for e in graph.edges if SOURCE_CORPUS in e.sources),
        "score_histogram": histogram,
        "config_hash": graph.config_hash,
    }


def export_dot(
    graph: ProceduralKnowledgeGraph,
    around_nodes: list[int] | None = None,
    hops: int = 1,
) -> str:
    """Render the graph (or the hop-neighborhood of a node set) as DOT text."""
    if around_nodes:
        keep = set(around_nodes)
        frontier = set(around_nodes)
        for _ in range(hops):
            nxt = set()
            for node in frontier:
                nxt.update(dst for dst, _ in graph.out_edges.get(node, []))
                nxt.update(src for src, _ in graph.in_edges.get(node, []))
            nxt -= keep
            keep |= nxt
            frontier = nxt
    else:
        keep = {n.node_id for n in graph.nodes}

    lines = ["digraph pkg {", "  rankdir=LR;"]
    for node in graph.nodes:
        if node.node_id not in keep:
            continue
        label = node.members[0][2].replace('"', "'")
        if len(node.members) > 1:
            label += f" (+{len(node.members) - 1})"
        lines.append(f'  n{node.node_id} [label="{node.node_id}: {label}"];')
    for e in graph.edges:
        if e.src in keep and e.dst in keep:
            style = "solid" if SOURCE_DATABASE in e.sources else "dashed"
            lines.append(f'  n{e.src} -> n{e.dst} [label="{e.score:.3f}", style={style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
