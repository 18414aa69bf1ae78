"""Task graphs over action classes, built greedily from training sequences.

A task graph is a DAG whose edges encode valid step orderings. Construction
counts ordered label pairs (i < j, not only adjacent ones) across all
sequences, then inserts candidate edges in descending weight order,
rejecting any edge that would close a cycle. A synthetic start node is
prepended to every sequence so empty histories have successors.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .errors import ConfigError, FormatError, InvalidNodeError

GRAPH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskGraph:
    num_classes: int
    start_node: int
    edges: frozenset
    adjacency: dict

    @classmethod
    def from_edges(cls, edges, num_classes, start_node=None):
        if start_node is None:
            start_node = num_classes
        valid = set(range(num_classes)) | {start_node}
        edge_set = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u not in valid or v not in valid:
                raise InvalidNodeError(f"edge ({u}, {v}) outside class range")
            if u == v:
                raise ConfigError(f"self-loop on node {u}")
            edge_set.add((u, v))
        adjacency = {}
        for u, v in sorted(edge_set):
            adjacency.setdefault(u, []).append(v)
        adjacency = {u: tuple(vs) for u, vs in adjacency.items()}
        graph = cls(num_classes=int(num_classes), start_node=int(start_node),
                    edges=frozenset(edge_set), adjacency=adjacency)
        if _find_cycle(adjacency):
            raise ConfigError("edge set contains a cycle")
        return graph

    def successors(self, node) -> tuple:
        if node != self.start_node and not 0 <= node < self.num_classes:
            raise InvalidNodeError(f"node {node} outside class range")
        return self.adjacency.get(node, ())

    def nodes(self):
        """All node ids incident to at least one edge."""
        seen = set()
        for u, v in self.edges:
            seen.add(u)
            seen.add(v)
        return seen


@dataclass(frozen=True)
class TransitionStats:
    """Adjacent-pair transition counts and their row-normalized probabilities."""

    counts: dict
    probs: dict


@dataclass(frozen=True)
class NonDeterminismMetrics:
    non_deterministic_ratio: float
    avg_valid_next: float
    avg_max_transfer_prob: float


def _find_cycle(adjacency) -> bool:
    # iterative three-color DFS
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {}
    for root in adjacency:
        if color.get(root, WHITE) != WHITE:
            continue
        stack = [(root, iter(adjacency.get(root, ())))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                c = color.get(nxt, WHITE)
                if c == GRAY:
                    return True
                if c == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(adjacency.get(nxt, ()))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return False


def build_task_graph(sequences, num_classes=None, start_node=None) -> TaskGraph:
    """Greedy maximum-weight DAG over the label alphabet.

    Pair weights count every ordered occurrence (i < j) within a sequence,
    so transitive edges are admitted when frequent enough. Equal weights are
    broken lexicographically by (u, v), which makes the construction
    deterministic.
    """
    seqs = [[int(x) for x in seq] for seq in sequences]
    for seq in seqs:
        for label in seq:
            if label < 0:
                raise InvalidNodeError(f"negative label {label} in training sequence")
            if num_classes is not None and label >= num_classes:
                raise InvalidNodeError(f"label {label} >= num_classes {num_classes}")
    if num_classes is None:
        num_classes = 1 + max((max(s) for s in seqs if s), default=-1)
    if start_node is None:
        start_node = num_classes

    weights = Counter()
    for seq in seqs:
        full = [start_node] + seq
        for i in range(len(full) - 1):
            for j in range(i + 1, len(full)):
                if full[i] != full[j]:
                    weights[(full[i], full[j])] += 1

    adjacency: dict[int, list] = {}
    edges = []
    for (u, v), _w in sorted(weights.items(), key=lambda kv: (-kv[1], kv[0])):
        if not _reaches(adjacency, v, u):
            adjacency.setdefault(u, []).append(v)
            edges.append((u, v))
    return TaskGraph.from_edges(edges, num_classes=num_classes, start_node=start_node)


def _reaches(adjacency, src, dst) -> bool:
    if src == dst:
        return True
    stack = [src]
    seen = {src}
    while stack:
        node = stack.pop()
        for nxt in adjacency.get(node, ()):
            if nxt == dst:
                return True
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return False


def transition_stats(sequences) -> TransitionStats:
    """Counts over adjacent label pairs only, row-normalized into probabilities."""
    counts = Counter()
    for seq in sequences:
        seq = [int(x) for x in seq]
        for a, b in zip(seq, seq[1:]):
            counts[(a, b)] += 1
    rows: dict[int, dict[int, float]] = {}
    totals = Counter()
    for (a, _b), c in counts.items():
        totals[a] += c
    for (a, b), c in sorted(counts.items()):
        rows.setdefault(a, {})[b] = c / totals[a]
    return TransitionStats(counts=dict(counts), probs=rows)


def nondeterministic_nodes(graph) -> frozenset:
    """Action nodes with at least one predecessor that has multiple successors."""
    out = set()
    for u, succ in graph.adjacency.items():
        if len(succ) > 1:
            out.update(succ)
    out.discard(graph.start_node)
    return frozenset(out)


def graph_metrics(graph, stats) -> NonDeterminismMetrics:
    """Branching statistics of a task graph plus its transition probabilities.

    All three values are computed over action nodes only; the synthetic
    start node is excluded.
    """
    action_nodes = graph.nodes() - {graph.start_node}
    nondet = nondeterministic_nodes(graph)
    ratio = len(nondet) / len(action_nodes) if action_nodes else 0.0

    out_degrees = [len(graph.adjacency[u]) for u in action_nodes if graph.adjacency.get(u)]
    avg_valid_next = sum(out_degrees) / len(out_degrees) if out_degrees else 0.0

    max_probs = [max(row.values()) for row in stats.probs.values()]
    avg_max_prob = sum(max_probs) / len(max_probs) if max_probs else 0.0
    return NonDeterminismMetrics(
        non_deterministic_ratio=ratio,
        avg_valid_next=avg_valid_next,
        avg_max_transfer_prob=avg_max_prob,
    )


def save_graph(path, graph) -> None:
    doc = {
        "format_version": GRAPH_FORMAT_VERSION,
        "num_classes": graph.num_classes,
        "start_node": graph.start_node,
        "edges": sorted([u, v] for u, v in graph.edges),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_graph(path) -> TaskGraph:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(path, f"invalid JSON ({e.msg})") from e
    for key in ("format_version", "num_classes", "start_node", "edges"):
        if key not in doc:
            raise FormatError(path, f"missing field {key!r}")
    if doc["format_version"] != GRAPH_FORMAT_VERSION:
        raise FormatError(path, f"unsupported format_version {doc['format_version']}")
    return TaskGraph.from_edges(doc["edges"], num_classes=doc["num_classes"],
                                start_node=doc["start_node"])
