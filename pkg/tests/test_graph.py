import json

import numpy as np
import pytest

from amnar.errors import ConfigError, InvalidNodeError
from amnar.graph import (TaskGraph, build_task_graph, graph_metrics, load_graph,
                         nondeterministic_nodes, save_graph, transition_stats)


def dfs_has_cycle(edges):
    """Recursive three-color DFS, independent of the library's traversal."""
    adj = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
    color = {}

    def visit(u):
        color[u] = "gray"
        for v in adj.get(u, ()):
            c = color.get(v)
            if c == "gray" or (c is None and visit(v)):
                return True
        color[u] = "black"
        return False

    return any(color.get(u) is None and visit(u) for u in list(adj))


def test_empty_input_gives_empty_graph():
    g = build_task_graph([])
    assert g.edges == frozenset()
    assert g.num_classes == 0


def test_hand_traced_greedy_construction():
    # [[0,1,2],[0,2,1]] with the start node prepended: class-pair weights
    # (0,1)=2 (0,2)=2 (1,2)=1 (2,1)=1; the greedy pass takes both weight-2
    # edges, then (1,2) by the lexicographic tie-break, and rejects (2,1)
    # as cycle-forming.
    g = build_task_graph([[0, 1, 2], [0, 2, 1]])
    s = g.start_node
    assert s == 3
    class_edges = {(u, v) for u, v in g.edges if u != s}
    assert class_edges == {(0, 1), (0, 2), (1, 2)}
    assert (2, 1) not in g.edges
    assert {(s, 0), (s, 1), (s, 2)} <= g.edges


def test_every_edge_has_positive_weight():
    seqs = [[0, 1, 2], [1, 2, 0]]
    g = build_task_graph(seqs)
    weights = {}
    for seq in seqs:
        full = [g.start_node] + seq
        for i in range(len(full) - 1):
            for j in range(i + 1, len(full)):
                if full[i] != full[j]:
                    weights[(full[i], full[j])] = weights.get((full[i], full[j]), 0) + 1
    assert all(weights[e] >= 1 for e in g.edges)


def test_acyclicity_on_random_sequence_sets():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 7))
        seqs = [rng.integers(0, n, size=rng.integers(1, 9)).tolist()
                for _ in range(rng.integers(1, 6))]
        g = build_task_graph(seqs)
        assert not dfs_has_cycle(g.edges)


def test_determinism():
    rng = np.random.default_rng(1)
    seqs = [rng.integers(0, 5, size=7).tolist() for _ in range(4)]
    a = build_task_graph(seqs)
    b = build_task_graph(seqs)
    assert a.edges == b.edges
    assert a.adjacency == b.adjacency


def test_successors_and_invalid_node():
    g = TaskGraph.from_edges([(0, 1), (0, 2)], num_classes=3)
    assert set(g.successors(0)) == {1, 2}
    assert g.successors(1) == ()  # sink
    with pytest.raises(InvalidNodeError):
        g.successors(7)


def test_successors_matches_edge_scan():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        order = rng.permutation(n)
        edges = [(int(order[i]), int(order[j]))
                 for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
        g = TaskGraph.from_edges(edges, num_classes=n)
        for node in range(n):
            assert set(g.successors(node)) == {v for u, v in edges if u == node}


def test_from_edges_rejects_cycles_and_self_loops():
    with pytest.raises(ConfigError):
        TaskGraph.from_edges([(0, 1), (1, 0)], num_classes=2)
    with pytest.raises(ConfigError):
        TaskGraph.from_edges([(0, 0)], num_classes=1)


# ---------------------------------------------------------------------------
# transition stats and metrics
# ---------------------------------------------------------------------------

def test_transition_single_successor():
    stats = transition_stats([[0, 1], [0, 1]])
    assert stats.probs[0][1] == 1.0
    assert stats.counts[(0, 1)] == 2


def test_transition_max_prob_55():
    # a0 followed by a1/a2/a3 at frequencies 20/25/55 -> max row prob 0.55
    seqs = [[0, 1]] * 20 + [[0, 2]] * 25 + [[0, 3]] * 55
    stats = transition_stats(seqs)
    assert max(stats.probs[0].values()) == pytest.approx(0.55)


def test_transition_rows_normalized():
    rng = np.random.default_rng(3)
    seqs = [rng.integers(0, 6, size=rng.integers(2, 10)).tolist() for _ in range(30)]
    stats = transition_stats(seqs)
    for row in stats.probs.values():
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-12)


def test_metrics_chain():
    g = TaskGraph.from_edges([(0, 1), (1, 2)], num_classes=3)
    m = graph_metrics(g, transition_stats([[0, 1, 2]]))
    assert m.non_deterministic_ratio == 0.0
    assert m.avg_valid_next == 1.0
    assert m.avg_max_transfer_prob == 1.0


def test_metrics_star():
    g = TaskGraph.from_edges([(0, 1), (0, 2), (0, 3)], num_classes=4)
    stats = transition_stats([[0, 1], [0, 2], [0, 3]])
    m = graph_metrics(g, stats)
    assert nondeterministic_nodes(g) == {1, 2, 3}
    assert m.non_deterministic_ratio == pytest.approx(3 / 4)
    assert m.avg_max_transfer_prob == pytest.approx(1 / 3)


def test_start_node_excluded_from_metrics():
    g = TaskGraph.from_edges([(3, 0), (0, 1), (0, 2)], num_classes=3, start_node=3)
    nd = nondeterministic_nodes(g)
    assert g.start_node not in nd
    assert nd == {1, 2}
    # branching at the start node itself marks its children non-deterministic
    g2 = build_task_graph([[0, 1], [0, 2]])
    assert nondeterministic_nodes(g2) == {0, 1, 2}
    assert g2.start_node not in nondeterministic_nodes(g2)


# ---------------------------------------------------------------------------
# graph file
# ---------------------------------------------------------------------------

def test_graph_file_round_trip(tmp_path):
    g = build_task_graph([[0, 1, 2], [0, 2, 1]])
    path = tmp_path / "g.json"
    save_graph(path, g)
    back = load_graph(path)
    assert back.edges == g.edges
    assert back.num_classes == g.num_classes
    assert back.start_node == g.start_node
    doc = json.loads(path.read_text())
    assert doc["edges"] == sorted(doc["edges"])  # stored lexicographically


def test_graph_file_byte_identical(tmp_path):
    g = build_task_graph([[0, 1, 2], [0, 2, 1]])
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_graph(p1, g)
    save_graph(p2, build_task_graph([[0, 1, 2], [0, 2, 1]]))
    assert p1.read_bytes() == p2.read_bytes()
