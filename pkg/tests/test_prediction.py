import numpy as np

from amnar.graph import TaskGraph
from amnar.prediction import (longest_subsequences, merge_subsequences,
                              predict_next_actions, valid_next_actions)

# graph consistent with the documented worked example: two branches from 0,
# executed [0, 1, 8, 2, 5, 4, 5] merges to {0,1,2,4,5} with children {6, 7}
BRANCH_EDGES = [(9, 0), (0, 1), (1, 2), (2, 6), (0, 4), (4, 5), (5, 7)]


def branch_graph():
    return TaskGraph.from_edges(BRANCH_EDGES, num_classes=9, start_node=9)


def oracle_valid_next(graph, executed):
    """Exhaustive-enumeration reference: all subsequences, max-length
    connected ones, node union, successor extraction."""
    adj = graph.adjacency
    if len(executed) == 0:
        return set(graph.successors(graph.start_node))
    n = len(executed)
    best_len, best = 0, set()
    for mask in range(1, 1 << n):
        labels = [executed[i] for i in range(n) if mask >> i & 1]
        connected = all(b in adj.get(a, ()) or a in adj.get(b, ())
                        for a, b in zip(labels, labels[1:]))
        if not connected:
            continue
        if len(labels) > best_len:
            best_len, best = len(labels), {tuple(labels)}
        elif len(labels) == best_len:
            best.add(tuple(labels))
    merged = set().union(*best)
    if not merged & graph.nodes():
        return set(graph.successors(graph.start_node)) - merged
    children = set()
    for a in merged:
        children.update(adj.get(a, ()))
    return children - merged


def random_instance(rng):
    n = int(rng.integers(2, 9))
    order = rng.permutation(n)
    edges = [(int(order[i]), int(order[j]))
             for i in range(n) for j in range(i + 1, n) if rng.random() < 0.35]
    roots = {int(order[0])} | ({v for _, v in edges} ^ set(range(n)))
    edges += [(n, r) for r in sorted(roots)]
    graph = TaskGraph.from_edges(edges, num_classes=n, start_node=n)
    length = int(rng.integers(0, 9))
    executed = [int(rng.integers(n + 1, n + 3)) if rng.random() < 0.3
                else int(rng.integers(0, n)) for _ in range(length)]
    return graph, executed


def test_empty_history_seeds_from_start():
    g = branch_graph()
    assert valid_next_actions(g, []) == {0}


def test_dp_chain_with_noise():
    g = TaskGraph.from_edges([(3, 0), (0, 1), (1, 2)], num_classes=3, start_node=3)
    match = longest_subsequences(g, [0, 9, 1, 2])
    assert match.max_len == 3
    assert match.best == {(0, 1, 2)}


def test_worked_example_two_shared_subsequences():
    match = longest_subsequences(branch_graph(), [0, 1, 8, 2, 5, 4, 5])
    assert match.max_len == 3
    through_zero = {s for s in match.best if 0 in s}
    assert through_zero == {(0, 1, 2), (0, 4, 5)}
    # the bidirectional connection test also admits the backward-entered run
    assert match.best == {(0, 1, 2), (0, 4, 5), (5, 4, 5)}


def test_worked_example_merge_and_candidates():
    g = branch_graph()
    result = predict_next_actions(g, [0, 1, 8, 2, 5, 4, 5])
    assert result.executed_nodes == {0, 1, 2, 4, 5}
    assert result.candidates == {6, 7}


def test_merge_keeps_disjoint_components():
    merged = merge_subsequences({(0, 1), (4, 5)})
    assert merged == {0, 1, 4, 5}


def test_single_subsequence_merges_to_itself():
    assert merge_subsequences({(2, 3, 4)}) == {2, 3, 4}


def test_candidates_disjoint_from_executed_nodes():
    rng = np.random.default_rng(7)
    for _ in range(300):
        graph, executed = random_instance(rng)
        res = predict_next_actions(graph, executed)
        assert not res.candidates & res.executed_nodes
        for c in res.candidates:
            preds = {u for u, v in graph.edges if v == c}
            assert preds & (res.executed_nodes | {graph.start_node})


def test_unknown_labels_never_connect():
    g = TaskGraph.from_edges([(3, 0), (0, 1)], num_classes=3, start_node=3)
    match = longest_subsequences(g, [0, 7, 7, 1])
    assert match.max_len == 2
    assert match.best == {(0, 1)}


def test_all_unknown_history_reseeds_from_start():
    g = TaskGraph.from_edges([(3, 0), (0, 1)], num_classes=3, start_node=3)
    assert valid_next_actions(g, [8, 9]) == {0}


def test_dp_max_never_decreases_when_appending_candidate():
    rng = np.random.default_rng(11)
    for _ in range(200):
        graph, executed = random_instance(rng)
        res = predict_next_actions(graph, executed)
        if not executed or not res.candidates:
            continue
        before = longest_subsequences(graph, executed).max_len
        nxt = sorted(res.candidates)[0]
        after = longest_subsequences(graph, executed + [nxt]).max_len
        assert after >= before


def test_determinism_as_sets():
    rng = np.random.default_rng(13)
    graph, executed = random_instance(rng)
    a = valid_next_actions(graph, executed)
    b = valid_next_actions(graph, list(executed))
    assert a == b


def test_matches_exhaustive_oracle():
    rng = np.random.default_rng(42)
    for _ in range(400):
        graph, executed = random_instance(rng)
        assert valid_next_actions(graph, executed) == oracle_valid_next(graph, executed)
