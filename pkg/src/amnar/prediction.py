"""Valid next-action prediction from a noisy executed-action sequence.

Given the actions executed so far (segment labels, possibly mislabeled), a
dynamic program finds the longest subsequences whose consecutive elements
are adjacent in the task graph. Their nodes are merged into the set of
actions believed to have actually happened, and the graph successors of
that set (minus the set itself) are the valid next actions.

Labels the graph does not know are tolerated: they can never connect, so
they are filtered out naturally unless nothing else matches.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LongestMatch:
    """Dynamic-programming output: per-index lengths and max-length subsequences."""

    dp: tuple
    max_len: int
    best: frozenset  # every max-length subsequence, as a tuple of labels


@dataclass(frozen=True)
class NextActionResult:
    subsequences: frozenset  # max-length subsequences found by the DP
    executed_nodes: frozenset  # merged node set across those subsequences
    candidates: frozenset  # valid next actions


def longest_subsequences(graph, executed) -> LongestMatch:
    """Longest graph-consistent subsequences of the executed labels.

    dp[i] is the length of the longest subsequence ending at index i whose
    consecutive elements are connected in the graph (an edge in either
    direction counts). All subsequences attaining dp[i] are kept, so every
    maximal subsequence survives to the merge step.
    """
    adj = graph.adjacency
    seq = [int(x) for x in executed]
    n = len(seq)
    dp = [1] * n
    subs: list[set] = [{(seq[i],)} for i in range(n)]
    for i in range(n):
        yi = seq[i]
        for j in range(i):
            yj = seq[j]
            if yi in adj.get(yj, ()) or yj in adj.get(yi, ()):
                length = dp[j] + 1
                if length > dp[i]:
                    dp[i] = length
                    subs[i] = {s + (yi,) for s in subs[j]}
                elif length == dp[i]:
                    subs[i] |= {s + (yi,) for s in subs[j]}
    if n == 0:
        return LongestMatch(dp=(), max_len=0, best=frozenset())
    max_len = max(dp)
    best = set()
    for i in range(n):
        if dp[i] == max_len:
            best |= subs[i]
    return LongestMatch(dp=tuple(dp), max_len=max_len, best=frozenset(best))


def merge_subsequences(subsequences) -> frozenset:
    """Merge max-length subsequences into one executed-node set.

    Subsequences sharing a node collapse into the same component, and
    disjoint ones are retained as well, so the fixpoint of the merge is the
    union of all nodes.
    """
    merged = set()
    for sub in subsequences:
        merged.update(sub)
    return frozenset(merged)


def predict_next_actions(graph, executed) -> NextActionResult:
    """Full pipeline: DP match, merge, then successor extraction.

    An empty history, or one in which no executed label belongs to the
    graph, is seeded from the start node's successors.
    """
    if len(executed) == 0:
        return NextActionResult(
            subsequences=frozenset(),
            executed_nodes=frozenset(),
            candidates=frozenset(graph.successors(graph.start_node)),
        )
    match = longest_subsequences(graph, executed)
    merged = merge_subsequences(match.best)
    if merged.isdisjoint(graph.nodes()):
        candidates = frozenset(graph.successors(graph.start_node)) - merged
    else:
        reachable = set()
        for node in merged:
            reachable.update(graph.adjacency.get(node, ()))
        candidates = frozenset(reachable - merged)
    return NextActionResult(
        subsequences=match.best,
        executed_nodes=merged,
        candidates=candidates,
    )


def valid_next_actions(graph, executed) -> frozenset:
    """Set of actions that may validly follow the executed sequence."""
    return predict_next_actions(graph, executed).candidates
