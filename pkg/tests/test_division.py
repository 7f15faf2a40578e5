"""Division routes against brute-force and enumeration oracles."""

import numpy as np
import pytest

from subalign.data import DomainDataset, KnowledgeSpec
from subalign.division import (
    KnowledgeGraph,
    SubdomainAssignment,
    build_graph,
    divide,
    dp_divide_1d,
    label_propagation,
    merge_to_m,
)
from subalign.nn import make_rng


def segment_sse(block):
    """Independent SSE about the mean, direct two-pass computation."""
    mu = block.mean(axis=0)
    return float(sum(float((row - mu) @ (row - mu)) for row in block))


def oracle_contiguous(embeddings, knowledge, m):
    """Enumerate every contiguous m-partition of the knowledge-sorted order.

    Minimizes cost; ties prefer the partition whose segment starts, read from
    the last segment backward, are lexicographically smallest (the dynamic
    program's earliest-cut rule).
    """
    from itertools import combinations

    order = np.argsort(knowledge, kind="stable")
    z = embeddings[order]
    n = z.shape[0]
    candidates = []
    for cuts in combinations(range(1, n), m - 1):
        bounds = (0,) + cuts + (n,)
        cost = sum(segment_sse(z[bounds[i] : bounds[i + 1]]) for i in range(m))
        starts_rev = tuple(reversed([b + 1 for b in bounds[:-1]]))
        candidates.append((cost, starts_rev, bounds))
    best_cost = min(c[0] for c in candidates)
    ties = [c for c in candidates if c[0] <= best_cost + 1e-12]
    _, _, bounds = min(ties, key=lambda c: c[1])
    labels = np.empty(n, dtype=np.int64)
    for i in range(m):
        labels[order[bounds[i] : bounds[i + 1]]] = i
    return best_cost, labels


def test_two_well_separated_clusters():
    z = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    know = np.arange(6.0)
    out = dp_divide_1d(z, know, 2)
    assert out.cost == pytest.approx(4.0, abs=1e-12)
    assert np.array_equal(out.labels, [0, 0, 0, 1, 1, 1])


def test_single_subdomain_total_sse():
    z = np.array([[0.0], [1.0], [2.0]])
    out = dp_divide_1d(z, np.arange(3.0), 1)
    assert out.cost == pytest.approx(2.0, abs=1e-12)


def test_m_equals_n_zero_cost():
    rng = make_rng(0)
    z = rng.normal(size=(5, 3))
    out = dp_divide_1d(z, rng.normal(size=5), 5)
    assert out.cost == pytest.approx(0.0, abs=1e-12)
    assert out.m_actual == 5


def test_m_larger_than_n_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        dp_divide_1d(np.zeros((2, 1)), np.arange(2.0), 3)


def test_nonfinite_knowledge_rejected():
    with pytest.raises(ValueError, match="finite"):
        dp_divide_1d(np.zeros((2, 1)), np.array([0.0, np.nan]), 1)


def test_dp_matches_bruteforce_oracle():
    rng = make_rng(42)
    for trial in range(60):
        n = int(rng.integers(4, 13))
        m = int(rng.integers(2, 5))
        if m > n:
            m = n
        d = int(rng.integers(1, 4))
        z = rng.normal(size=(n, d))
        know = rng.normal(size=n)
        out = dp_divide_1d(z, know, m)
        want_cost, want_labels = oracle_contiguous(z, know, m)
        assert out.cost == pytest.approx(want_cost, abs=1e-9)
        assert np.array_equal(out.labels, want_labels)


def test_dp_tie_rule_earliest_last_segment_start():
    # identical embeddings: every contiguous partition costs exactly 0,
    # so the tie rule alone decides; earliest cut means a singleton first segment
    z = np.zeros((4, 2))
    out = dp_divide_1d(z, np.arange(4.0), 2)
    assert out.cost == 0.0
    assert np.array_equal(out.labels, [0, 1, 1, 1])


def test_split_points_at_every_gap_equal_exact():
    rng = make_rng(7)
    for trial in range(20):
        n = int(rng.integers(5, 20))
        m = int(rng.integers(2, 5))
        z = rng.normal(size=(n, 2))
        know = rng.normal(size=n)
        exact = dp_divide_1d(z, know, m)
        approx = dp_divide_1d(z, know, m, split_points=n - 1)
        assert approx.cost == exact.cost  # same arithmetic, bit-identical
        assert np.array_equal(approx.labels, exact.labels)


def test_split_points_few_never_beat_exact():
    rng = make_rng(8)
    for trial in range(30):
        n = int(rng.integers(8, 40))
        m = int(rng.integers(2, 5))
        z = rng.normal(size=(n, 2))
        know = rng.normal(size=n)
        exact = dp_divide_1d(z, know, m)
        approx = dp_divide_1d(z, know, m, split_points=m)
        assert approx.cost >= exact.cost - 1e-12


def test_transition_counts_scale_as_documented():
    rng = make_rng(9)
    z = rng.normal(size=(60, 2))
    know = rng.normal(size=60)
    exact = dp_divide_1d(z, know, 3)
    # exact: sum_k sum_a (a-k+1) <= n^2 m
    assert exact.transitions <= 60 * 60 * 3
    approx = dp_divide_1d(z, know, 3, split_points=6)
    # split mode: at most (B+1)^2 m transitions
    assert approx.transitions <= 7 * 7 * 3
    assert approx.transitions < exact.transitions


def test_assignment_recomputes_centroids_and_cost():
    rng = make_rng(10)
    z = rng.normal(size=(9, 3))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    asg = SubdomainAssignment(labels, z, z[:, :1])
    for j in range(3):
        assert np.allclose(asg.embedding_centroids[j], z[labels == j].mean(axis=0))
    want = sum(segment_sse(z[labels == j]) for j in range(3))
    assert asg.cost == pytest.approx(want, abs=1e-9)


def test_graph_threshold_keeps_knowledge_neighbors_only():
    know = np.array([[0.0], [0.0], [100.0], [100.0]])
    z = np.arange(8.0).reshape(4, 2)
    graph = build_graph(z, know, 0.4)
    pairs = {(i, j) for i, j, _ in graph.edges}
    assert pairs == {(0, 1), (2, 3)}


def test_graph_quantile_near_one_is_complete():
    rng = make_rng(11)
    z = rng.normal(size=(6, 2))
    know = rng.normal(size=(6, 2))
    graph = build_graph(z, know, 0.999)
    assert graph.n_edges == 6 * 5 // 2


def test_graph_coincident_embeddings_capped_weight():
    z = np.array([[1.0, 2.0], [1.0, 2.0]])
    know = np.array([[0.0], [0.0]])
    graph = build_graph(z, know, 0.9)
    assert graph.n_edges == 1
    assert graph.edges[0][2] == pytest.approx(1e9)


def test_graph_edges_respect_kappa():
    rng = make_rng(12)
    for trial in range(20):
        n = int(rng.integers(4, 20))
        z = rng.normal(size=(n, 3))
        know = rng.normal(size=(n, 2))
        q = float(rng.uniform(0.1, 0.9))
        graph = build_graph(z, know, q)
        for i, j, w in graph.edges:
            dist = float(np.sqrt(np.sum((know[i] - know[j]) ** 2)))
            assert dist <= graph.kappa + 1e-12
            dz = float(np.sqrt(np.sum((z[i] - z[j]) ** 2)))
            assert w == pytest.approx(1.0 / max(dz, 1e-9))


def test_propagation_disconnected_cliques():
    edges = []
    for block in (range(3), range(3, 6)):
        block = list(block)
        for a in range(len(block)):
            for b in range(a + 1, len(block)):
                edges.append((block[a], block[b], 1.0))
    graph = KnowledgeGraph(6, edges, kappa=1.0)
    labels, converged = label_propagation(graph, make_rng(0))
    assert converged
    assert len(set(labels[:3])) == 1
    assert len(set(labels[3:])) == 1
    assert labels[0] != labels[3]


def test_propagation_isolated_nodes_stay_singletons():
    graph = KnowledgeGraph(5, [], kappa=0.0)
    labels, converged = label_propagation(graph, make_rng(1))
    assert converged
    assert len(set(labels.tolist())) == 5


def test_propagation_barbell_splits_at_bridge():
    edges = []
    for block in (range(4), range(4, 8)):
        block = list(block)
        for a in range(len(block)):
            for b in range(a + 1, len(block)):
                edges.append((block[a], block[b], 1.0))
    edges.append((0, 4, 0.01))
    graph = KnowledgeGraph(8, edges, kappa=1.0)
    for seed in range(5):
        labels, _ = label_propagation(graph, make_rng(seed))
        assert len(set(labels[:4])) == 1
        assert len(set(labels[4:])) == 1
        assert labels[0] != labels[4]
        # no node prefers the far clique: cross support is only the weak bridge
        for v in range(8):
            own = sum(w for u, w in graph.adjacency[v] if labels[u] == labels[v])
            for other in set(labels.tolist()):
                if other == labels[v]:
                    continue
                far = sum(w for u, w in graph.adjacency[v] if labels[u] == other)
                assert own > far


def test_merge_nearest_centroids():
    z = np.array([[0.0], [0.0], [1.0], [1.0], [100.0], [100.0]])
    labels = np.array([0, 0, 1, 1, 2, 2])
    out = merge_to_m(labels, z, 2)
    assert out.m_actual == 2
    assert out.labels[0] == out.labels[2]
    assert out.labels[0] != out.labels[4]


def test_merge_passthrough_and_exhaustive():
    z = np.arange(6.0).reshape(6, 1)
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert merge_to_m(labels, z, 3).m_actual == 3
    assert merge_to_m(labels, z, 5).m_actual == 3  # already below m: unchanged
    assert merge_to_m(labels, z, 1).m_actual == 1


def _toy_dataset(features, knowledge, role="source"):
    labels = np.zeros(features.shape[0])
    labels[:: 2] = 1.0
    return DomainDataset(features, labels, knowledge, role)


def test_divide_dp_recovers_hour_bands():
    rng = make_rng(13)
    hours = np.concatenate([rng.uniform(u * 6, u * 6 + 4, size=15) for u in range(4)])
    x = np.column_stack([rng.normal(size=60), hours])
    ds = _toy_dataset(x, {"hour": (1,)})
    z = np.column_stack([hours])  # embeddings follow the knowledge bands
    spec = KnowledgeSpec("hour", (1,), method="dp_1d", m=4)
    out = divide(ds, spec, z, make_rng(0))
    assert out.m_actual == 4
    order = np.argsort(hours)
    bands = out.labels[order]
    assert np.all(np.diff(bands) >= 0)  # contiguous in sorted hour order
    for u in range(4):
        segment = out.labels[u * 15 : (u + 1) * 15]
        assert len(set(segment.tolist())) == 1


def adjusted_rand_index(a, b):
    """Direct pair-counting definition."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    iu = np.triu_indices(n, 1)
    n11 = int(np.sum(same_a[iu] & same_b[iu]))
    n00 = int(np.sum(~same_a[iu] & ~same_b[iu]))
    n10 = int(np.sum(same_a[iu] & ~same_b[iu]))
    n01 = int(np.sum(~same_a[iu] & same_b[iu]))
    total = n11 + n00 + n10 + n01
    expected = (n11 + n10) * (n11 + n01) / total
    max_index = 0.5 * ((n11 + n10) + (n11 + n01))
    return (n11 - expected) / (max_index - expected)


def test_divide_graph_recovers_planted_clusters():
    rng = make_rng(14)
    truth = np.repeat([0, 1], 20)
    know = np.vstack([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 8.0])
    z = np.vstack([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 5.0])
    x = np.column_stack([z, know])
    ds = _toy_dataset(x, {"cluster": (2, 3)})
    spec = KnowledgeSpec("cluster", (2, 3), method="graph", m=2, kappa_quantile=0.3)
    out = divide(ds, spec, z, make_rng(5))
    assert adjusted_rand_index(out.labels, truth) == pytest.approx(1.0)


def test_divide_single_sample():
    ds = _toy_dataset(np.array([[1.0, 2.0]]), {"k": (1,)})
    spec = KnowledgeSpec("k", (1,), method="graph", m=3)
    out = divide(ds, spec, np.array([[0.5]]), make_rng(2))
    assert out.m_actual == 1
