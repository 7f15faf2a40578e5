"""Knowledge-constrained subdomain division.

Two routes produce a SubdomainAssignment: an exact dynamic program over
contiguous segments of the knowledge-sorted order (1-D knowledge features,
optionally restricted to predefined split points), and a knowledge-thresholded
graph clustered by label propagation then merged down to the requested count
(multi-dimensional knowledge features).
"""

import warnings

import numpy as np

from .nn import as_matrix


class SubdomainAssignment:
    """Per-sample subdomain ids plus centroids and the within-subdomain cost.

    Centroids are recomputed from the members at construction time, and cost
    is the total squared distance of every embedding row to its subdomain's
    embedding centroid, also recomputed from scratch.
    """

    def __init__(self, labels, embeddings, knowledge, role="", knowledge_id=""):
        labels = np.asarray(labels, dtype=np.int64).ravel()
        embeddings = as_matrix(embeddings, "embeddings")
        knowledge = as_matrix(knowledge, "knowledge")
        if labels.size != embeddings.shape[0] or labels.size != knowledge.shape[0]:
            raise ValueError("labels, embeddings, and knowledge must align row-wise")
        if labels.size == 0:
            raise ValueError("empty assignment")
        ids = np.unique(labels)
        if ids[0] != 0 or ids[-1] != ids.size - 1:
            raise ValueError("subdomain ids must be 0..M_actual-1 with no gaps")
        self.labels = labels
        self.m_actual = int(ids.size)
        self.role = role
        self.knowledge_id = knowledge_id
        self.embedding_centroids = np.stack(
            [embeddings[labels == j].mean(axis=0) for j in range(self.m_actual)]
        )
        self.knowledge_centroids = np.stack(
            [knowledge[labels == j].mean(axis=0) for j in range(self.m_actual)]
        )
        cost = 0.0
        for j in range(self.m_actual):
            diff = embeddings[labels == j] - self.embedding_centroids[j]
            cost += float(np.sum(diff * diff))
        self.cost = cost
        self.n = int(labels.size)
        self.transitions = None  # set by the dynamic program route

    def sizes(self):
        return np.bincount(self.labels, minlength=self.m_actual)


def _compact_labels(raw):
    """Relabel to 0..M-1 in order of first appearance."""
    raw = np.asarray(raw, dtype=np.int64).ravel()
    mapping = {}
    out = np.empty_like(raw)
    for i, v in enumerate(raw):
        if v not in mapping:
            mapping[v] = len(mapping)
        out[i] = mapping[v]
    return out


def dp_divide_1d(embeddings, knowledge, m, split_points=None, role="", knowledge_id=""):
    """Minimum within-subdomain embedding SSE over contiguous knowledge-order segments.

    Samples are sorted by the 1-D knowledge value; segments of that order form
    the subdomains. The segment cost is the SSE about the segment's embedding
    centroid, evaluated in O(1) from prefix sums; cost ties are broken toward
    the earliest start of the later segment at every state. With split_points
    = B, cut positions are restricted to B equal-frequency boundaries of the
    sorted order (exactly equal to the exact program when every gap is a
    boundary).
    """
    embeddings = as_matrix(embeddings, "embeddings")
    knowledge = np.asarray(knowledge, dtype=np.float64).ravel()
    n = embeddings.shape[0]
    if knowledge.size != n:
        raise ValueError("knowledge must have one value per embedding row")
    if not np.all(np.isfinite(knowledge)):
        raise ValueError("knowledge contains non-finite values")
    m = int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > n:
        raise ValueError("m=%d exceeds the %d samples" % (m, n))

    order = np.argsort(knowledge, kind="stable")
    z = embeddings[order]

    # prefix sums: segment SSE = sum ||z||^2 - ||sum z||^2 / count
    psum = np.vstack([np.zeros(z.shape[1]), np.cumsum(z, axis=0)])
    psq = np.concatenate([[0.0], np.cumsum(np.sum(z * z, axis=1))])

    def seg_cost(lo, hi):
        # samples lo..hi-1 of the sorted order (0-based, half-open)
        cnt = hi - lo
        s = psum[hi] - psum[lo]
        return (psq[hi] - psq[lo]) - float(s @ s) / cnt

    # allowed prefix lengths (cut positions), always including 0 and n
    if split_points is None:
        pos = np.arange(n + 1)
    else:
        b = int(split_points)
        if b < m:
            raise ValueError("split_points=%d must be >= m=%d" % (b, m))
        bounds = {int(round(n * t / (b + 1))) for t in range(1, b + 1)}
        bounds = {v for v in bounds if 0 < v < n}
        pos = np.array(sorted({0, n} | bounds))
    t_last = pos.size - 1
    if t_last < m:
        raise ValueError("only %d feasible segments for m=%d" % (t_last, m))

    inf = np.inf
    cost = np.full((pos.size, m + 1), inf)
    choice = np.zeros((pos.size, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    transitions = 0
    for k in range(1, m + 1):
        for a in range(k, t_last + 1):
            hi = pos[a]
            lo_idx = np.arange(k - 1, a)
            cnt = hi - pos[lo_idx]
            s = psum[hi] - psum[pos[lo_idx]]
            seg = (psq[hi] - psq[pos[lo_idx]]) - np.einsum("ij,ij->i", s, s) / cnt
            vals = cost[lo_idx, k - 1] + seg
            best = int(np.argmin(vals))  # first minimum = earliest segment start
            cost[a, k] = vals[best]
            choice[a, k] = lo_idx[best]
            transitions += lo_idx.size
    if not np.isfinite(cost[t_last, m]):
        raise ValueError("no feasible division into %d segments" % m)

    sorted_labels = np.empty(n, dtype=np.int64)
    a = t_last
    for k in range(m, 0, -1):
        b_idx = choice[a, k]
        sorted_labels[pos[b_idx] : pos[a]] = k - 1
        a = b_idx
    labels = np.empty(n, dtype=np.int64)
    labels[order] = sorted_labels

    out = SubdomainAssignment(
        labels, embeddings, knowledge.reshape(-1, 1), role=role, knowledge_id=knowledge_id
    )
    out.transitions = transitions
    return out


class KnowledgeGraph:
    """Symmetric weighted graph over samples, edges gated by knowledge distance."""

    def __init__(self, n, edges, kappa):
        self.n = int(n)
        self.edges = [(int(i), int(j), float(w)) for i, j, w in edges]
        self.kappa = float(kappa)
        self.adjacency = [[] for _ in range(self.n)]
        for i, j, w in self.edges:
            if i == j:
                raise ValueError("self-edges are not allowed")
            if w <= 0:
                raise ValueError("edge weights must be positive")
            self.adjacency[i].append((j, w))
            self.adjacency[j].append((i, w))

    @property
    def n_edges(self):
        return len(self.edges)


EPS_DIST = 1e-9


def build_graph(embeddings, knowledge, kappa_quantile):
    """Edges between knowledge-similar pairs, weighted by inverse embedding distance.

    The threshold kappa is the requested quantile of all pairwise knowledge
    distances; pairs at or below it receive weight 1/dist(z_i, z_j), with
    coincident embeddings capped at 1/1e-9.
    """
    embeddings = as_matrix(embeddings, "embeddings")
    knowledge = as_matrix(knowledge, "knowledge")
    n = embeddings.shape[0]
    if knowledge.shape[0] != n:
        raise ValueError("knowledge rows must align with embeddings")
    if n < 2:
        raise ValueError("graph construction needs at least 2 samples")
    q = float(kappa_quantile)
    if not 0.0 < q < 1.0:
        raise ValueError("kappa_quantile must be in (0, 1)")

    iu, ju = np.triu_indices(n, k=1)
    dk = np.sqrt(np.sum((knowledge[iu] - knowledge[ju]) ** 2, axis=1))
    # empirical quantile as an order statistic: threshold at the round(q*P)-th
    # smallest pairwise distance, so roughly a fraction q of pairs qualifies
    # (ties at the threshold are all admitted; q near 1 admits every pair)
    rank = int(round(q * dk.size))
    kappa = float(np.sort(dk)[rank - 1]) if rank >= 1 else -1.0
    keep = dk <= kappa
    dz = np.sqrt(np.sum((embeddings[iu[keep]] - embeddings[ju[keep]]) ** 2, axis=1))
    weights = np.where(dz > 0.0, 1.0 / np.maximum(dz, EPS_DIST), 1.0 / EPS_DIST)
    edges = list(zip(iu[keep], ju[keep], weights))
    if not edges:
        warnings.warn("knowledge threshold admits no edges; every node is isolated")
    return KnowledgeGraph(n, edges, kappa)


def label_propagation(graph, rng, max_iters=100):
    """Asynchronous label propagation with a seeded visit order.

    Each node repeatedly adopts the label with the largest summed edge weight
    among its neighbors, ties toward the smallest label id; isolated nodes
    keep their own label. Returns (labels, converged).
    """
    labels = np.arange(graph.n, dtype=np.int64)
    nbr_idx = []
    nbr_w = []
    for v in range(graph.n):
        neigh = graph.adjacency[v]
        nbr_idx.append(np.array([u for u, _ in neigh], dtype=np.int64))
        nbr_w.append(np.array([w for _, w in neigh]))
    converged = False
    for _ in range(int(max_iters)):
        changed = False
        for v in rng.permutation(graph.n):
            if nbr_idx[v].size == 0:
                continue
            support = np.bincount(labels[nbr_idx[v]], weights=nbr_w[v])
            # first argmax = smallest label id among the tied maxima
            best = int(np.argmax(support))
            if best != labels[v]:
                labels[v] = best
                changed = True
        if not changed:
            converged = True
            break
    if not converged:
        warnings.warn("label propagation hit max_iters=%d before converging" % max_iters)
    return labels, converged


def merge_to_m(labels, embeddings, m, knowledge=None, role="", knowledge_id=""):
    """Merge nearest-centroid communities until at most m remain."""
    embeddings = as_matrix(embeddings, "embeddings")
    if knowledge is None:
        knowledge = embeddings
    m = int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    labels = _compact_labels(labels)
    groups = [np.flatnonzero(labels == j) for j in range(labels.max() + 1)]
    while len(groups) > m:
        cents = np.stack([embeddings[g].mean(axis=0) for g in groups])
        best = None
        for a in range(len(groups)):
            d = np.sum((cents[a + 1 :] - cents[a]) ** 2, axis=1)
            if d.size == 0:
                continue
            b = int(np.argmin(d)) + a + 1
            if best is None or d[b - a - 1] < best[0]:
                best = (float(d[b - a - 1]), a, b)
        _, a, b = best
        groups[a] = np.concatenate([groups[a], groups[b]])
        del groups[b]
    merged = np.empty(labels.size, dtype=np.int64)
    for j, g in enumerate(groups):
        merged[g] = j
    return SubdomainAssignment(
        _compact_labels(merged), embeddings, knowledge, role=role, knowledge_id=knowledge_id
    )


def normalize_knowledge(values):
    """Min-max scale each column to [0, 1]; constant columns become zeros."""
    values = as_matrix(values, "knowledge")
    lo = values.min(axis=0)
    span = values.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (values - lo) / span


def divide(dataset, spec, embeddings, rng, role=None):
    """Dispatch a dataset's knowledge feature to the matching division route."""
    embeddings = as_matrix(embeddings, "embeddings")
    if embeddings.shape[0] != dataset.n:
        raise ValueError("embeddings must align with the dataset rows")
    cols = dataset.knowledge_columns[spec.id] if spec.id in dataset.knowledge_columns else spec.columns
    knowledge = normalize_knowledge(dataset.features[:, list(cols)])
    if dataset.n == 1:
        return SubdomainAssignment(
            [0], embeddings, knowledge, role=role or dataset.role, knowledge_id=spec.id
        )
    if spec.method == "dp_1d":
        if knowledge.shape[1] != 1:
            raise ValueError("dp_1d requires exactly one knowledge column")
        return dp_divide_1d(
            embeddings,
            knowledge[:, 0],
            min(spec.m, dataset.n),
            split_points=spec.split_points,
            role=role or dataset.role,
            knowledge_id=spec.id,
        )
    if spec.method == "graph":
        graph = build_graph(embeddings, knowledge, spec.kappa_quantile)
        labels, _ = label_propagation(graph, rng)
        return merge_to_m(
            labels,
            embeddings,
            spec.m,
            knowledge=knowledge,
            role=role or dataset.role,
            knowledge_id=spec.id,
        )
    raise ValueError("unknown division method %r" % spec.method)


def assignment_rows(assignment):
    """(sample_index, subdomain_id) pairs for delimited export."""
    return [(i, int(lab)) for i, lab in enumerate(assignment.labels)]
