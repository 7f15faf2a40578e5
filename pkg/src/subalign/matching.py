"""Kernel two-sample machinery and subdomain matching.

Divergence between a source and a target subdomain is the class-conditional
squared kernel mean discrepancy averaged over the classes present on both
sides; matching picks, per target subdomain, the source subdomains with the
highest reciprocal divergence.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import as_matrix

EPS_DIV = 1e-12


@dataclass
class KernelConfig:
    kind: str = "gaussian"
    bandwidth: object = "median"  # positive float, or the "median" sentinel

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError("unknown kernel kind %r" % self.kind)
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive or 'median'")


def _sq_dists(x, y):
    x2 = np.sum(x * x, axis=1)[:, None]
    y2 = np.sum(y * y, axis=1)[None, :]
    return np.maximum(x2 + y2 - 2.0 * (x @ y.T), 0.0)


def gaussian_kernel(x, y, sigma):
    """K[a, b] = exp(-||x_a - y_b||^2 / (2 sigma^2))."""
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError("x and y must share the feature dimension")
    return np.exp(-_sq_dists(x, y) / (2.0 * sigma * sigma))


def median_bandwidth(x, y=None):
    """Median heuristic: sigma = sqrt(m/2), m the exact median of the nonzero
    pairwise squared distances on the pooled rows. Falls back to 1.0 when all
    rows coincide."""
    x = as_matrix(x, "x")
    pool = x if y is None else np.vstack([x, as_matrix(y, "y")])
    iu, ju = np.triu_indices(pool.shape[0], k=1)
    sq = np.sum((pool[iu] - pool[ju]) ** 2, axis=1)
    sq = sq[sq > 0]
    if sq.size == 0:
        warnings.warn("all pooled rows coincide; using bandwidth 1.0")
        return 1.0
    return float(np.sqrt(np.median(sq) / 2.0))


def resolve_bandwidth(kernel, x, y=None):
    if kernel.bandwidth == "median":
        return median_bandwidth(x, y)
    return float(kernel.bandwidth)


def mmd2(x, y, sigma):
    """Biased squared kernel mean discrepancy (V-statistic); never negative.

    mean(K_xx) + mean(K_yy) - 2 mean(K_xy); round-off below zero is clamped.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("mmd2 requires at least one row per side")
    val = (
        float(np.mean(gaussian_kernel(x, x, sigma)))
        + float(np.mean(gaussian_kernel(y, y, sigma)))
        - 2.0 * float(np.mean(gaussian_kernel(x, y, sigma)))
    )
    return max(val, 0.0)


def mmd2_grad(x, y, sigma):
    """Analytic gradient of mmd2 w.r.t. the rows of x and of y.

    d mmd2 / d x_r = -(2/(n^2 s^2)) sum_b Kxx[r,b] (x_r - x_b)
                     +(2/(n m s^2)) sum_b Kxy[r,b] (x_r - y_b)
    and symmetrically for y. Returns (value, grad_x, grad_y).
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    n, m = x.shape[0], y.shape[0]
    if n == 0 or m == 0:
        raise ValueError("mmd2 requires at least one row per side")
    s2 = float(sigma) ** 2
    kxx = gaussian_kernel(x, x, sigma)
    kyy = gaussian_kernel(y, y, sigma)
    kxy = gaussian_kernel(x, y, sigma)
    val = float(np.mean(kxx)) + float(np.mean(kyy)) - 2.0 * float(np.mean(kxy))
    gx = -(2.0 / (n * n * s2)) * (x * kxx.sum(axis=1)[:, None] - kxx @ x)
    gx += (2.0 / (n * m * s2)) * (x * kxy.sum(axis=1)[:, None] - kxy @ y)
    gy = -(2.0 / (m * m * s2)) * (y * kyy.sum(axis=1)[:, None] - kyy @ y)
    gy += (2.0 / (n * m * s2)) * (y * kxy.sum(axis=0)[:, None] - kxy.T @ x)
    if val < 0.0:
        # round-off below zero is clamped, so the reported value is constant
        return 0.0, np.zeros_like(x), np.zeros_like(y)
    return val, gx, gy


def class_conditional_mmd(src_emb, src_classes, tgt_emb, tgt_classes, sigma):
    """Uniform mean of per-class mmd2 over the classes present on both sides.

    Returns (value, shared_class_count), or None when no class is shared.
    """
    src_classes = np.asarray(src_classes).ravel()
    tgt_classes = np.asarray(tgt_classes).ravel()
    shared = sorted(set(src_classes.tolist()) & set(tgt_classes.tolist()))
    if not shared:
        return None
    vals = [
        mmd2(src_emb[src_classes == c], tgt_emb[tgt_classes == c], sigma) for c in shared
    ]
    return float(np.mean(vals)), len(shared)


def similarity(d):
    """Reciprocal divergence, guarded: 1 / max(d, 1e-12)."""
    return 1.0 / max(float(d), EPS_DIV)


@dataclass
class DivergenceTable:
    """Per (source, target) subdomain divergences; absent cells carry no value."""

    values: np.ndarray  # (m_src, m_tgt), NaN where absent
    present: np.ndarray  # bool mask
    shared_classes: np.ndarray  # int counts
    sigma: float = 1.0

    def __post_init__(self):
        vals = self.values[self.present]
        if vals.size and (np.any(~np.isfinite(vals)) or np.any(vals < 0)):
            raise ValueError("present divergences must be finite and nonnegative")

    @property
    def m_src(self):
        return self.values.shape[0]

    @property
    def m_tgt(self):
        return self.values.shape[1]


def divergence_table(src_emb, src_sub, src_classes, tgt_emb, tgt_sub, tgt_classes, sigma,
                     m_src=None, m_tgt=None):
    """Class-conditional divergence for every (source, target) subdomain pair."""
    src_emb = as_matrix(src_emb, "source embeddings")
    tgt_emb = as_matrix(tgt_emb, "target embeddings")
    src_sub = np.asarray(src_sub, dtype=np.int64).ravel()
    tgt_sub = np.asarray(tgt_sub, dtype=np.int64).ravel()
    if src_sub.size != src_emb.shape[0] or tgt_sub.size != tgt_emb.shape[0]:
        raise ValueError("subdomain labels must align with embedding rows")
    ms = int(m_src) if m_src is not None else int(src_sub.max()) + 1
    mt = int(m_tgt) if m_tgt is not None else int(tgt_sub.max()) + 1
    values = np.full((ms, mt), np.nan)
    present = np.zeros((ms, mt), dtype=bool)
    shared = np.zeros((ms, mt), dtype=np.int64)
    src_classes = np.asarray(src_classes).ravel()
    tgt_classes = np.asarray(tgt_classes).ravel()
    for i in range(ms):
        si = src_sub == i
        if not si.any():
            continue
        for j in range(mt):
            tj = tgt_sub == j
            if not tj.any():
                continue
            out = class_conditional_mmd(
                src_emb[si], src_classes[si], tgt_emb[tj], tgt_classes[tj], sigma
            )
            if out is None:
                continue
            values[i, j], shared[i, j] = max(out[0], 0.0), out[1]
            present[i, j] = True
    return DivergenceTable(values, present, shared, sigma=float(sigma))


@dataclass
class MatchMatrix:
    """Binary source-to-target relevance marks, k per target column."""

    r: np.ndarray  # (m_src, m_tgt) of 0/1
    k: int
    unmatched_targets: tuple = field(default_factory=tuple)


def match_subdomains(table, k=1):
    """Mark the k most similar present source subdomains per target column.

    Similarity is the reciprocal divergence, so the k lowest divergences win;
    ties go to the lower source index. Columns with no present cell stay all
    zero and are flagged in unmatched_targets.
    """
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= table.m_src:
        warnings.warn(
            "k=%d matches every source subdomain (m_src=%d); the alignment "
            "denominators will be empty" % (k, table.m_src)
        )
    r = np.zeros((table.m_src, table.m_tgt), dtype=np.int64)
    unmatched = []
    for j in range(table.m_tgt):
        rows = np.flatnonzero(table.present[:, j])
        if rows.size == 0:
            unmatched.append(j)
            continue
        order = rows[np.argsort(table.values[rows, j], kind="stable")]
        r[order[: min(k, rows.size)], j] = 1
    return MatchMatrix(r, k, tuple(unmatched))
