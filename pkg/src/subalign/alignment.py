"""Subdomain-aware alignment: matched-over-unmatched divergence ratios.

For each target subdomain, the loss term is the sum of its matched source
divergences divided by the sum of its unmatched ones; minimizing it pulls
matched subdomain pairs together while pushing unmatched pairs apart. The
gradient w.r.t. the contributing embedding rows is derived by hand through
the quotient rule and the per-class kernel discrepancy gradients.
"""

from dataclasses import dataclass

import numpy as np

from .matching import divergence_table, mmd2_grad
from .nn import as_matrix

EPS_DEN = 1e-8


@dataclass
class AlignmentLossResult:
    value: float
    numerators: np.ndarray  # per target subdomain
    denominators: np.ndarray  # raw unmatched sums, before the guard
    degenerate: np.ndarray  # per target: guard engaged while matched cells exist
    grad_src: np.ndarray = None
    grad_tgt: np.ndarray = None

    @property
    def any_degenerate(self):
        return bool(self.degenerate.any())


def alignment_loss(table, match):
    """Evaluate the ratio loss on a divergence table and its match marks.

    Absent cells are excluded from both sums. A target column with no matched
    cell contributes 0. An empty or near-zero unmatched sum falls back to the
    1e-8 guard and raises the column's degeneracy flag.
    """
    r = np.asarray(match.r)
    if r.shape != table.values.shape:
        raise ValueError("match matrix shape %s does not fit table %s"
                         % (r.shape, table.values.shape))
    mt = table.m_tgt
    nums = np.zeros(mt)
    dens = np.zeros(mt)
    degenerate = np.zeros(mt, dtype=bool)
    value = 0.0
    for j in range(mt):
        present = table.present[:, j]
        matched = present & (r[:, j] == 1)
        unmatched = present & (r[:, j] == 0)
        if not matched.any():
            continue
        num = float(table.values[matched, j].sum())
        den = float(table.values[unmatched, j].sum()) if unmatched.any() else 0.0
        nums[j] = num
        dens[j] = den
        if den < EPS_DEN:
            degenerate[j] = True
        value += num / max(den, EPS_DEN)
    return AlignmentLossResult(value, nums, dens, degenerate)


def alignment_grad(src_emb, src_sub, src_classes, tgt_emb, tgt_sub, tgt_classes,
                   match, sigma, m_src=None, m_tgt=None):
    """Loss value and its gradient w.r.t. every source and target embedding row.

    The kernel bandwidth is treated as a constant. Where the unmatched sum has
    fallen to the guard, its branch of the quotient rule is dropped (the guard
    is locally constant). Returns an AlignmentLossResult with grads populated.
    """
    src_emb = as_matrix(src_emb, "source embeddings")
    tgt_emb = as_matrix(tgt_emb, "target embeddings")
    src_sub = np.asarray(src_sub, dtype=np.int64).ravel()
    tgt_sub = np.asarray(tgt_sub, dtype=np.int64).ravel()
    src_classes = np.asarray(src_classes).ravel()
    tgt_classes = np.asarray(tgt_classes).ravel()
    for name, labs, emb in (
        ("source", src_sub, src_emb),
        ("target", tgt_sub, tgt_emb),
    ):
        if labs.size != emb.shape[0]:
            raise ValueError("%s subdomain labels do not align with embeddings" % name)
    if src_classes.size != src_emb.shape[0] or tgt_classes.size != tgt_emb.shape[0]:
        raise ValueError("class labels do not align with embeddings")

    r = np.asarray(match.r)
    ms = int(m_src) if m_src is not None else r.shape[0]
    mt = int(m_tgt) if m_tgt is not None else r.shape[1]
    if r.shape != (ms, mt):
        raise ValueError("match matrix shape %s does not fit (%d, %d)" % (r.shape, ms, mt))

    table = divergence_table(
        src_emb, src_sub, src_classes, tgt_emb, tgt_sub, tgt_classes, sigma,
        m_src=ms, m_tgt=mt,
    )
    base = alignment_loss(table, match)

    # d value / d cell(i, j), then chain through each cell's per-class pieces
    coeff = np.zeros((ms, mt))
    for j in range(mt):
        present = table.present[:, j]
        matched = present & (r[:, j] == 1)
        if not matched.any():
            continue
        den = max(base.denominators[j], EPS_DEN)
        coeff[matched, j] = 1.0 / den
        if base.denominators[j] >= EPS_DEN:
            unmatched = present & (r[:, j] == 0)
            coeff[unmatched, j] = -base.numerators[j] / (den * den)

    grad_src = np.zeros_like(src_emb)
    grad_tgt = np.zeros_like(tgt_emb)
    for i in range(ms):
        si = np.flatnonzero(src_sub == i)
        if si.size == 0:
            continue
        for j in range(mt):
            c_ij = coeff[i, j]
            if c_ij == 0.0 or not table.present[i, j]:
                continue
            tj = np.flatnonzero(tgt_sub == j)
            shared = sorted(
                set(src_classes[si].tolist()) & set(tgt_classes[tj].tolist())
            )
            w = c_ij / len(shared)
            for c in shared:
                sic = si[src_classes[si] == c]
                tjc = tj[tgt_classes[tj] == c]
                val, gx, gy = mmd2_grad(src_emb[sic], tgt_emb[tjc], sigma)
                grad_src[sic] += w * gx
                grad_tgt[tjc] += w * gy
    base.grad_src = grad_src
    base.grad_tgt = grad_tgt
    return base
