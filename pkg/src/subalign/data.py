"""Datasets, file ingestion, synthetic two-domain generators, screening, batching."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import as_matrix, make_rng

ROLES = ("source", "target_train", "target_test")


class DomainDataset:
    """Feature matrix with optional labels and named knowledge column groups.

    Source and target_train rows must be labeled; target_test may be
    unlabeled. Knowledge ids map to feature column index tuples.
    """

    def __init__(self, features, labels, knowledge_columns, role, feature_names=None):
        self.features = as_matrix(features, "features")
        if role not in ROLES:
            raise ValueError("role must be one of %s" % (ROLES,))
        self.role = role
        n, f = self.features.shape
        if labels is None:
            if role != "target_test":
                raise ValueError("%s rows must be labeled" % role)
            self.labels = None
        else:
            labels = np.asarray(labels, dtype=np.float64).ravel()
            if labels.size != n:
                raise ValueError("labels must have one entry per row")
            if not np.all(np.isfinite(labels)):
                raise ValueError("labels contain non-finite values")
            self.labels = labels
        self.knowledge_columns = {}
        for name, cols in dict(knowledge_columns).items():
            cols = tuple(int(c) for c in cols)
            if not cols or any(c < 0 or c >= f for c in cols):
                raise ValueError("knowledge %r has invalid columns %s" % (name, cols))
            self.knowledge_columns[name] = cols
        if feature_names is None:
            feature_names = ["f%d" % i for i in range(f)]
        if len(feature_names) != f:
            raise ValueError("feature_names must match the column count")
        self.feature_names = list(feature_names)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def class_labels(self):
        if self.labels is None:
            raise ValueError("dataset is unlabeled")
        return self.labels.astype(np.int64)

    def model_features(self):
        """Columns not claimed by any knowledge group; these feed the networks.

        Knowledge columns steer subdomain division and screening only, so the
        same matrix works for methods that ignore knowledge entirely.
        """
        used = {c for cols in self.knowledge_columns.values() for c in cols}
        keep = [i for i in range(self.n_features) if i not in used]
        if not keep:
            raise ValueError("every column is a knowledge column; nothing to model")
        return self.features[:, keep]


@dataclass
class KnowledgeSpec:
    """One knowledge feature group and how to divide on it."""

    id: str
    columns: tuple
    method: str = "dp_1d"  # or "graph"
    m: int = 4
    split_points: int = None  # dp_1d only; restricts cut positions
    kappa_quantile: float = 0.3  # graph only
    delta: float = 0.05  # screening gap threshold, nats

    def __post_init__(self):
        self.columns = tuple(int(c) for c in self.columns)
        if self.method not in ("dp_1d", "graph"):
            raise ValueError("method must be dp_1d or graph")
        if self.method == "dp_1d" and len(self.columns) != 1:
            raise ValueError("dp_1d takes exactly one column")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 < self.kappa_quantile < 1.0:
            raise ValueError("kappa_quantile must be in (0, 1)")
        if self.split_points is not None and self.split_points < self.m:
            raise ValueError("split_points must be >= m")


@dataclass
class SynthConfig:
    """Planted-subdomain two-domain generator settings.

    Each latent subdomain u gets a 1-D "phase" knowledge band, a 2-D "region"
    knowledge cluster, a core-feature cluster, and its own label rule. The
    target domain shifts each subdomain's core features and/or label boundary
    per config. shift_mode "covariate" moves the feature cluster and its label
    boundary together; "conditional" moves only the boundary, so the feature
    marginals stay put while p(y|x) changes per subdomain.

    Label rules:
      prior    - labels are Bernoulli draws with a per-subdomain rate.
      boundary - one hyperplane per subdomain through its (shifted) center
                 along a shared random normal, with a per-subdomain sign flip;
                 the target shift runs along that normal, alternating sign.
      lanes    - clusters sit on a line along core axis 1 spaced lane_gap
                 apart; the score is global_weight * axis0 plus a flipped
                 sub_weight * axis2 term, both relative to the (shifted)
                 center. The target shift runs along the lane axis in one
                 direction, so each shifted cluster lands between two source
                 clusters whose axis-2 rules disagree. Marginal matching
                 cannot tell which neighbor a shifted cluster corresponds to;
                 the planted knowledge columns can.

    Spurious shortcut columns (spurious_dims > 0) append extra model features
    sp0.. after the core block. In the source domain each one equals
    spurious_strength * (2y - 1) plus noise, a shortcut that predicts even the
    noise-flipped label. In the target domain it equals
    spurious_strength * (-1)^u plus noise, a label-independent subdomain
    offset. Both domains pool to the same symmetric two-bump marginal, so
    pooled marginal alignment sees nothing, while within any matched
    subdomain pair at least one class-conditional cloud sits on opposite
    bumps across domains.
    """

    n_subdomains: int = 4
    src_per_subdomain: int = 200
    tgt_train_per_subdomain: int = 20
    tgt_test_per_subdomain: int = 150
    n_core_features: int = 6
    label_rule: str = "boundary"  # or "prior" / "lanes"
    positive_rates: tuple = None  # prior rule, one per subdomain
    boundary_flips: tuple = None  # boundary/lanes rule signs, default alternating
    label_noise: float = 0.6
    shift: float = 1.2
    shift_mode: str = "covariate"  # or "conditional"
    cluster_spread: float = 1.0
    center_scale: float = 1.5
    lane_gap: float = 3.0  # lanes rule, center spacing along axis 1
    global_weight: float = 1.0  # lanes rule, axis-0 score weight
    sub_weight: float = 1.3  # lanes rule, axis-2 score weight
    spurious_dims: int = 0  # shortcut columns appended after the core block
    spurious_strength: float = 1.0
    spurious_noise: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.shift_mode not in ("covariate", "conditional"):
            raise ValueError("shift_mode must be covariate or conditional")
        s = self.n_subdomains
        if s < 1:
            raise ValueError("need at least one subdomain")
        if min(self.src_per_subdomain, self.tgt_train_per_subdomain,
               self.tgt_test_per_subdomain) < 1:
            raise ValueError("sample counts must be positive")
        if self.label_rule == "prior":
            if self.positive_rates is None or len(self.positive_rates) != s:
                raise ValueError("prior rule needs one positive rate per subdomain")
            rules = tuple(float(r) for r in self.positive_rates)
        elif self.label_rule in ("boundary", "lanes"):
            if self.boundary_flips is None:
                self.boundary_flips = tuple((-1.0) ** u for u in range(s))
            if len(self.boundary_flips) != s:
                raise ValueError("%s rule needs one flip per subdomain" % self.label_rule)
            rules = tuple(float(v) for v in self.boundary_flips)
            if self.label_rule == "lanes":
                if self.n_core_features < 3:
                    raise ValueError("lanes rule needs at least 3 core features")
                if self.lane_gap <= 0.0:
                    raise ValueError("lane_gap must be positive")
        else:
            raise ValueError("label_rule must be boundary, prior, or lanes")
        if self.spurious_dims < 0:
            raise ValueError("spurious_dims must be >= 0")
        if self.spurious_dims and (self.spurious_strength <= 0.0
                                   or self.spurious_noise < 0.0):
            raise ValueError("spurious columns need positive strength and "
                             "nonnegative noise")
        if s >= 2 and len(set(rules)) == 1:
            raise ValueError(
                "label rules are identical across subdomains; the benchmark "
                "would be solvable by global alignment alone"
            )


def _shift_vector(cfg, u, w):
    if cfg.label_rule == "lanes":
        delta = np.zeros(cfg.n_core_features)
        delta[1] = cfg.shift
        return delta
    return cfg.shift * ((-1.0) ** u) * w


def _synth_domain(cfg, rng, per_subdomain, centers, w, labeled, shifted):
    s = cfg.n_subdomains
    d = cfg.n_core_features
    rows = []
    labels = []
    for u in range(s):
        n_u = per_subdomain
        core = centers[u] + cfg.cluster_spread * rng.normal(size=(n_u, d))
        if shifted and cfg.shift_mode == "covariate":
            core = core + _shift_vector(cfg, u, w)
        phase = u + rng.uniform(0.0, 0.6, size=n_u)
        angle = 2.0 * np.pi * u / s
        region = np.array([np.cos(angle), np.sin(angle)]) * 3.0
        region = region + 0.15 * rng.normal(size=(n_u, 2))
        if cfg.label_rule == "prior":
            y_u = (rng.uniform(size=n_u) < cfg.positive_rates[u]).astype(float)
        elif cfg.label_rule == "lanes":
            rel = core - centers[u]
            if shifted:
                rel = rel - _shift_vector(cfg, u, w)
            score = cfg.global_weight * rel[:, 0] \
                + cfg.boundary_flips[u] * cfg.sub_weight * rel[:, 2]
            eta = cfg.label_noise * rng.normal(size=n_u)
            y_u = (score + eta > 0).astype(float)
        else:
            margin = (core - centers[u]) @ w
            if shifted:
                margin = margin - cfg.shift * ((-1.0) ** u) * float(w @ w)
            eta = cfg.label_noise * rng.normal(size=n_u)
            y_u = (cfg.boundary_flips[u] * margin + eta > 0).astype(float)
        parts = [core]
        if cfg.spurious_dims:
            if shifted:
                anchor = np.full(n_u, cfg.spurious_strength * ((-1.0) ** u))
            else:
                anchor = cfg.spurious_strength * (2.0 * y_u - 1.0)
            parts.append(anchor[:, None]
                         + cfg.spurious_noise * rng.normal(size=(n_u, cfg.spurious_dims)))
        parts += [phase, region, np.full(n_u, float(u))]
        rows.append(np.column_stack(parts))
        labels.append(y_u)
    features = np.vstack(rows)
    labels = np.concatenate(labels)
    perm = rng.permutation(features.shape[0])
    return features[perm], labels[perm] if labeled else None, labels[perm]


def synth_generate(cfg):
    """Generate (source, target_train, target_test) with planted subdomains.

    All three datasets carry knowledge columns "phase" (1-D), "region" (2-D),
    and the ground-truth "true_subdomain" id. target_test keeps its labels
    (they back evaluation) but is treated as unlabeled by training code.
    """
    rng = make_rng(cfg.seed)
    d = cfg.n_core_features
    if cfg.label_rule == "lanes":
        centers = np.zeros((cfg.n_subdomains, d))
        centers[:, 1] = cfg.lane_gap * np.arange(cfg.n_subdomains)
        w = np.zeros(d)
        w[0] = 1.0
    else:
        centers = cfg.center_scale * rng.normal(size=(cfg.n_subdomains, d))
        w = rng.normal(size=d)
        w /= np.sqrt(w @ w)

    k = cfg.spurious_dims
    names = ["f%d" % i for i in range(d)] + ["sp%d" % i for i in range(k)] \
        + ["phase", "region_x", "region_y", "true_subdomain"]
    knowledge = {
        "phase": (d + k,),
        "region": (d + k + 1, d + k + 2),
        "true_subdomain": (d + k + 3,),
    }

    src_x, src_y, _ = _synth_domain(cfg, rng, cfg.src_per_subdomain, centers, w, True, False)
    trn_x, trn_y, _ = _synth_domain(cfg, rng, cfg.tgt_train_per_subdomain, centers, w, True, True)
    tst_x, tst_y, _ = _synth_domain(cfg, rng, cfg.tgt_test_per_subdomain, centers, w, True, True)

    source = DomainDataset(src_x, src_y, knowledge, "source", names)
    target_train = DomainDataset(trn_x, trn_y, knowledge, "target_train", names)
    target_test = DomainDataset(tst_x, tst_y, knowledge, "target_test", names)
    return source, target_train, target_test


def write_dataset(dataset, path):
    """CSV with header plus a JSON schema sidecar at <path>.schema.json."""
    path = str(path)
    label_col = dataset.labels is not None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(dataset.feature_names) + (["label"] if label_col else [])
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if label_col:
                row.append(repr(float(dataset.labels[i])))
            writer.writerow(row)
    schema = {
        "role": dataset.role,
        "label": "label" if label_col else None,
        "knowledge": {
            name: [dataset.feature_names[c] for c in cols]
            for name, cols in dataset.knowledge_columns.items()
        },
    }
    with open(path + ".schema.json", "w") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return schema


def load_dataset(path, schema=None):
    """Parse a CSV per its schema (sidecar by default). Row order preserved."""
    path = str(path)
    if schema is None:
        with open(path + ".schema.json") as fh:
            schema = json.load(fh)
    role = schema.get("role")
    label_name = schema.get("label")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("%s is empty" % path) from None
        rows = list(reader)
    if label_name is not None and label_name not in header:
        raise ValueError("missing column %r in %s" % (label_name, path))
    feat_names = [h for h in header if h != label_name]
    col_of = {h: i for i, h in enumerate(header)}
    n = len(rows)
    features = np.empty((n, len(feat_names)))
    labels = np.empty(n) if label_name is not None else None
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError("row %d has %d cells, header has %d" % (r + 1, len(row), len(header)))
        for c, name in enumerate(feat_names):
            cell = row[col_of[name]]
            try:
                v = float(cell)
            except ValueError:
                raise ValueError("row %d column %r is not numeric: %r" % (r + 1, name, cell)) from None
            if not np.isfinite(v):
                raise ValueError("row %d column %r is non-finite: %r" % (r + 1, name, cell))
            features[r, c] = v
        if label_name is not None:
            cell = row[col_of[label_name]]
            if cell == "":
                raise ValueError("row %d is missing its label" % (r + 1))
            try:
                lv = float(cell)
            except ValueError:
                raise ValueError("row %d column %r is not numeric: %r"
                                 % (r + 1, label_name, cell)) from None
            if not np.isfinite(lv):
                raise ValueError("row %d column %r is non-finite: %r"
                                 % (r + 1, label_name, cell))
            labels[r] = lv
    knowledge = {}
    for kid, colnames in schema.get("knowledge", {}).items():
        missing = [c for c in colnames if c not in feat_names]
        if missing:
            raise ValueError("knowledge %r names unknown columns %s" % (kid, missing))
        knowledge[kid] = tuple(feat_names.index(c) for c in colnames)
    return DomainDataset(features, labels, knowledge, role, feat_names)


def discretize_labels(labels, bins=4):
    """Quantile-bin real labels into class ids (used where classes are required)."""
    labels = np.asarray(labels, dtype=np.float64).ravel()
    edges = np.quantile(labels, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, labels, side="right").astype(np.int64)


def _equal_frequency_bins(column, bins):
    edges = np.quantile(column, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, column, side="right")


@dataclass
class ScreenResult:
    gap: float
    passes: bool
    h_full: float
    h_ablated: float
    delta: float
    note: str = "plug-in estimate from a histogram naive-Bayes probe"


def knowledge_screen(dataset, columns, bins=10, delta=0.05, label_bins=4):
    """Estimated drop in label uncertainty contributed by the candidate columns.

    Both conditional entropies are the in-sample cross-entropy of a naive-
    Bayes probe over equal-frequency binned features: once with all columns,
    once with the candidate columns ablated. The gap is clamped at 0, and
    passes iff it exceeds delta (nats). Real-valued labels are quantile-binned
    first.
    """
    if dataset.labels is None:
        raise ValueError("screening requires labels")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    columns = [int(c) for c in columns]
    y = dataset.labels
    classes = y.astype(np.int64) if np.all(y == np.round(y)) else discretize_labels(y, label_bins)
    _, classes = np.unique(classes, return_inverse=True)
    n = classes.size
    n_classes = int(classes.max()) + 1
    binned = np.column_stack(
        [_equal_frequency_bins(dataset.features[:, c], bins) for c in range(dataset.n_features)]
    )

    prior = np.bincount(classes, minlength=n_classes).astype(np.float64) / n

    def probe_cross_entropy(cols):
        # unsmoothed per-class bin frequencies; in-sample, so the true class
        # of every row has positive likelihood
        log_post = np.tile(np.log(prior), (n, 1))
        for c in cols:
            lp = np.empty((n, n_classes))
            for k in range(n_classes):
                mask = classes == k
                counts = np.bincount(binned[mask, c], minlength=bins + 1).astype(np.float64)
                probs = counts / counts.sum()
                with np.errstate(divide="ignore"):
                    lp[:, k] = np.log(probs)[binned[:, c]]
            log_post = log_post + lp
        # normalize rows in log space
        mx = log_post.max(axis=1, keepdims=True)
        post = np.exp(log_post - mx)
        post /= post.sum(axis=1, keepdims=True)
        picked = post[np.arange(n), classes]
        return float(-np.mean(np.log(picked)))

    all_cols = list(range(dataset.n_features))
    kept = [c for c in all_cols if c not in columns]
    h_full = probe_cross_entropy(all_cols)
    h_ablated = probe_cross_entropy(kept)
    gap = max(h_ablated - h_full, 0.0)
    return ScreenResult(gap, gap > delta, h_full, h_ablated, delta)


def stratified_batches(assignment_labels, batch_size, rng):
    """Seeded epoch batches keeping every non-empty subdomain represented.

    Each subdomain's shuffled indices are dealt as evenly as possible across
    ceil(n / batch_size) batches, so every batch holds at least two members of
    each subdomain whenever sizes permit. The union covers the epoch exactly.
    """
    labels = np.asarray(assignment_labels, dtype=np.int64).ravel()
    n = labels.size
    if n == 0:
        raise ValueError("no samples to batch")
    batch_size = int(batch_size)
    groups = [np.flatnonzero(labels == j) for j in np.unique(labels)]
    min_size = 2 * len(groups)
    if batch_size < min_size:
        raise ValueError(
            "batch_size=%d is below the minimum %d (2 per each of %d non-empty "
            "subdomains)" % (batch_size, min_size, len(groups))
        )
    n_batches = max(1, int(np.ceil(n / batch_size)))
    batches = [[] for _ in range(n_batches)]
    for g in groups:
        g = g[rng.permutation(g.size)]
        base = g.size // n_batches
        extra = g.size - base * n_batches
        # rotate which batches take the remainder so small subdomains spread out
        start = int(rng.integers(n_batches))
        quotas = np.full(n_batches, base)
        for t in range(extra):
            quotas[(start + t) % n_batches] += 1
        at = 0
        for bi, q in enumerate(quotas):
            batches[bi].extend(g[at : at + q].tolist())
            at += q
    out = []
    for b in batches:
        b = np.array(b, dtype=np.int64)
        out.append(b[rng.permutation(b.size)])
    return out
