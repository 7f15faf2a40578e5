"""Per-knowledge adaptation network and its training loops.

One AdaptNet couples a shared feature extractor with a task head. Training
alternates plain task steps (warmup) with structure-aware steps: embeddings
are re-divided into subdomains per domain, source and target subdomains are
matched by class-conditional discrepancy, and each step adds the weighted
alignment ratio loss on the batch members. A separately written plain
supervised trainer provides the baselines and the lambda=0 reference.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .alignment import alignment_grad, alignment_loss
from .data import KnowledgeSpec, discretize_labels, stratified_batches
from .division import SubdomainAssignment, divide
from .matching import divergence_table, match_subdomains, median_bandwidth
from .nn import MlpParams, as_matrix, init_mlp, make_rng, mlp_backward, mlp_forward

TASKS = ("classification", "regression")


class AdaptNet:
    """Feature extractor g plus task head f, with the alignment weight."""

    def __init__(self, extractor, head, task="classification", lam=0.1, knowledge=None):
        if task not in TASKS:
            raise ValueError("task must be one of %s" % (TASKS,))
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        if extractor.output_dim != head.input_dim:
            raise ValueError(
                "extractor emits %d dims but head expects %d"
                % (extractor.output_dim, head.input_dim)
            )
        self.extractor = extractor
        self.head = head
        self.task = task
        self.lam = float(lam)
        self.knowledge = knowledge
        self.embedding_dim = extractor.output_dim

    def copy(self):
        return AdaptNet(self.extractor.copy(), self.head.copy(), self.task, self.lam,
                        self.knowledge)

    def arrays(self):
        return self.extractor.arrays() + self.head.arrays()


def build_adaptnet(input_dim, embed_dim, rng, hidden=(32,), head_hidden=(16,),
                   task="classification", lam=0.1, knowledge=None):
    """Fresh network: relu trunk, identity embedding layer, task head."""
    extractor = init_mlp([input_dim, *hidden, embed_dim], rng)
    out_dim = 2 if task == "classification" else 1
    head = init_mlp([embed_dim, *head_hidden, out_dim], rng)
    return AdaptNet(extractor, head, task=task, lam=lam, knowledge=knowledge)


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 2
    refresh_every: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adagrad"
    seed: int = 0
    match_k: int = 1
    patience: int = 50

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError("optimizer must be sgd or adagrad")
        if self.match_k < 1:
            raise ValueError("match_k must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainRecord:
    epoch: int
    task: float
    sal: float
    total: float
    degenerate: bool
    val: float = float("nan")


def format_log_line(rec):
    return "epoch=%d J=%.6f L_SAL=%.6f total=%.6f degenerate=%d" % (
        rec.epoch, rec.task, rec.sal, rec.total, int(rec.degenerate)
    )


def extract(net, x):
    """Embeddings z = g(x)."""
    return mlp_forward(net.extractor, as_matrix(x, "input"))[0]


def task_loss(predictions, labels, task):
    """(mean loss, gradient w.r.t. predictions). Classification takes logits."""
    predictions = as_matrix(predictions, "predictions")
    n = predictions.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if labels.size != n:
        raise ValueError("labels must align with predictions")
    if task == "classification":
        idx = labels.astype(np.int64)
        if idx.min() < 0 or idx.max() >= predictions.shape[1]:
            raise ValueError("class label outside the head's output range")
        shifted = predictions - predictions.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        probs = expv / expv.sum(axis=1, keepdims=True)
        picked = probs[np.arange(n), idx]
        loss = float(-np.mean(np.log(picked)))
        grad = probs.copy()
        grad[np.arange(n), idx] -= 1.0
        return loss, grad / n
    if task == "regression":
        if predictions.shape[1] != 1:
            raise ValueError("regression head must emit one value per row")
        diff = predictions[:, 0] - labels
        loss = float(np.mean(diff * diff))
        return loss, (2.0 * diff / n).reshape(-1, 1)
    raise ValueError("unknown task %r" % task)


def predict(net, x):
    """Class-1 probability (classification) or raw output (regression)."""
    out, _ = mlp_forward(net.head, extract(net, x))
    if net.task == "classification":
        shifted = out - out.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        return (expv / expv.sum(axis=1, keepdims=True))[:, 1]
    return out[:, 0]


class _Adagrad:
    def __init__(self, arrays, lr):
        self.arrays = arrays
        self.lr = lr
        self.acc = [np.zeros_like(a) for a in arrays]

    def step(self, grads):
        for a, g, acc in zip(self.arrays, grads, self.acc):
            acc += g * g
            a -= self.lr * g / (np.sqrt(acc) + 1e-10)


class _Sgd:
    def __init__(self, arrays, lr):
        self.arrays = arrays
        self.lr = lr

    def step(self, grads):
        for a, g in zip(self.arrays, grads):
            a -= self.lr * g


def _make_optimizer(cfg, arrays):
    return _Adagrad(arrays, cfg.learning_rate) if cfg.optimizer == "adagrad" else _Sgd(
        arrays, cfg.learning_rate
    )


class _EarlyStopper:
    """Keep the best parameter snapshot by validation loss, fixed patience."""

    def __init__(self, arrays, patience):
        self.arrays = arrays
        self.patience = patience
        self.best_val = np.inf
        self.best_snapshot = [a.copy() for a in arrays]
        self.bad = 0

    def update(self, val):
        if val < self.best_val:
            self.best_val = val
            self.best_snapshot = [a.copy() for a in self.arrays]
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def restore(self):
        for a, snap in zip(self.arrays, self.best_snapshot):
            a[...] = snap


def _grads_to_list(grad_pairs):
    out = []
    for dw, db in grad_pairs:
        out.append(dw)
        out.append(db)
    return out


def _class_ids(dataset, task):
    if task == "classification":
        return dataset.class_labels()
    return discretize_labels(dataset.labels, 4)


def objective_grad(net, src_x, src_y, tgt_x, tgt_y, structure=None):
    """Total objective (task + lambda * alignment) and parameter gradients.

    structure, when given, freezes the alignment ingredients: a dict with
    src_sub, tgt_sub (per-batch subdomain ids), src_cls, tgt_cls, match,
    sigma, m_src, m_tgt. Returns (total, task, sal, grads, degenerate) with
    grads ordered extractor arrays then head arrays.
    """
    ns = src_x.shape[0]
    z_s, cache_s = mlp_forward(net.extractor, src_x)
    if tgt_x is not None and tgt_x.shape[0]:
        z_t, cache_t = mlp_forward(net.extractor, tgt_x)
        z = np.vstack([z_s, z_t])
        y = np.concatenate([src_y, tgt_y])
    else:
        z_t, cache_t = None, None
        z, y = z_s, src_y
    preds, cache_h = mlp_forward(net.head, z)
    j_val, d_pred = task_loss(preds, y, net.task)
    head_grads, d_z = mlp_backward(net.head, cache_h, d_pred)
    d_zs = d_z[:ns]
    d_zt = d_z[ns:] if z_t is not None else None

    sal_val = 0.0
    degenerate = False
    if structure is not None and net.lam > 0:
        res = alignment_grad(
            z_s, structure["src_sub"], structure["src_cls"],
            z_t, structure["tgt_sub"], structure["tgt_cls"],
            structure["match"], structure["sigma"],
            m_src=structure["m_src"], m_tgt=structure["m_tgt"],
        )
        sal_val = res.value
        degenerate = res.any_degenerate
        d_zs = d_zs + net.lam * res.grad_src
        d_zt = d_zt + net.lam * res.grad_tgt

    ext_grads, _ = mlp_backward(net.extractor, cache_s, d_zs)
    if z_t is not None:
        ext_grads_t, _ = mlp_backward(net.extractor, cache_t, d_zt)
        ext_grads = [(a + c, b + d) for (a, b), (c, d) in zip(ext_grads, ext_grads_t)]
    grads = _grads_to_list(ext_grads) + _grads_to_list(head_grads)
    total = j_val + net.lam * sal_val
    return total, j_val, sal_val, grads, degenerate


def net_flatten(net):
    """All extractor then head parameters as one flat vector."""
    return np.concatenate([a.ravel() for a in net.arrays()])


def net_assign(net, vec):
    """Write a flat vector back into the network arrays, in place."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    at = 0
    for a in net.arrays():
        a[...] = vec[at : at + a.size].reshape(a.shape)
        at += a.size
    if at != vec.size:
        raise ValueError("vector has %d entries, network has %d" % (vec.size, at))
    return net


def _validation_loss(net, dataset):
    preds, _ = mlp_forward(net.head, extract(net, dataset.model_features()))
    return task_loss(preds, dataset.labels, net.task)[0]


def train_supervised(net, datasets, cfg, val=None):
    """Plain supervised training over the pooled labeled datasets.

    One shuffled pass per epoch in batch_size chunks; optional early stopping
    (and best-snapshot restore) on the validation dataset's task loss.
    """
    for ds in datasets:
        if ds.labels is None:
            raise ValueError("supervised training needs labeled datasets")
    x = np.vstack([ds.model_features() for ds in datasets])
    y = np.concatenate([ds.labels for ds in datasets])
    rng = make_rng(cfg.seed)
    opt = _make_optimizer(cfg, net.arrays())
    stopper = _EarlyStopper(net.arrays(), cfg.patience) if val is not None else None
    log = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(x.shape[0])
        losses = []
        for at in range(0, perm.size, cfg.batch_size):
            batch = perm[at : at + cfg.batch_size]
            _, j_val, _, grads, _ = objective_grad(net, x[batch], y[batch], None, None)
            opt.step(grads)
            losses.append(j_val)
        rec = TrainRecord(epoch, float(np.mean(losses)), 0.0, float(np.mean(losses)), False)
        if stopper is not None:
            rec.val = _validation_loss(net, val)
            log.append(rec)
            if stopper.update(rec.val):
                break
        else:
            log.append(rec)
    if stopper is not None:
        stopper.restore()
    return net, log


def _default_divider(spec):
    def divide_fn(dataset, embeddings, rng):
        return divide(dataset, spec, embeddings, rng)

    return divide_fn


def class_divider(task):
    """Divider with subdomains = task classes, no knowledge constraint."""

    def divide_fn(dataset, embeddings, rng):
        if task == "classification":
            labels = dataset.class_labels()
        else:
            labels = discretize_labels(dataset.labels, 4)
        _, compact = np.unique(labels, return_inverse=True)
        return SubdomainAssignment(compact, embeddings, embeddings, role=dataset.role,
                                   knowledge_id="class")

    return divide_fn


def _refresh_structure(net, source, target_train, cfg, rng, divider):
    z_src = extract(net, source.model_features())
    z_tgt = extract(net, target_train.model_features())
    div_src = divider(source, z_src, rng)
    div_tgt = divider(target_train, z_tgt, rng)
    sigma = median_bandwidth(z_src, z_tgt)
    src_cls = _class_ids(source, net.task)
    tgt_cls = _class_ids(target_train, net.task)
    table = divergence_table(
        z_src, div_src.labels, src_cls, z_tgt, div_tgt.labels, tgt_cls, sigma,
        m_src=div_src.m_actual, m_tgt=div_tgt.m_actual,
    )
    if not table.present.any():
        raise RuntimeError(
            "degenerate subdomain structure: no (source, target) subdomain pair "
            "shares a class (source sizes %s, target sizes %s); alignment has "
            "nothing to match" % (div_src.sizes().tolist(), div_tgt.sizes().tolist())
        )
    match = match_subdomains(table, cfg.match_k)
    return {
        "div_src": div_src,
        "div_tgt": div_tgt,
        "sigma": sigma,
        "match": match,
        "src_cls": src_cls,
        "tgt_cls": tgt_cls,
    }


def _epoch_full_sal(net, source, target_train, structure):
    z_src = extract(net, source.model_features())
    z_tgt = extract(net, target_train.model_features())
    table = divergence_table(
        z_src, structure["div_src"].labels, structure["src_cls"],
        z_tgt, structure["div_tgt"].labels, structure["tgt_cls"],
        structure["sigma"],
        m_src=structure["div_src"].m_actual, m_tgt=structure["div_tgt"].m_actual,
    )
    res = alignment_loss(table, structure["match"])
    return res.value, res.any_degenerate


def _target_batches(labels, batch_size, rng):
    groups = np.unique(labels).size
    n = labels.size
    size = min(batch_size, n)
    if size >= 2 * groups:
        return stratified_batches(labels, size, rng)
    return [rng.permutation(n)]


def train_adaptnet(net, source, target_train, cfg, divider=None):
    """Two-domain training: task loss plus the weighted alignment ratio.

    Warmup epochs run task-only steps on the pooled data. Afterwards the
    subdomain structure (division per domain, bandwidth, divergence table,
    match marks) is refreshed every refresh_every epochs, and every step pairs
    a stratified source batch with a stratified labeled-target batch, adding
    lambda times the batch alignment loss. With lambda=0 the loop reduces to
    plain pooled supervised training (same seed, same draws). Early stopping
    tracks the target_train task loss with the configured patience.
    """
    if source.labels is None or target_train.labels is None:
        raise ValueError("both training datasets must be labeled")
    if divider is None:
        if net.knowledge is None:
            raise ValueError("net has no knowledge spec; pass a divider or a spec")
        for ds, name in ((source, "source"), (target_train, "target_train")):
            if net.knowledge.id not in ds.knowledge_columns:
                raise ValueError("%s lacks knowledge columns %r" % (name, net.knowledge.id))
        divider = _default_divider(net.knowledge)
    rng = make_rng(cfg.seed)
    opt = _make_optimizer(cfg, net.arrays())
    stopper = _EarlyStopper(net.arrays(), cfg.patience)
    src_x = source.model_features()
    tgt_x = target_train.model_features()
    pooled_x = np.vstack([src_x, tgt_x])
    pooled_y = np.concatenate([source.labels, target_train.labels])
    structure = None
    log = []
    for epoch in range(cfg.epochs):
        plain = net.lam == 0.0 or epoch < cfg.warmup_epochs
        if plain:
            perm = rng.permutation(pooled_x.shape[0])
            losses = []
            for at in range(0, perm.size, cfg.batch_size):
                batch = perm[at : at + cfg.batch_size]
                _, j_val, _, grads, _ = objective_grad(
                    net, pooled_x[batch], pooled_y[batch], None, None
                )
                opt.step(grads)
                losses.append(j_val)
            rec = TrainRecord(epoch, float(np.mean(losses)), 0.0, float(np.mean(losses)), False)
        else:
            if structure is None or (epoch - cfg.warmup_epochs) % cfg.refresh_every == 0:
                structure = _refresh_structure(net, source, target_train, cfg, rng, divider)
            src_batches = stratified_batches(structure["div_src"].labels, cfg.batch_size, rng)
            tgt_batches = _target_batches(structure["div_tgt"].labels, cfg.batch_size, rng)
            losses = []
            degenerate = False
            for bi, sb in enumerate(src_batches):
                tb = tgt_batches[bi % len(tgt_batches)]
                step_structure = {
                    "src_sub": structure["div_src"].labels[sb],
                    "tgt_sub": structure["div_tgt"].labels[tb],
                    "src_cls": structure["src_cls"][sb],
                    "tgt_cls": structure["tgt_cls"][tb],
                    "match": structure["match"],
                    "sigma": structure["sigma"],
                    "m_src": structure["div_src"].m_actual,
                    "m_tgt": structure["div_tgt"].m_actual,
                }
                _, j_val, _, grads, step_degen = objective_grad(
                    net, src_x[sb], source.labels[sb],
                    tgt_x[tb], target_train.labels[tb],
                    structure=step_structure,
                )
                opt.step(grads)
                losses.append(j_val)
                degenerate = degenerate or step_degen
            sal_full, sal_degen = _epoch_full_sal(net, source, target_train, structure)
            j_mean = float(np.mean(losses))
            rec = TrainRecord(epoch, j_mean, sal_full, j_mean + net.lam * sal_full,
                              degenerate or sal_degen)
        rec.val = _validation_loss(net, target_train)
        log.append(rec)
        if stopper.update(rec.val):
            break
    stopper.restore()
    return net, log


FORMAT_VERSION = 1
_MAGIC = "subalign-net"


def _mlp_header(params):
    return {
        "dims": [params.input_dim] + [w.shape[1] for w, _, _ in params.layers],
        "activations": [act for _, _, act in params.layers],
    }


def _write_mlp(fh, params):
    for w, b, _ in params.layers:
        for row in w:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")
        fh.write(" ".join("%.17g" % v for v in b) + "\n")


def _read_mlp(lines, at, header):
    dims = header["dims"]
    layers = []
    for li, act in enumerate(header["activations"]):
        fan_in, fan_out = dims[li], dims[li + 1]
        w = np.empty((fan_in, fan_out))
        for r in range(fan_in):
            w[r] = np.array(lines[at].split(), dtype=np.float64)
            at += 1
        b = np.array(lines[at].split(), dtype=np.float64)
        at += 1
        layers.append((w, b, act))
    return MlpParams(layers), at


def save_net(net, path):
    """Versioned flat text layout: magic+version, JSON header, numeric rows."""
    header = {
        "task": net.task,
        "lambda": net.lam,
        "embedding_dim": net.embedding_dim,
        "knowledge": None if net.knowledge is None else {
            "id": net.knowledge.id,
            "columns": list(net.knowledge.columns),
            "method": net.knowledge.method,
            "m": net.knowledge.m,
            "split_points": net.knowledge.split_points,
            "kappa_quantile": net.knowledge.kappa_quantile,
            "delta": net.knowledge.delta,
        },
        "extractor": _mlp_header(net.extractor),
        "head": _mlp_header(net.head),
    }
    with open(path, "w") as fh:
        fh.write("%s %d\n" % (_MAGIC, FORMAT_VERSION))
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        _write_mlp(fh, net.extractor)
        _write_mlp(fh, net.head)


def load_net(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    magic = lines[0].split()
    if magic[0] != _MAGIC or int(magic[1]) != FORMAT_VERSION:
        raise ValueError("unsupported model file header %r" % lines[0])
    header = json.loads(lines[1])
    extractor, at = _read_mlp(lines, 2, header["extractor"])
    head, _ = _read_mlp(lines, at, header["head"])
    spec = None
    if header["knowledge"] is not None:
        k = header["knowledge"]
        spec = KnowledgeSpec(k["id"], tuple(k["columns"]), method=k["method"], m=k["m"],
                             split_points=k["split_points"],
                             kappa_quantile=k["kappa_quantile"], delta=k["delta"])
    return AdaptNet(extractor, head, task=header["task"], lam=header["lambda"],
                    knowledge=spec)
