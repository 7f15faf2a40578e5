"""Attentive fusion of several frozen per-knowledge extractors.

Each extractor turns a sample into one embedding; a learnable projection
scores each embedding with a sigmoid, the scores are normalized into convex
weights, and the weighted sum of embeddings feeds a small fusion head. Only
the projections and the head train; the extractors stay frozen.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .adaptnet import _EarlyStopper, _make_optimizer, load_net
from .nn import MlpParams, _sigmoid, as_matrix, init_mlp, mlp_backward, mlp_forward

_CLIP = 1e-12


class FusionNet:
    """K frozen extractors, one 1xD projection each, and a fusion head.

    For regression the head's tanh output is rescaled to the label range via
    out_center + out_scale * t; classification heads end in a sigmoid.
    """

    def __init__(self, extractors, projections, head, task="classification",
                 out_center=0.0, out_scale=1.0):
        if not extractors:
            raise ValueError("need at least one extractor")
        if task not in ("classification", "regression"):
            raise ValueError("task must be classification or regression")
        dim = extractors[0].output_dim
        for g in extractors:
            if g.output_dim != dim:
                raise ValueError("all extractors must share the embedding dimension")
        if len(projections) != len(extractors):
            raise ValueError("need exactly one projection per extractor")
        self.projections = []
        for w in projections:
            w = np.asarray(w, dtype=np.float64).reshape(1, -1)
            if w.shape[1] != dim:
                raise ValueError("projections must be 1x%d" % dim)
            self.projections.append(w)
        if head.input_dim != dim or head.output_dim != 1:
            raise ValueError("fusion head must map the embedding dimension to 1 value")
        self.extractors = list(extractors)
        self.head = head
        self.task = task
        self.out_center = float(out_center)
        self.out_scale = float(out_scale)

    @property
    def k(self):
        return len(self.extractors)

    @property
    def embedding_dim(self):
        return self.extractors[0].output_dim

    def trainable_arrays(self):
        return list(self.projections) + self.head.arrays()


def build_fusion(nets, rng, head_hidden=(16,)):
    """Fusion net over the extractors of trained per-knowledge networks."""
    if not nets:
        raise ValueError("need at least one trained network")
    task = nets[0].task
    if any(n.task != task for n in nets):
        raise ValueError("all component networks must share the task")
    dim = nets[0].embedding_dim
    bound = np.sqrt(6.0 / (dim + 1))
    projections = [rng.uniform(-bound, bound, size=(1, dim)) for _ in nets]
    out_act = "sigmoid" if task == "classification" else "tanh"
    head = init_mlp([dim, *head_hidden, 1], rng, output_activation=out_act)
    return FusionNet([n.extractor for n in nets], projections, head, task)


def attention_weights(fnet, z_list):
    """Per-sample convex weights over the K embeddings (each row sums to 1)."""
    if len(z_list) != fnet.k:
        raise ValueError("expected %d embedding blocks, got %d" % (fnet.k, len(z_list)))
    z_list = [as_matrix(z, "embeddings") for z in z_list]
    n = z_list[0].shape[0]
    for z in z_list:
        if z.shape != (n, fnet.embedding_dim):
            raise ValueError("embedding blocks must be row-aligned N x D matrices")
    scores = np.column_stack([z @ w.ravel() for z, w in zip(z_list, fnet.projections)])
    alpha = _sigmoid(scores)
    return alpha / alpha.sum(axis=1, keepdims=True)


def fuse(beta, z_list):
    """Weighted sum h = sum_i beta_i * z_i, rows kept aligned."""
    beta = as_matrix(beta, "weights")
    if beta.shape[1] != len(z_list):
        raise ValueError("one weight column per embedding block required")
    h = np.zeros_like(as_matrix(z_list[0], "embeddings"))
    for i, z in enumerate(z_list):
        h += beta[:, i : i + 1] * as_matrix(z, "embeddings")
    return h


def _forward(fnet, x):
    z_list = [mlp_forward(g, x)[0] for g in fnet.extractors]
    scores = np.column_stack([z @ w.ravel() for z, w in zip(z_list, fnet.projections)])
    alpha = _sigmoid(scores)
    ssum = alpha.sum(axis=1, keepdims=True)
    beta = alpha / ssum
    h = fuse(beta, z_list)
    out, cache_h = mlp_forward(fnet.head, h)
    return z_list, alpha, ssum, beta, h, out, cache_h


def fusion_predict(fnet, x):
    """Class-1 probability (classification) or rescaled real output."""
    out = _forward(fnet, as_matrix(x, "input"))[5][:, 0]
    if fnet.task == "classification":
        return out
    return fnet.out_center + fnet.out_scale * out


def fusion_objective(fnet, x, y):
    """Training loss and gradients for the projections and the head.

    Returns (loss, grads) with grads ordered as trainable_arrays(): the K
    projection gradients, then the head's weight/bias gradients.
    """
    x = as_matrix(x, "input")
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    if y.size != n:
        raise ValueError("labels must align with inputs")
    z_list, alpha, ssum, beta, _h, out, cache_h = _forward(fnet, x)
    if fnet.task == "classification":
        p = np.clip(out[:, 0], _CLIP, 1.0 - _CLIP)
        loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
        d_out = ((p - y) / (p * (1.0 - p)) / n).reshape(-1, 1)
    else:
        yhat = fnet.out_center + fnet.out_scale * out[:, 0]
        diff = yhat - y
        loss = float(np.mean(diff * diff))
        d_out = (2.0 * diff * fnet.out_scale / n).reshape(-1, 1)
    head_grads, d_h = mlp_backward(fnet.head, cache_h, d_out)
    # dJ/dbeta_i per sample, then back through the normalized sigmoid scores
    g_beta = np.column_stack([np.sum(d_h * z, axis=1) for z in z_list])
    d_alpha = (g_beta - np.sum(g_beta * beta, axis=1, keepdims=True)) / ssum
    d_scores = d_alpha * alpha * (1.0 - alpha)
    proj_grads = [
        (d_scores[:, i] @ z_list[i]).reshape(1, -1) for i in range(fnet.k)
    ]
    grads = proj_grads
    for dw, db in head_grads:
        grads.append(dw)
        grads.append(db)
    return loss, grads


def fusion_flatten(fnet):
    return np.concatenate([a.ravel() for a in fnet.trainable_arrays()])


def fusion_assign(fnet, vec):
    vec = np.asarray(vec, dtype=np.float64).ravel()
    at = 0
    for a in fnet.trainable_arrays():
        a[...] = vec[at : at + a.size].reshape(a.shape)
        at += a.size
    if at != vec.size:
        raise ValueError("vector has %d entries, fusion net has %d" % (vec.size, at))
    return fnet


@dataclass
class FusionRecord:
    epoch: int
    loss: float
    val: float = float("nan")


def train_fusion(fnet, target_train, cfg):
    """Fit projections and head on labeled target rows; extractors frozen.

    For regression the output scaling is pinned to the target_train label
    range before the first step. Early stopping follows cfg.patience on the
    full-set training loss, restoring the best snapshot.
    """
    if target_train.labels is None or target_train.n == 0:
        raise ValueError("fusion training needs non-empty labeled target rows")
    x = target_train.model_features()
    y = target_train.labels
    if fnet.task == "regression":
        mn, mx = float(y.min()), float(y.max())
        fnet.out_center = (mx + mn) / 2.0
        fnet.out_scale = (mx - mn) / 2.0
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = _make_optimizer(cfg, fnet.trainable_arrays())
    stopper = _EarlyStopper(fnet.trainable_arrays(), cfg.patience)
    log = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(x.shape[0])
        losses = []
        for at in range(0, perm.size, cfg.batch_size):
            batch = perm[at : at + cfg.batch_size]
            loss, grads = fusion_objective(fnet, x[batch], y[batch])
            opt.step(grads)
            losses.append(loss)
        rec = FusionRecord(epoch, float(np.mean(losses)))
        rec.val = fusion_objective(fnet, x, y)[0]
        log.append(rec)
        if stopper.update(rec.val):
            break
    stopper.restore()
    return fnet, log


FUSION_MAGIC = "subalign-fusion"
FUSION_VERSION = 1


def save_fusion(fnet, path, extractor_paths):
    """Manifest plus numeric blocks; component nets referenced by path.

    extractor_paths name the saved per-knowledge network files (one per
    extractor, in order); they are stored relative to the manifest directory.
    """
    if len(extractor_paths) != fnet.k:
        raise ValueError("need one saved component path per extractor")
    base = os.path.dirname(os.path.abspath(str(path)))
    rel = [os.path.relpath(os.path.abspath(str(p)), base) for p in extractor_paths]
    header = {
        "task": fnet.task,
        "out_center": fnet.out_center,
        "out_scale": fnet.out_scale,
        "extractor_files": rel,
        "embedding_dim": fnet.embedding_dim,
        "head": {
            "dims": [fnet.head.input_dim] + [w.shape[1] for w, _, _ in fnet.head.layers],
            "activations": [act for _, _, act in fnet.head.layers],
        },
    }
    with open(path, "w") as fh:
        fh.write("%s %d\n" % (FUSION_MAGIC, FUSION_VERSION))
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for w in fnet.projections:
            fh.write(" ".join("%.17g" % v for v in w.ravel()) + "\n")
        for w, b, _ in fnet.head.layers:
            for row in w:
                fh.write(" ".join("%.17g" % v for v in row) + "\n")
            fh.write(" ".join("%.17g" % v for v in b) + "\n")


def load_fusion(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    magic = lines[0].split()
    if magic[0] != FUSION_MAGIC or int(magic[1]) != FUSION_VERSION:
        raise ValueError("unsupported fusion file header %r" % lines[0])
    header = json.loads(lines[1])
    base = os.path.dirname(os.path.abspath(str(path)))
    nets = [load_net(os.path.join(base, rel)) for rel in header["extractor_files"]]
    at = 2
    projections = []
    for _ in nets:
        projections.append(np.array(lines[at].split(), dtype=np.float64).reshape(1, -1))
        at += 1
    dims = header["head"]["dims"]
    layers = []
    for li, act in enumerate(header["head"]["activations"]):
        w = np.empty((dims[li], dims[li + 1]))
        for r in range(dims[li]):
            w[r] = np.array(lines[at].split(), dtype=np.float64)
            at += 1
        b = np.array(lines[at].split(), dtype=np.float64)
        at += 1
        layers.append((w, b, act))
    head = MlpParams(layers)
    return FusionNet([n.extractor for n in nets], projections, head,
                     task=header["task"], out_center=header["out_center"],
                     out_scale=header["out_scale"])
