"""Experiment harness: baselines, knowledge-guided variants, reports.

run_experiment executes every (method, seed) cell of a comparison, evaluates
on target_test, and writes line-delimited per-run records, an aggregate CSV,
trained models, final subdomain assignments, embeddings, and summary figures
under the output directory. Seeds isolate runs completely: shuffling the seed
list reorders rows without changing any value.
"""

import dataclasses
import hashlib
import json
import os
import time
import zlib

import numpy as np

from .adaptnet import (
    TrainConfig,
    build_adaptnet,
    class_divider,
    extract,
    predict,
    save_net,
    train_adaptnet,
    train_supervised,
    _EarlyStopper,
    _make_optimizer,
)
from .data import SynthConfig, load_dataset, synth_generate
from .division import assignment_rows, divide
from .fusion import FusionNet, build_fusion, fusion_predict, save_fusion, train_fusion
from .matching import median_bandwidth, mmd2_grad
from .metrics import evaluate
from .nn import make_rng

BASE_METHODS = ("target_only", "fine_tune", "global_mmd", "categorical_sub")
SINGLE_PREFIX = "knowledge_single:"
FULL_METHOD = "knowledge_full"


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclasses.dataclass
class ExperimentConfig:
    methods: list
    seeds: list
    out_dir: str
    knowledge: list = dataclasses.field(default_factory=list)
    train: TrainConfig = None
    task: str = "classification"
    lam: float = 0.1
    embed_dim: int = 8
    hidden: tuple = (32,)
    head_hidden: tuple = (16,)
    synth: SynthConfig = None
    data_paths: dict = None

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig()
        if not self.methods:
            raise ConfigError("need at least one method")
        ids = [spec.id for spec in self.knowledge]
        if len(set(ids)) != len(ids):
            raise ConfigError("knowledge ids must be unique, got %s" % ids)
        for method in self.methods:
            if method in BASE_METHODS or method == FULL_METHOD:
                continue
            if method.startswith(SINGLE_PREFIX):
                if method[len(SINGLE_PREFIX):] not in ids:
                    raise ConfigError(
                        "%s references an unknown knowledge id (have %s)" % (method, ids)
                    )
                continue
            raise ConfigError("unknown method %r" % method)
        if len(self.methods) != len(set(self.methods)):
            raise ConfigError("methods must be unique")
        if FULL_METHOD in self.methods and len(self.knowledge) < 2:
            raise ConfigError("%s needs at least 2 knowledge specs" % FULL_METHOD)
        if not self.seeds:
            raise ConfigError("need at least one seed")
        self.seeds = [int(s) for s in self.seeds]
        if self.task not in ("classification", "regression"):
            raise ConfigError("task must be classification or regression")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if (self.synth is None) == (self.data_paths is None):
            raise ConfigError("configure exactly one of synth or data paths")
        if self.data_paths is not None:
            missing = {"source", "target_train", "target_test"} - set(self.data_paths)
            if missing:
                raise ConfigError("data paths missing %s" % sorted(missing))
        self.hidden = tuple(int(h) for h in self.hidden)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)


def config_hash(config):
    """Stable digest of everything that affects run values (not the out dir)."""
    payload = {
        "methods": list(config.methods),
        "seeds": list(config.seeds),
        "knowledge": [dataclasses.asdict(s) for s in config.knowledge],
        "train": dataclasses.asdict(config.train),
        "task": config.task,
        "lam": config.lam,
        "embed_dim": config.embed_dim,
        "hidden": list(config.hidden),
        "head_hidden": list(config.head_hidden),
        "synth": None if config.synth is None else dataclasses.asdict(config.synth),
        "data_paths": config.data_paths,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _method_rng(method, seed):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((int(seed), zlib.crc32(method.encode()))))
    )


def _seed_datasets(config, seed, loaded):
    if config.synth is not None:
        return synth_generate(dataclasses.replace(config.synth, seed=seed))
    return loaded


def train_global_mmd(net, source, target_train, cfg):
    """Joint supervised training plus lambda * whole-domain mmd2 per step.

    The kernel bandwidth is refit on the full embeddings at every epoch;
    target batches are cycled against the source batches within each epoch.
    Early stopping matches the other trainers (target_train task loss).
    """
    from .adaptnet import TrainRecord, _validation_loss, task_loss
    from .nn import mlp_backward, mlp_forward

    rng = make_rng(cfg.seed)
    opt = _make_optimizer(cfg, net.arrays())
    stopper = _EarlyStopper(net.arrays(), cfg.patience)
    src_x = source.model_features()
    tgt_x = target_train.model_features()
    log = []
    for epoch in range(cfg.epochs):
        sigma = median_bandwidth(extract(net, src_x), extract(net, tgt_x))
        s_perm = rng.permutation(src_x.shape[0])
        t_perm = rng.permutation(tgt_x.shape[0])
        s_chunks = [s_perm[i : i + cfg.batch_size]
                    for i in range(0, s_perm.size, cfg.batch_size)]
        t_chunks = [t_perm[i : i + cfg.batch_size]
                    for i in range(0, t_perm.size, cfg.batch_size)]
        task_losses = []
        mmd_vals = []
        for bi, sb in enumerate(s_chunks):
            tb = t_chunks[bi % len(t_chunks)]
            ns = sb.size
            z_s, cache_s = mlp_forward(net.extractor, src_x[sb])
            z_t, cache_t = mlp_forward(net.extractor, tgt_x[tb])
            z = np.vstack([z_s, z_t])
            y = np.concatenate([source.labels[sb], target_train.labels[tb]])
            preds, cache_h = mlp_forward(net.head, z)
            j_val, d_pred = task_loss(preds, y, net.task)
            head_grads, d_z = mlp_backward(net.head, cache_h, d_pred)
            val, g_s, g_t = mmd2_grad(z_s, z_t, sigma)
            d_zs = d_z[:ns] + net.lam * g_s
            d_zt = d_z[ns:] + net.lam * g_t
            ext_grads, _ = mlp_backward(net.extractor, cache_s, d_zs)
            ext_grads_t, _ = mlp_backward(net.extractor, cache_t, d_zt)
            grads = []
            for (dw, db), (dw2, db2) in zip(ext_grads, ext_grads_t):
                grads.append(dw + dw2)
                grads.append(db + db2)
            for dw, db in head_grads:
                grads.append(dw)
                grads.append(db)
            opt.step(grads)
            task_losses.append(j_val)
            mmd_vals.append(val)
        j_mean = float(np.mean(task_losses))
        m_mean = float(np.mean(mmd_vals))
        rec = TrainRecord(epoch, j_mean, m_mean, j_mean + net.lam * m_mean, False)
        rec.val = _validation_loss(net, target_train)
        log.append(rec)
        if stopper.update(rec.val):
            break
    stopper.restore()
    return net, log


def _new_net(config, input_dim, rng, lam, knowledge=None):
    return build_adaptnet(
        input_dim, config.embed_dim, rng, hidden=config.hidden,
        head_hidden=config.head_hidden, task=config.task, lam=lam,
        knowledge=knowledge,
    )


def _score(model, dataset):
    x = dataset.model_features()
    if isinstance(model, FusionNet):
        return fusion_predict(model, x)
    return predict(model, x)


def _evaluate_model(model, target_test, task):
    if target_test.labels is None:
        raise ValueError("target_test must be labeled for benchmark evaluation")
    scores = _score(model, target_test)
    return {rep.metric: rep.value for rep in evaluate(scores, target_test.labels, task)}


def _train_singles(config, datasets, seed, cache):
    """Per-knowledge networks for this seed, trained once and shared."""
    source, target_train, _ = datasets
    nets = []
    for spec in config.knowledge:
        key = (spec.id, seed)
        if key not in cache:
            method = SINGLE_PREFIX + spec.id
            rng = _method_rng(method, seed)
            net = _new_net(config, source.model_features().shape[1], rng,
                           config.lam, knowledge=spec)
            cfg = dataclasses.replace(config.train, seed=seed)
            _, log = train_adaptnet(net, source, target_train, cfg)
            cache[key] = (net, log)
        nets.append(cache[key])
    return nets


def run_baseline(method, datasets, config, seed, cache=None):
    """Train one method cell and return (model, log) without evaluation."""
    source, target_train, _ = datasets
    cache = cache if cache is not None else {}
    rng = _method_rng(method, seed)
    cfg = dataclasses.replace(config.train, seed=seed)
    input_dim = source.model_features().shape[1]
    if method == "target_only":
        net = _new_net(config, input_dim, rng, 0.0)
        return train_supervised(net, [target_train], cfg, val=target_train)
    if method == "fine_tune":
        net = _new_net(config, input_dim, rng, 0.0)
        train_supervised(net, [source], cfg, val=target_train)
        return train_supervised(net, [target_train], cfg, val=target_train)
    if method == "global_mmd":
        net = _new_net(config, input_dim, rng, config.lam)
        return train_global_mmd(net, source, target_train, cfg)
    if method == "categorical_sub":
        net = _new_net(config, input_dim, rng, config.lam)
        return train_adaptnet(net, source, target_train, cfg,
                              divider=class_divider(config.task))
    if method.startswith(SINGLE_PREFIX):
        spec = next(s for s in config.knowledge if s.id == method[len(SINGLE_PREFIX):])
        key = (spec.id, seed)
        if key not in cache:
            net = _new_net(config, input_dim, rng, config.lam, knowledge=spec)
            cache[key] = train_adaptnet(net, source, target_train, cfg)
        return cache[key]
    if method == FULL_METHOD:
        singles = _train_singles(config, datasets, seed, cache)
        fnet = build_fusion([net for net, _ in singles], rng,
                            head_hidden=config.head_hidden)
        return train_fusion(fnet, target_train, cfg)
    raise ConfigError("unknown method %r" % method)


def emit_embeddings(model, dataset, path):
    """Latent rows as sample_index,label,domain,z_1..z_D (label NA if absent)."""
    x = dataset.model_features()
    if isinstance(model, FusionNet):
        from .fusion import attention_weights, fuse
        from .nn import mlp_forward

        z_list = [mlp_forward(g, x)[0] for g in model.extractors]
        z = fuse(attention_weights(model, z_list), z_list)
    else:
        z = extract(model, x)
    with open(path, "w") as fh:
        fh.write("sample_index,label,domain," +
                 ",".join("z_%d" % (j + 1) for j in range(z.shape[1])) + "\n")
        for i in range(z.shape[0]):
            label = "NA" if dataset.labels is None else "%.17g" % dataset.labels[i]
            fh.write("%d,%s,%s," % (i, label, dataset.role) +
                     ",".join("%.17g" % v for v in z[i]) + "\n")
    return path


def _write_assignments(model, method, datasets, config, seed, out_dir):
    if isinstance(model, FusionNet) or (model.knowledge is None and
                                        method != "categorical_sub"):
        return
    source, target_train, _ = datasets
    rng = make_rng(seed)
    for ds, tag in ((source, "source"), (target_train, "target_train")):
        z = extract(model, ds.model_features())
        if method == "categorical_sub":
            div = class_divider(config.task)(ds, z, rng)
        else:
            div = divide(ds, model.knowledge, z, rng)
        path = os.path.join(out_dir, "assignments",
                            "%s_seed%d_%s.csv" % (method.replace(":", "_"), seed, tag))
        with open(path, "w") as fh:
            fh.write("sample_index,subdomain\n")
            for i, lab in assignment_rows(div):
                fh.write("%d,%d\n" % (i, lab))


def _save_model(model, method, config, seed, out_dir, cache):
    name = method.replace(":", "_")
    models_dir = os.path.join(out_dir, "models")
    if isinstance(model, FusionNet):
        paths = []
        for spec in config.knowledge:
            component = cache[(spec.id, seed)][0]
            p = os.path.join(models_dir, "%s_seed%d_component_%s.txt" % (name, seed, spec.id))
            save_net(component, p)
            paths.append(p)
        save_fusion(model, os.path.join(models_dir, "%s_seed%d.txt" % (name, seed)), paths)
    else:
        save_net(model, os.path.join(models_dir, "%s_seed%d.txt" % (name, seed)))


def _curve_rows(log):
    rows = []
    for rec in log:
        if hasattr(rec, "task"):
            rows.append({"epoch": rec.epoch, "task": rec.task, "sal": rec.sal,
                         "total": rec.total, "val": rec.val})
        else:
            rows.append({"epoch": rec.epoch, "task": rec.loss, "sal": 0.0,
                         "total": rec.loss, "val": rec.val})
    return rows


@dataclasses.dataclass
class RunReport:
    rows: list
    aggregates: list
    n_failures: int
    config_digest: str


def run_experiment(config, render_figures=True):
    """Execute every (method, seed) cell, write artifacts, return the report."""
    out_dir = config.out_dir
    for sub in ("", "models", "assignments", "embeddings"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    digest = config_hash(config)
    loaded = None
    if config.data_paths is not None:
        loaded = tuple(load_dataset(config.data_paths[k])
                       for k in ("source", "target_train", "target_test"))
    rows = []
    n_failures = 0
    runs_path = os.path.join(out_dir, "runs.jsonl")
    with open(runs_path, "w") as runs_fh:
        for seed in config.seeds:
            datasets = _seed_datasets(config, seed, loaded)
            cache = {}
            for method in config.methods:
                started = time.perf_counter()
                row = {"method": method, "seed": seed, "status": "ok",
                       "error": None, "metrics": {}, "epochs": 0,
                       "config_hash": digest}
                try:
                    model, log = run_baseline(method, datasets, config, seed, cache)
                    row["metrics"] = _evaluate_model(model, datasets[2], config.task)
                    row["epochs"] = len(log)
                    row["curve"] = _curve_rows(log)
                    _save_model(model, method, config, seed, out_dir, cache)
                    _write_assignments(model, method, datasets, config, seed, out_dir)
                    emit_embeddings(model, datasets[2], os.path.join(
                        out_dir, "embeddings",
                        "%s_seed%d_target_test.csv" % (method.replace(":", "_"), seed)))
                except Exception as exc:  # keep remaining cells running
                    row["status"] = "error"
                    row["error"] = "%s: %s" % (type(exc).__name__, exc)
                    n_failures += 1
                row["wall_time"] = time.perf_counter() - started
                rows.append(row)
                runs_fh.write(json.dumps(row, sort_keys=True) + "\n")
    aggregates = aggregate_rows(config.methods, rows)
    write_report(aggregates, os.path.join(out_dir, "report.csv"))
    if render_figures:
        from . import figures

        figures.render_report(config, rows, aggregates, out_dir)
    return RunReport(rows, aggregates, n_failures, digest)


def aggregate_rows(methods, rows):
    """Per-method mean and spread of every metric over the ok seeds."""
    aggregates = []
    for method in methods:
        ok = [r for r in rows if r["method"] == method and r["status"] == "ok"]
        names = sorted({m for r in ok for m in r["metrics"]})
        for metric in names:
            vals = np.array([r["metrics"][metric] for r in ok])
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            aggregates.append({"method": method, "metric": metric,
                               "mean": float(vals.mean()), "std": std,
                               "n_seeds": int(vals.size)})
    return aggregates


def write_report(aggregates, path):
    with open(path, "w") as fh:
        fh.write("method,metric,mean,std,n_seeds\n")
        for a in aggregates:
            fh.write("%s,%s,%.17g,%.17g,%d\n" % (
                a["method"], a["metric"], a["mean"], a["std"], a["n_seeds"]))
    return path
