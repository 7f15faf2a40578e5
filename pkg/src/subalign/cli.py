"""Command-line front end.

Subcommands: synth (generate benchmark datasets), screen (knowledge column
screening), divide (export subdomain assignments), train (one method cell),
bench (full comparison), dump-embeddings (latent rows for a trained model).
Exit codes: 0 success, 1 any run failure, 2 configuration error.
"""

import argparse
import dataclasses
import json
import os
import sys

from .adaptnet import TrainConfig, load_net
from .bench import (
    ConfigError,
    ExperimentConfig,
    emit_embeddings,
    run_experiment,
)
from .data import (
    KnowledgeSpec,
    SynthConfig,
    knowledge_screen,
    load_dataset,
    synth_generate,
    write_dataset,
)
from .division import assignment_rows, divide
from .fusion import load_fusion
from .nn import make_rng


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc))
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (path, exc))


def _from_dict(cls, payload, what):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError("%s has unknown keys %s (allowed: %s)"
                          % (what, sorted(unknown), sorted(allowed)))
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError("invalid %s: %s" % (what, exc))


def parse_knowledge_entry(entry):
    entry = dict(entry)
    entry.setdefault("columns", (0,))
    if "id" not in entry:
        raise ConfigError("knowledge entries need an id")
    return _from_dict(KnowledgeSpec, entry, "knowledge spec %r" % entry.get("id"))


def parse_experiment_config(payload, out_dir):
    payload = dict(payload)
    knowledge = [parse_knowledge_entry(e) for e in payload.pop("knowledge", [])]
    train = _from_dict(TrainConfig, payload.pop("train", {}), "train config")
    synth = payload.pop("synth", None)
    if synth is not None:
        synth = _from_dict(SynthConfig, synth, "synth config")
    data_paths = payload.pop("data", None)
    base = {
        "methods": payload.pop("methods", None) or [],
        "seeds": payload.pop("seeds", None) or [],
        "out_dir": out_dir,
        "knowledge": knowledge,
        "train": train,
        "synth": synth,
        "data_paths": data_paths,
    }
    for key in ("task", "lam", "embed_dim", "hidden", "head_hidden"):
        if key in payload:
            base[key] = payload.pop(key)
    if payload:
        raise ConfigError("unknown experiment config keys %s" % sorted(payload))
    try:
        return ExperimentConfig(**base)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("invalid experiment config: %s" % exc)


def cmd_synth(args):
    payload = _read_json(args.config) if args.config else {}
    cfg = _from_dict(SynthConfig, payload, "synth config")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    source, target_train, target_test = synth_generate(cfg)
    for name, ds in (("source", source), ("target_train", target_train),
                     ("target_test", target_test)):
        path = os.path.join(args.out, name + ".csv")
        write_dataset(ds, path)
        print("wrote %s (%d rows)" % (path, ds.n))
    return 0


def cmd_screen(args):
    dataset = load_dataset(args.data)
    payload = _read_json(args.config) if args.config else {}
    entries = payload.get("knowledge")
    if entries:
        specs = [parse_knowledge_entry(e) for e in entries]
        targets = [(s.id, s.delta) for s in specs]
    else:
        targets = [(kid, args.delta) for kid in sorted(dataset.knowledge_columns)]
    if not targets:
        raise ConfigError("dataset declares no knowledge columns and none configured")
    lines = []
    for kid, delta in targets:
        if kid not in dataset.knowledge_columns:
            raise ConfigError("dataset has no knowledge group %r" % kid)
        res = knowledge_screen(dataset, dataset.knowledge_columns[kid], delta=delta)
        lines.append((kid, res))
        print("%s: gap=%.6f nats, threshold=%.6f, passes=%s"
              % (kid, res.gap, res.delta, res.passes))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("knowledge,gap,threshold,passes\n")
            for kid, res in lines:
                fh.write("%s,%.17g,%.17g,%d\n" % (kid, res.gap, res.delta, res.passes))
        print("wrote %s" % args.out)
    return 0


def cmd_divide(args):
    dataset = load_dataset(args.data)
    payload = _read_json(args.config) if args.config else {}
    entries = {e["id"]: e for e in payload.get("knowledge", []) if "id" in e}
    entry = entries.get(args.knowledge_id, {"id": args.knowledge_id})
    spec = parse_knowledge_entry(entry)
    if spec.id not in dataset.knowledge_columns:
        raise ConfigError("dataset has no knowledge group %r" % spec.id)
    if args.model:
        from .adaptnet import extract

        embeddings = extract(_load_model(args.model), dataset.model_features())
    else:
        embeddings = dataset.model_features()
    assignment = divide(dataset, spec, embeddings, make_rng(args.seed))
    with open(args.out, "w") as fh:
        fh.write("sample_index,subdomain\n")
        for i, lab in assignment_rows(assignment):
            fh.write("%d,%d\n" % (i, lab))
    sizes = assignment.sizes()
    print("wrote %s: %d subdomains, sizes %s, within-subdomain cost %.6f"
          % (args.out, assignment.m_actual, sizes.tolist(), assignment.cost))
    return 0


def _experiment_from_args(args, method_override=None):
    payload = _read_json(args.config)
    if method_override is not None:
        payload["methods"] = [method_override]
    config = parse_experiment_config(payload, args.out)
    if args.seed is not None:
        config = dataclasses.replace(config, seeds=[args.seed])
    return config


def cmd_train(args):
    config = _experiment_from_args(args, method_override=args.method)
    report = run_experiment(config, render_figures=False)
    for row in report.rows:
        if row["status"] == "ok":
            metrics = " ".join("%s=%.6f" % (k, v) for k, v in sorted(row["metrics"].items()))
            print("%s seed=%d %s (%d epochs)" % (row["method"], row["seed"], metrics,
                                                 row["epochs"]))
        else:
            print("%s seed=%d FAILED: %s" % (row["method"], row["seed"], row["error"]),
                  file=sys.stderr)
    return 1 if report.n_failures else 0


def cmd_bench(args):
    config = _experiment_from_args(args)
    report = run_experiment(config, render_figures=not args.no_figures)
    print("config %s" % report.config_digest[:12])
    print("%-28s %-8s %-12s %-12s %s" % ("method", "metric", "mean", "std", "seeds"))
    for a in report.aggregates:
        print("%-28s %-8s %-12.6f %-12.6f %d"
              % (a["method"], a["metric"], a["mean"], a["std"], a["n_seeds"]))
    failed = [r for r in report.rows if r["status"] != "ok"]
    for row in failed:
        print("FAILED %s seed=%d: %s" % (row["method"], row["seed"], row["error"]),
              file=sys.stderr)
    print("report written to %s" % os.path.join(config.out_dir, "report.csv"))
    return 1 if report.n_failures else 0


def _load_model(path):
    with open(path) as fh:
        magic = fh.readline().split()
    if magic and magic[0] == "subalign-fusion":
        return load_fusion(path)
    return load_net(path)


def cmd_dump_embeddings(args):
    model = _load_model(args.model)
    dataset = load_dataset(args.data)
    emit_embeddings(model, dataset, args.out)
    print("wrote %s" % args.out)
    if args.figure:
        from .figures import embedding_scatter

        embedding_scatter(args.out, args.figure)
        print("wrote %s" % args.figure)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="subalign",
        description="Knowledge-guided subdomain adaptation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-subdomain benchmark")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("screen", help="screen knowledge columns against labels")
    p.add_argument("--data", required=True, help="dataset CSV (with schema sidecar)")
    p.add_argument("--config", help="JSON file with knowledge spec overrides")
    p.add_argument("--delta", type=float, default=0.05,
                   help="gap threshold in nats (default 0.05)")
    p.add_argument("--out", help="optional CSV output path")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("divide", help="export a subdomain assignment")
    p.add_argument("--data", required=True)
    p.add_argument("--knowledge-id", required=True)
    p.add_argument("--config", help="JSON file with knowledge spec overrides")
    p.add_argument("--model", help="trained model file; embeddings come from it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="assignment CSV path")
    p.set_defaults(func=cmd_divide)

    p = sub.add_parser("train", help="train and evaluate one method")
    p.add_argument("--config", required=True, help="experiment JSON config")
    p.add_argument("--method", required=True)
    p.add_argument("--seed", type=int, help="override the seed list with one seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run the full method comparison")
    p.add_argument("--config", required=True, help="experiment JSON config")
    p.add_argument("--seed", type=int, help="override the seed list with one seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-embeddings", help="write latent rows for a dataset")
    p.add_argument("--model", required=True, help="saved network or fusion manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="embedding CSV path")
    p.add_argument("--figure", help="optional scatter PNG path")
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
