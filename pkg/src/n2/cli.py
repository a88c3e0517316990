"""Command-line front end: train / eval / bench / analyze / gen.

Runs are driven by a JSON config (top-level "version" field required);
command-line flags override file values. Every subcommand is deterministic
given (--seed, config) and writes only under --out. Exit codes: 0 success,
1 configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .analysis import (bench_scaling, dump_proximity, dump_states,
                       energy_curve, write_bench_jsonl)
from .autodiff import NonFiniteError
from .graphs import (Dataset, DatasetError, Split, gen_random_graph,
                     gen_trees_match, load_dataset, make_batch, random_split,
                     save_dataset)
from .model import (ModelConfig, forward, load_checkpoint, logits_for,
                    save_checkpoint)
from .training import (TrainConfig, TrainingDiverged, cross_validate, metric,
                       train)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


MODEL_KEYS = {"L", "hidden", "state", "pieces", "pseudo_nodes", "dropout",
              "share_layers", "connection", "measurement"}
TRAIN_KEYS = {"version", "dataset", "metric", "lr", "weight_decay",
              "max_epochs", "patience", "batch_size", "seed", "split",
              "folds", "model"}


def _load_config(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if "version" not in cfg:
        raise ConfigError(f"{path}: missing 'version'")
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cfg


def _model_config(raw: dict, dataset: Dataset) -> ModelConfig:
    unknown = set(raw) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"model config: unknown keys {sorted(unknown)}")
    return ModelConfig(
        L=int(raw.get("L", 4)),
        d=int(raw.get("hidden", 64)),
        q=int(raw.get("state", 32)),
        k=int(raw.get("pieces", 8)),
        n_p=int(raw.get("pseudo_nodes", 8)),
        dropout=float(raw.get("dropout", 0.0)),
        n_c=dataset.num_classes,
        d_in=dataset.d_in,
        d_e=dataset.d_e,
        share_layers=bool(raw.get("share_layers", True)),
        connection=raw.get("connection", "dynamic"),
        measurement=raw.get("measurement", "proximity"),
    )


def _split_for(dataset: Dataset, cfg: dict, seed: int) -> Split:
    g = dataset.graphs[0]
    node_task = dataset.task in ("node-class", "multilabel") and len(dataset.graphs) == 1
    if node_task and g.masks and all(k in g.masks for k in ("train", "val", "test")):
        return Split(train=np.flatnonzero(g.masks["train"]),
                     val=np.flatnonzero(g.masks["val"]),
                     test=np.flatnonzero(g.masks["test"]))
    n = g.n if node_task else len(dataset.graphs)
    ratios = tuple(cfg.get("split", (0.6, 0.2, 0.2)))
    return random_split(n, ratios, seed)


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = _load_config(args.config, TRAIN_KEYS)
    if "dataset" not in cfg and not args.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    ds_path = args.dataset or cfg["dataset"]
    if not os.path.exists(ds_path):
        raise ConfigError(f"dataset: file not found: {ds_path}")
    dataset = load_dataset(ds_path)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    model_cfg = _model_config(cfg.get("model", {}), dataset)
    tc = TrainConfig(
        model=model_cfg,
        lr=float(cfg.get("lr", 1e-3)),
        weight_decay=float(cfg.get("weight_decay", 1e-6)),
        max_epochs=int(cfg.get("max_epochs", 1000)),
        patience=int(cfg.get("patience", 300)),
        batch_size=int(cfg.get("batch_size", 256)),
        seed=seed,
        metric=cfg.get("metric", "accuracy"),
    )
    out = _ensure_out(args.out)
    folds = int(cfg.get("folds", 0))
    if folds:
        mean, std, per_fold = cross_validate(dataset, folds, tc)
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump({"folds": folds, "metric": tc.metric, "mean": mean,
                       "std": std, "per_fold": per_fold}, fh, sort_keys=True)
        print(f"cv mean {mean:.4f} +- {std:.4f}", file=sys.stderr)
        return 0
    split = _split_for(dataset, cfg, seed)
    params, report = train(dataset, split, tc)
    save_checkpoint(os.path.join(out, "model.ckpt"), model_cfg, params)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True)
    print(f"best epoch {report.best_epoch} test {tc.metric} "
          f"{report.test_metric:.4f} ({report.seconds:.1f}s)", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    if dataset.d_in != config.d_in or dataset.d_e != config.d_e:
        raise ConfigError(
            f"dataset dims ({dataset.d_in},{dataset.d_e}) do not match "
            f"checkpoint ({config.d_in},{config.d_e})")
    kind = args.metric or "accuracy"
    node_task = dataset.task in ("node-class", "multilabel") and len(dataset.graphs) == 1
    with ad.no_grad():
        if node_task:
            g = dataset.graphs[0]
            state, _ = forward(g, params, config, mode="eval")
            logits = logits_for(g, state, params, config, dataset.task)
            if g.masks and "test" in g.masks:
                idx = np.flatnonzero(g.masks["test"])
            else:
                idx = np.arange(g.n)
            value = metric(kind, logits.data[idx], g.y[idx])
            count = len(idx)
        else:
            scores, labels = [], []
            for at in range(0, len(dataset.graphs), 256):
                graphs = dataset.graphs[at:at + 256]
                batch = make_batch(graphs)
                state, _ = forward(batch, params, config, mode="eval")
                scores.append(logits_for(batch, state, params, config,
                                         dataset.task).data)
                labels.append([int(g.y[0]) for g in graphs])
            value = metric(kind, np.concatenate(scores),
                           np.concatenate(labels))
            count = len(dataset.graphs)
    print(json.dumps({"metric": kind, "value": value, "n": count},
                     sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    n_list = [int(v) for v in args.n.split(",") if v]
    np_list = [int(v) for v in args.np.split(",") if v]
    if not n_list or not np_list:
        raise ConfigError("--n and --np must be non-empty int lists")
    out = _ensure_out(args.out)
    records = bench_scaling(n_list, np_list, d=args.d, q=args.q, k=args.k,
                            repeats=args.repeats, seed=args.seed or 0)
    write_bench_jsonl(records, os.path.join(out, "bench.jsonl"))
    for rec in records:
        print(rec.to_json(), file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    config, params = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    graph = dataset.graphs[args.graph]
    out = _ensure_out(args.out)
    if args.what == "energy":
        steps = args.steps or config.L
        _, traj = forward(graph, params, config, mode="eval",
                          keep_trajectory=True, n_steps=steps)
        curve = energy_curve(traj, graph)
        with open(os.path.join(out, "energy.csv"), "w", encoding="utf-8") as fh:
            fh.write("step,raw,normalized\n")
            for i, (r, z) in enumerate(zip(curve.raw, curve.normalized)):
                fh.write(f"{i},{r!r},{z!r}\n")
    elif args.what == "proximity":
        dump_proximity(config, params, graph, step=args.step,
                       sample=args.sample, seed=args.seed or 0, out_dir=out)
    elif args.what == "states":
        dump_states(config, params, graph, out_dir=out)
    else:
        raise ConfigError(f"unknown analyze target {args.what!r}")
    return 0


def cmd_gen(args) -> int:
    seed = args.seed or 0
    if args.kind == "trees-match":
        ds = gen_trees_match(args.depth, args.samples, seed)
    elif args.kind == "random":
        graph = gen_random_graph(args.n, args.avg_degree, args.d_in, seed)
        ds = Dataset([graph], "node-class", max(2, args.d_in),
                     name=f"random-{args.n}")
    else:
        raise ConfigError(f"unknown generator {args.kind!r}")
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.graphs)} graphs to {args.out}", file=sys.stderr)
    return 0


def _add_common(p: _Parser, out_default: str | None = None):
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--out", default=out_default, required=out_default is None,
                   help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="parallelism cap (training folds)")


def build_parser() -> _Parser:
    root = _Parser(prog="n2", description=__doc__.splitlines()[0])
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="json-graphs file (overrides config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", default=None,
                   choices=["accuracy", "roc-auc", "avg-precision"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="runtime scaling benchmark")
    _add_common(p)
    p.add_argument("--n", required=True, help="comma-separated node counts")
    p.add_argument("--np", required=True, help="comma-separated pseudo-node counts")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--q", type=int, default=64)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("analyze", help="energy / proximity / state dumps")
    p.add_argument("what", choices=["energy", "proximity", "states"])
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", type=int, default=0, help="graph index in the dataset")
    p.add_argument("--steps", type=int, default=None, help="energy: recursion depth")
    p.add_argument("--step", type=int, default=1, help="proximity: recursive step")
    p.add_argument("--sample", type=int, default=100, help="proximity: sampled nodes")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gen", help="synthetic dataset generators")
    p.add_argument("kind", choices=["trees-match", "random"])
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--avg-degree", type=float, default=4.0)
    p.add_argument("--d-in", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(fn=cmd_gen)
    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"n2: config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError, MemoryError) as exc:
        print(f"n2: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
