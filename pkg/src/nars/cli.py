"""``nars`` command line: preprocess, sample, transe, train, eval, bench-synthetic.

Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import NarsConfig, apply_override, load_config

log = logging.getLogger("nars")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config with [data] [sample] [model] [stage] [train]")
    p.add_argument("--seed", type=int, help="overrides train.seed (and the sampling seed)")
    p.add_argument("--out", help="output workspace directory")
    p.add_argument("--threads", type=int, help="worker threads for propagation")
    p.add_argument("--dataset", help="dataset directory (overrides data.dataset_dir)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nars", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="sample subgraphs and write hop features")
    _common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--num-hops", type=int)
    p.add_argument("--drop-relation", action="append", default=[],
                   help="remove a relation before anything else, repeatable")

    p = sub.add_parser("sample", help="print sampled relation subsets")
    _common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--target")

    p = sub.add_parser("transe", help="train TransE embeddings for featureless types")
    _common(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="train a classifier on preprocessed features")
    _common(p)
    p.add_argument("--artifacts", help="preprocess output; preprocessed into OUT/artifacts if absent")
    p.add_argument("--staged", action="store_true", help="memory-bounded staged training")
    p.add_argument("--p", type=int, help="subgraphs resident per stage")
    p.add_argument("--epochs", type=int)
    p.add_argument("--replicates", type=int, default=1,
                   help="run seeds seed..seed+N-1 and report mean and std")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--artifacts")
    p.add_argument("--split", default="test")

    p = sub.add_parser("bench-synthetic", help="NARS vs merged-relation baseline on a typed SBM")
    _common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=60)
    return parser


def _config(args) -> NarsConfig:
    cfg = load_config(args.config) if args.config else NarsConfig()
    for o in args.overrides:
        apply_override(cfg, o)
    if args.dataset:
        cfg.data.dataset_dir = args.dataset
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.threads is not None:
        cfg.train.threads = args.threads
    return cfg


def _out(args, default: str = ".") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_dataset(cfg):
    if not cfg.data.dataset_dir:
        raise ValueError("no dataset: pass --dataset or set data.dataset_dir")


def cmd_preprocess(args, cfg):
    from .train import preprocess

    if args.k is not None:
        cfg.sample.k = args.k
    if args.num_hops is not None:
        cfg.model.num_hops = args.num_hops
    cfg.data.drop_relations = list(cfg.data.drop_relations) + args.drop_relation
    _need_dataset(cfg)
    out = preprocess(cfg, _out(args))
    print(out)


def cmd_sample(args, cfg):
    from .train import pick_subsets, prepared_graph

    if args.k is not None:
        cfg.sample.k = args.k
    if args.target:
        cfg.data.target = args.target
    _need_dataset(cfg)
    g = prepared_graph(cfg)
    lines = [" ".join(s.names(g)) for s in pick_subsets(cfg, g, g.type_id(cfg.data.target))]
    print("\n".join(lines))
    if args.out:
        (_out(args) / "subsets.txt").write_text("".join(line + "\n" for line in lines))


def cmd_transe(args, cfg):
    from .featurize import save_embeddings, train_transe
    from .train import prepared_graph

    _need_dataset(cfg)
    d = cfg.data
    g = prepared_graph(cfg)
    table = train_transe(g, args.dim or d.transe_dim, args.epochs or d.transe_epochs,
                         d.transe_margin, d.transe_lr, seed=cfg.train.seed)
    out = _out(args)
    save_embeddings(table, out)
    with open(out / "transe_loss.csv", "w") as f:
        f.write("epoch,loss\n")
        f.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(table.loss_history))
    print(out)


def cmd_train(args, cfg):
    from .train import Trainer, labels_for, open_artifacts, preprocess, prepared_graph

    if args.staged:
        cfg.stage.enabled = True
    if args.p is not None:
        cfg.stage.p = args.p
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = _out(args)
    if args.artifacts:
        art = open_artifacts(args.artifacts)
    else:
        _need_dataset(cfg)
        art = open_artifacts(preprocess(cfg, out / "artifacts"))
    labels = labels_for(cfg, prepared_graph(cfg))
    base = cfg.train.seed
    seeds = list(range(base, base + args.replicates))
    records = []
    for seed in seeds:
        c = NarsConfig.from_dict(cfg.to_dict())
        c.train.seed = seed
        run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
        tr = Trainer(c, art, labels, run_dir)
        try:
            res = tr.fit()
        finally:
            tr.close()
        rec = {"seed": seed, "best_epoch": res.best_epoch, "valid": res.best_valid,
               "test": res.test_at_best, "checkpoint": str(res.checkpoint)}
        records.append(rec)
        print(json.dumps(rec))
    with open(out / "results.jsonl", "w") as f:
        f.writelines(json.dumps(r) + "\n" for r in records)
    if len(records) > 1:
        summary = {k: {"mean": float(np.mean([r["test"][k] for r in records])),
                       "std": float(np.std([r["test"][k] for r in records]))}
                   for k in records[0]["test"]}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        print(json.dumps({"summary": summary}))


def cmd_eval(args, cfg):
    from .train import evaluate, open_artifacts

    art = open_artifacts(args.artifacts) if args.artifacts else None
    metrics = evaluate(args.checkpoint, args.split, art)
    line = json.dumps({"split": args.split, **metrics})
    print(line)
    if args.out:
        (_out(args) / f"eval_{args.split}.jsonl").write_text(line + "\n")


def cmd_bench(args, cfg):
    from .synthetic import run_benchmark

    base = cfg.train.seed
    res = run_benchmark(range(base, base + args.seeds), epochs=args.epochs)
    line = json.dumps(res)
    print(line)
    if args.out:
        (_out(args) / "bench_synthetic.jsonl").write_text(line + "\n")


COMMANDS = {
    "preprocess": cmd_preprocess, "sample": cmd_sample, "transe": cmd_transe,
    "train": cmd_train, "eval": cmd_eval, "bench-synthetic": cmd_bench,
}


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as e:  # noqa: BLE001 - report and map to exit 1
        if args.verbose:
            log.exception("command failed")
        print(f"nars {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
