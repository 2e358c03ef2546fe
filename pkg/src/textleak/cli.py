"""Command line entry point: ``textleak {train,attack,grid,score,verify}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if getattr(args, "output", None):
        cfg = replace(cfg, output=args.output)
    return cfg


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint

    cfg = _config(args)
    vocab = harness.load_vocab_list(cfg)
    samples, report = harness.load_dataset(cfg.dataset_path(), vocab)
    split = int(len(samples) * 0.8)
    train, held_out = samples[:split], samples[split:]
    from .model import EncoderClassifier
    model = EncoderClassifier(cfg.model, seed=cfg.model_seed)
    before = harness.utility_mcc(model, held_out)
    fed = replace(cfg.fed, rounds=args.rounds or cfg.fed.rounds)
    log = open(args.log, "w") if args.log else None
    try:
        harness.train_model(model, train, fed, batch_size=args.batch_size, seed=cfg.model_seed,
                            log=log)
    finally:
        if log:
            log.close()
    after = harness.utility_mcc(model, held_out)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    print(json.dumps({"schema_version": harness.SCHEMA_VERSION, "type": "train",
                      "rounds": fed.rounds, "defense": fed.defense.kind,
                      "mcc_before": before, "mcc_after": after,
                      "unknown_words": report.unknown_count}))
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    vocab = harness.load_vocab_list(cfg)
    samples, _ = harness.load_dataset(cfg.dataset_path(), vocab)
    pool = harness.select_samples(samples, cfg.pool_size, cfg.data_seed, cfg.num_words)
    model = harness.prepare_model(cfg, samples)
    b = args.batch_size or cfg.batch_sizes[0]
    record, _ = harness.run_single(model, cfg, pool, b, args.seed, args.method or cfg.methods[0])
    line = json.dumps(record, sort_keys=True)
    if args.output:
        path = replace(cfg, output=args.output).output_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(line + "\n")
    print(line)
    return 0


def cmd_grid(args) -> int:
    cfg = _config(args)
    rec = harness.run_experiment(
        cfg, progress=lambda r: print(json.dumps({k: r.get(k) for k in
                                                  ("method", "batch_size", "seed", "error")}),
                                      file=sys.stderr))
    for line in (json.dumps(a, sort_keys=True) for a in rec.aggregates + rec.trends):
        print(line)
    print(f"wrote {len(rec.runs)} runs to {cfg.output_path()}", file=sys.stderr)
    return 0 if all(r.get("result") for r in rec.runs) else 1


def cmd_score(args) -> int:
    runs = harness.rescore(harness.read_records(args.input))
    aggs = harness.aggregate(runs)
    lines = [json.dumps(r, sort_keys=True) for r in runs + aggs + harness.trend_checks(aggs)]
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
    for a in aggs:
        print(json.dumps(a, sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    return 0 if run_all(args.suite) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textleak", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run FedSGD rounds and report utility (MCC)")
    t.add_argument("--config")
    t.add_argument("--rounds", type=int)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--checkpoint", help="write the trained model here")
    t.add_argument("--log", help="JSONL round log")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="one victim round and one attack")
    a.add_argument("--config")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--method", choices=sorted(harness.ATTACKS))
    a.add_argument("--output")
    a.set_defaults(func=cmd_attack)

    g = sub.add_parser("grid", help="batch sizes x seeds x methods")
    g.add_argument("--config")
    g.add_argument("--output")
    g.set_defaults(func=cmd_grid)

    s = sub.add_parser("score", help="re-score stored recoveries")
    s.add_argument("--input", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_score)

    v = sub.add_parser("verify", help="invariant and oracle suites")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"textleak {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
