"""Command-line entry point: train, eval, compare, gen-data."""
import argparse
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .config import load_config
from .labels import save_vocabulary
from .trainer import compare, evaluate_checkpoint, train


def _cmd_train(args):
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.replace(out=args.out)
    if not cfg.out:
        cfg = cfg.replace(out=str(Path("runs") / cfg.run_name))
    res = train(cfg)
    if res.runlog.epochs:
        report = res.runlog.epochs[-1][1]
        for metric, k, v in report.rows():
            print(f"{metric}{'@' + str(k) if k != '' else ''}\t{v:.4f}")
    print(f"outputs written to {cfg.out}")


def _cmd_eval(args):
    report = evaluate_checkpoint(args.checkpoint, args.data, args.out)
    for metric, k, v in report.rows():
        print(f"{metric}{'@' + str(k) if k != '' else ''}\t{v:.4f}")


def _cmd_compare(args):
    cfgs = [load_config(p) for p in args.configs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare(cfgs, seeds=args.seeds, out_path=out / "comparison.csv")
    print(f"{len(rows)} runs written to {out / 'comparison.csv'}")


def _cmd_gen_data(args):
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_recs, test_recs, vocab = data_mod.generate(cfg.synthetic)
    data_mod.save(train_recs, out / "train.jsonl")
    data_mod.save(test_recs, out / "test.jsonl")
    save_vocabulary(vocab, out / "vocab.tsv")
    print(f"{len(train_recs)} train / {len(test_recs)} test segments, {vocab.n_p} predicates -> {out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="dll", description="Decoupled label learning on segment features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="train several configurations and tabulate them")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--out", default="runs/compare")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gen-data", help="write a synthetic benchmark as JSONL + vocabulary")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
