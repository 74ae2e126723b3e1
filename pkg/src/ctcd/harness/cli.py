"""``ctcd`` command line.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric error,
4 file format or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ctcd.ctc import beam_nbest
from ctcd.errors import ConfigError, CtcdError
from ctcd.harness.config import RunConfig, load_config
from ctcd.harness.matrix import DEFAULT_METHODS, SCENARIOS, rows_from_csv, run_matrix, summarize, write_matrix
from ctcd.harness.train import METHODS, decode_dataset, evaluate, load_data, train
from ctcd.models import atomic_write, load
from ctcd.numcore import softmax_np
from ctcd.synthdata import read_dataset, write_dataset

log = logging.getLogger("ctcd")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    train_ds, eval_ds = load_data(replace(cfg, data=replace(cfg.data, train_path=None, eval_path=None)))
    write_dataset(train_ds, args.train)
    write_dataset(eval_ds, args.eval)
    print(f"wrote {len(train_ds)} train / {len(eval_ds)} eval utterances")
    return 0


def _train(args, method: str) -> int:
    cfg = _config(args)
    if not cfg.output_dir:
        raise ConfigError("an output directory is required (train.output_dir or --out)")
    res = train(cfg, method)  # writes into cfg.output_dir
    ev = res.report.eval
    summary = f"TER {ev.ter:.4f} WER {ev.wer:.4f}" if ev else "no eval split"
    print(f"{method}: {res.report.steps} steps, {summary}, outputs in {cfg.output_dir}")
    return 0


def cmd_train_baseline(args) -> int:
    return _train(args, "baseline")


def cmd_train_kd(args) -> int:
    return _train(args, args.method)


def cmd_eval(args) -> int:
    ckpt = load(args.checkpoint)
    report = evaluate(ckpt, read_dataset(args.data)).to_json()
    if args.out:
        atomic_write(args.out, report.encode())
    sys.stdout.write(report)
    return 0


def cmd_nbest(args) -> int:
    ckpt = load(args.checkpoint)
    ds = read_dataset(args.data)
    if ckpt.spec.input_dim != ds.feature_dim:
        raise ConfigError("checkpoint and dataset feature dims differ")
    enc = ckpt.to_encoder()
    utts = [u for u in ds.utterances if args.utt is None or u.id == args.utt]
    if not utts:
        raise ConfigError(f"utterance {args.utt!r} not found")
    greedy = decode_dataset(enc, ds)
    for u in utts:
        grid = softmax_np(enc(u.features).logits.data, axis=-1)
        print(f"{u.id} ref={' '.join(map(str, u.labels))} greedy={' '.join(map(str, greedy[u.id]))}")
        for rank, (hyp, lp) in enumerate(beam_nbest(grid, args.beam, args.n), 1):
            print(f"  {rank} {lp:.6f} {' '.join(map(str, hyp))}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    teachers = {"tdnn": args.teacher_cnn, "rnn": args.teacher_rnn}
    seeds = [int(s) for s in args.seeds.split(",")]
    scenarios = args.scenarios.split(",") if args.scenarios else None
    methods = tuple(args.methods.split(",")) if args.methods else DEFAULT_METHODS
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    rows = run_matrix(cfg, teachers, seeds, scenarios, methods)
    write_matrix(rows, args.out)
    sys.stdout.write(summarize(rows))
    return 0


def cmd_report(args) -> int:
    text = Path(args.matrix).read_text(encoding="utf-8")
    md = summarize(rows_from_csv(text))
    if args.out:
        atomic_write(args.out, md.encode())
    sys.stdout.write(md)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctcd", description="Knowledge distillation for CTC models on toy data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/eval dataset files for the configured task")
    g.add_argument("--config", required=True)
    g.add_argument("--train", required=True)
    g.add_argument("--eval", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (
        ("train-baseline", cmd_train_baseline, "CTC-only training on ground truth"),
        ("train-kd", cmd_train_kd, "distillation training"),
    ):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config", required=True)
        t.add_argument("--out", help="output directory (overrides train.output_dir)")
        t.add_argument("--seed", type=int, help="overrides train.seed and CTCD_SEED")
        if name == "train-kd":
            t.add_argument("--method", required=True, choices=[m for m in METHODS if m != "baseline"])
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="greedy-decode a dataset and report WER/TER as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("nbest", help="print beam-search n-best lists")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--utt")
    n.add_argument("--n", type=int, default=5)
    n.add_argument("--beam", type=int, default=8)
    n.set_defaults(func=cmd_nbest)

    m = sub.add_parser("matrix", help="run the transfer scenarios over several seeds")
    m.add_argument("--config", required=True)
    m.add_argument("--teacher-cnn", required=True, help="TDNN teacher checkpoint")
    m.add_argument("--teacher-rnn", required=True, help="GRU teacher checkpoint")
    m.add_argument("--seeds", default="1,2,3,4,5")
    m.add_argument("--scenarios", help=f"comma list from {','.join(SCENARIOS)}")
    m.add_argument("--methods", help=f"comma list, default {','.join(DEFAULT_METHODS)}")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_matrix)

    r = sub.add_parser("report", help="summarize a matrix CSV as markdown")
    r.add_argument("--matrix", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # overflow surfaces as NumericError, so numpy's own warnings are noise here
        with np.errstate(all="ignore"):
            return args.func(args)
    except CtcdError as exc:
        print(f"ctcd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ctcd: I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
