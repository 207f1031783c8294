"""``semvlp`` command line. Exit codes: 0 success, 1 usage error, 2 validation or invariant failure."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness as H
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .encoder import SINGLE_STREAM, TWO_STREAM, InputError
from .finetune import TASKS
from .synthworld import VocabMismatchError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2

PRETRAIN_MIX = {"single": "single_only", "two": "two_only", "alternate": "alternate"}
FINETUNE_MODE = {"single": SINGLE_STREAM, "two": TWO_STREAM, "both": "both"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--corpus", help="corpus JSONL path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="semvlp", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpus and vocab")

    p = sub.add_parser("pretrain", parents=[common], help="multi-task pre-training")
    p.add_argument("--mode", choices=sorted(PRETRAIN_MIX), help="pre-training mode mix")
    p.add_argument("--steps", type=int)

    for verb in ("finetune", "eval", "mode-sweep"):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--task", choices=TASKS)
        if verb != "mode-sweep":
            p.add_argument("--mode", choices=sorted(FINETUNE_MODE) if verb == "finetune" else ["single", "two"])
        if verb == "eval":
            p.add_argument("--split", choices=["dev", "test"], default="dev")

    p = sub.add_parser("ls-sweep", parents=[common], help="split-layer sweep")
    p.add_argument("--values", type=int, nargs="+")

    sub.add_parser("ablate-modes", parents=[common], help="pre-training mode-mix table")

    p = sub.add_parser("dump-attention", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["single", "two"], default="single")
    p.add_argument("--example", type=int, default=0)
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int)
    p.add_argument("--output", help="dump path (default under --out)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the whole model")
    p.add_argument("--corrupt-gelu", action="store_true", help=argparse.SUPPRESS)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.corpus:
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=args.corpus))
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=args.steps))
    return cfg


def run(args) -> tuple[int, object]:
    cfg = load_config(args)
    verb = args.verb
    if verb == "gen-corpus":
        return EXIT_OK, H.cmd_gen_corpus(cfg)
    if verb == "pretrain":
        if args.mode:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, mode_mix=PRETRAIN_MIX[args.mode]))
        return EXIT_OK, H.cmd_pretrain(cfg)
    if verb == "finetune":
        mode = FINETUNE_MODE[args.mode] if args.mode else None
        return EXIT_OK, H.cmd_finetune(cfg, args.checkpoint, args.task, mode)
    if verb == "mode-sweep":
        return EXIT_OK, H.cmd_mode_sweep(cfg, args.checkpoint, args.task)
    if verb == "eval":
        mode = FINETUNE_MODE[args.mode] if args.mode else None
        return EXIT_OK, H.cmd_eval(cfg, args.checkpoint, args.task, mode, args.split)
    if verb == "ls-sweep":
        return EXIT_OK, H.cmd_ls_sweep(cfg, args.values)
    if verb == "ablate-modes":
        return EXIT_OK, H.cmd_ablate_modes(cfg)
    if verb == "dump-attention":
        return EXIT_OK, H.cmd_dump_attention(cfg, args.checkpoint, args.example, FINETUNE_MODE[args.mode],
                                             args.layer, args.head, args.output)
    if verb == "gradcheck":
        encoder = cfg.encoder if args.config else None
        if args.corrupt_gelu:
            report = _with_corrupted_gelu(lambda: H.cmd_gradcheck(encoder, cfg.seed))
        else:
            report = H.cmd_gradcheck(encoder, cfg.seed)
        return (EXIT_OK if report.passed else EXIT_VALIDATION), report.to_json()
    raise UsageError(f"unknown verb {verb}")


def _with_corrupted_gelu(fn):
    """Negative control: GELU whose backward is off by 10%."""
    from . import tensor as T

    original = T.gelu

    def bad_gelu(x):
        y = original(x)
        return T.add(T.scale(y, 0.9), T.Tensor(y.data * 0.1))

    T.gelu = bad_gelu
    try:
        return fn()
    finally:
        T.gelu = original


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"semvlp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code, result = run(args)
    except UsageError as exc:
        print(f"semvlp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (H.ValidationError, ConfigError, CheckpointError, InputError, VocabMismatchError, FileNotFoundError) as exc:
        print(f"semvlp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(result, indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
