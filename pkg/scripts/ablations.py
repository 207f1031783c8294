"""Ablation tables: pre-training mode mix, fine-tuning mode, and the split-layer sweep.

    python scripts/ablations.py --out runs/ablate --corpus runs/desk/corpus/corpus.jsonl
    python scripts/ablations.py --out runs/ablate --only ls-sweep --pretrain-steps 300

A full-length run pre-trains eight models; expect about 35 minutes on one core
at the default 2,000 steps. Ordering across rows is reported, never asserted.
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from semvlp import harness as H
from semvlp.config import RunConfig

TABLES = ("ablate-modes", "mode-sweep", "ls-sweep")


@dataclass
class AblationRun:
    out: Path
    corpus: Path | None = None
    seed: int = 0
    pretrain_steps: int | None = None
    finetune_steps: int | None = None

    def run_config(self, name: str) -> RunConfig:
        cfg = RunConfig(seed=self.seed, out_dir=str(self.out / name))
        corpus = self.corpus or self.out / "corpus" / "corpus.jsonl"
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=str(corpus)))
        if self.pretrain_steps is not None:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=self.pretrain_steps))
        if self.finetune_steps is not None:
            stages = [replace(s, steps_per_epoch=self.finetune_steps) for s in cfg.finetune.stages]
            cfg = replace(cfg, finetune=replace(cfg.finetune, stages=stages))
        return cfg


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/ablate"))
    ap.add_argument("--corpus", type=Path, help="existing corpus JSONL; generated under --out when absent")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-steps", type=int)
    ap.add_argument("--finetune-steps", type=int)
    ap.add_argument("--only", choices=TABLES, action="append")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = AblationRun(args.out, args.corpus, args.seed, args.pretrain_steps, args.finetune_steps)
    if not Path(run.run_config("x").corpus.path).exists():
        H.cmd_gen_corpus(run.run_config("corpus"))
    tables = {}
    for name in args.only or TABLES:
        cfg = run.run_config(name)
        if name == "ablate-modes":
            tables[name] = H.cmd_ablate_modes(cfg)
        elif name == "ls-sweep":
            tables[name] = H.cmd_ls_sweep(cfg)
        else:
            pre = run.run_config("mode-sweep-pretrain")
            H.cmd_pretrain(pre)
            tables[name] = H.cmd_mode_sweep(cfg, Path(pre.out_dir) / "final.ckpt", "vqa")
        logging.info("%s done", name)
    H.write_json(args.out / "tables.json", tables)
    print(json.dumps(tables, indent=2, sort_keys=True))
    return tables


if __name__ == "__main__":
    main()
