"""Desk-scale end-to-end run: corpus, pre-training, QA and retrieval fine-tuning.

    python scripts/desk_run.py --out runs/desk
    python scripts/desk_run.py --out runs/quick --pretrain-steps 200 --finetune-steps 100

Writes every artifact under ``--out`` and a ``summary.json`` with the headline numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from semvlp import harness as H
from semvlp.config import RunConfig


@dataclass
class DeskRun:
    out: Path
    seed: int = 0
    pretrain_steps: int | None = None
    finetune_steps: int | None = None
    modes: str = "both"

    def run_config(self) -> RunConfig:
        cfg = RunConfig(seed=self.seed, out_dir=str(self.out / "pretrain"))
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=str(self.out / "corpus" / "corpus.jsonl")))
        if self.pretrain_steps is not None:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=self.pretrain_steps))
        if self.finetune_steps is not None:
            stages = [replace(s, steps_per_epoch=self.finetune_steps) for s in cfg.finetune.stages]
            cfg = replace(cfg, finetune=replace(cfg.finetune, stages=stages))
        return cfg


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-steps", type=int)
    ap.add_argument("--finetune-steps", type=int)
    ap.add_argument("--modes", choices=["single_stream", "two_stream", "both"], default="both")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    run = DeskRun(args.out, args.seed, args.pretrain_steps, args.finetune_steps, args.modes)
    cfg = run.run_config()
    logging.info("corpus: %s", H.cmd_gen_corpus(cfg)["hash"])
    pre = H.cmd_pretrain(cfg)
    logging.info("pre-training: loss ratio %.3f, ITM %s", pre["loss"]["ratio"], pre["itm_dev_accuracy"])
    ckpt = Path(cfg.out_dir) / "final.ckpt"
    summary = {"pretrain": pre}
    for task in ("vqa", "retrieval"):
        ft = H.cmd_finetune(replace(cfg, out_dir=str(args.out / task)), ckpt, task, args.modes)
        summary[task] = {r["mode"]: {"dev": r["dev"]["value"], "test": r["test"]["value"],
                                     "dev_before": r.get("dev_before", {}).get("value")} for r in ft["rows"]}
        summary[task]["selected_mode"] = ft["selected_mode"]
        logging.info("%s: %s", task, summary[task])
    H.write_json(args.out / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


if __name__ == "__main__":
    main()
