"""Experiment orchestration behind the command line: corpus, pre-training, fine-tuning, sweeps, dumps."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, tiny_encoder_config
from .encoder import MODES, SINGLE_STREAM, TWO_STREAM, EncoderConfig, SharedParams, encode_pairs
from .finetune import (
    FinetuneConfig,
    ensure_heads,
    make_nlvr_example,
    nlvr_accuracy,
    oracle_score_matrix,
    pool_score_matrix,
    qa_accuracy,
    retrieval_metrics,
    retrieval_pools,
    stored_qa,
    train_nlvr,
    train_qa,
    train_retrieval,
    two_stage_finetune,
)
from .gradcheck import GradcheckReport, run_gradcheck
from .optim import Adam
from .pretrain import MODE_MIXES, PretrainData, append_metrics, ensure_pretrain_heads, itm_accuracy, train_step
from .synthworld import ANSWERS, FEATURE_DIM, NUM_LABELS, Corpus, Vocab, build_corpus, file_digest, read_corpus, write_corpus

log = logging.getLogger(__name__)

NLVR_EVAL_PAIRS = 400
ITM_EVAL_BATCHES = 10


class ValidationError(ValueError):
    """Bad input that is not a usage error: missing corpus, mismatched checkpoint, failed check."""


# ---------------------------------------------------------------------------
# run bookkeeping


def code_version() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out_dir: str | Path, cfg: RunConfig, corpus_hash: str | None, **extra) -> dict:
    """Persist the config plus everything else needed to rerun into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    manifest = {
        "seed": cfg.seed,
        "corpus_path": cfg.corpus.path,
        "corpus_hash": corpus_hash,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_corpus(cfg: RunConfig) -> tuple[Corpus, str]:
    path = Path(cfg.corpus.path)
    if not path.exists():
        raise ValidationError(f"corpus not found at {path}; run gen-corpus first")
    corpus = read_corpus(path)
    check_vocab(cfg.encoder, corpus.vocab)
    return corpus, file_digest(path)


def check_vocab(enc: EncoderConfig, vocab: Vocab) -> None:
    if enc.vocab_size != len(vocab):
        raise ValidationError(f"encoder vocab_size {enc.vocab_size} does not match corpus vocab of {len(vocab)} tokens")
    if enc.object_feature_dim != FEATURE_DIM:
        raise ValidationError(f"corpus features are {FEATURE_DIM}-d, encoder expects {enc.object_feature_dim}")


def load_params(path: str | Path, cfg: RunConfig | None = None) -> SharedParams:
    if not Path(path).exists():
        raise ValidationError(f"checkpoint not found: {path}")
    params, _, _ = load_checkpoint(path)
    if cfg is not None and params.config != cfg.encoder:
        raise ValidationError("checkpoint encoder config differs from the run config")
    return params


# ---------------------------------------------------------------------------
# corpus


def cmd_gen_corpus(cfg: RunConfig) -> dict:
    c = cfg.corpus
    corpus = build_corpus(c.n_pairs, c.split_ratios, c.seed)
    data_path, vocab_path = write_corpus(corpus, c.path)
    return {"path": str(data_path), "vocab_path": str(vocab_path), "hash": file_digest(data_path),
            "splits": {k: len(corpus[k]) for k in ("train", "dev", "test")}}


# ---------------------------------------------------------------------------
# pre-training


def run_pretraining(params: SharedParams, data: PretrainData, steps: int | None = None,
                    metrics_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
                    meta: dict | None = None) -> tuple[Adam, list[dict]]:
    """The shared pre-training loop; writes one JSONL record per step when ``metrics_path`` is set."""
    pc = data.config
    steps = pc.steps if steps is None else steps
    opt = Adam(lr=pc.lr, total_steps=steps, warmup_steps=pc.warmup_steps, max_grad_norm=pc.max_grad_norm)
    history = []
    t0 = time.perf_counter()
    for step in range(steps):
        report = train_step(data.batch(step), params, opt, step, pc.mode_mix)
        rec = {**report.to_metrics(), "seconds": round(time.perf_counter() - t0, 3)}
        history.append(rec)
        if metrics_path is not None:
            append_metrics(metrics_path, rec)
        if checkpoint_dir is not None and pc.checkpoint_every and (step + 1) % pc.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt", params, opt, {**(meta or {}), "step": step + 1})
    return opt, history


def loss_summary(history: list[dict], window: int = 100) -> dict:
    totals = [h["total"] for h in history]
    first, last = float(np.mean(totals[:window])), float(np.mean(totals[-window:]))
    return {"first_window_mean": first, "last_window_mean": last, "ratio": last / first, "window": window}


def pretrain_params(cfg: RunConfig, corpus: Corpus, out_dir: str | Path | None = None,
                    corpus_hash: str | None = None) -> tuple[SharedParams, dict]:
    """Initialize, pre-train and evaluate ITM; writes run artifacts when ``out_dir`` is given."""
    vocab = corpus.vocab
    params = SharedParams.initialize(cfg.encoder, cfg.seed)
    ensure_pretrain_heads(params, NUM_LABELS, len(ANSWERS))
    data = PretrainData(corpus["train"], vocab, cfg.pretrain, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    meta = {"seed": cfg.seed, "corpus_hash": corpus_hash, "code_version": code_version()}
    t0 = time.perf_counter()
    opt, history = run_pretraining(
        params, data,
        metrics_path=out / "metrics.jsonl" if out else None,
        checkpoint_dir=out / "checkpoints" if out else None,
        meta=meta,
    )
    seconds = time.perf_counter() - t0
    dev = PretrainData(corpus["dev"], vocab, cfg.pretrain, cfg.seed)
    summary = {
        "steps": len(history),
        "seconds": round(seconds, 2),
        "mode_mix": cfg.pretrain.mode_mix,
        "loss": loss_summary(history) if history else None,
        "itm_dev_accuracy": {m: itm_accuracy(params, dev, ITM_EVAL_BATCHES, m) for m in MODES},
        "itm_dev_accuracy_unmasked": {m: itm_accuracy(params, dev, ITM_EVAL_BATCHES, m, masked=False) for m in MODES},
        "seed": cfg.seed,
    }
    if out is not None:
        save_checkpoint(out / "final.ckpt", params, opt, {**meta, "step": len(history)})
        write_json(out / "pretrain_report.json", summary)
    return params, summary


def cmd_pretrain(cfg: RunConfig) -> dict:
    corpus, digest = load_corpus(cfg)
    out = Path(cfg.out_dir)
    if (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    write_manifest(out, cfg, digest, command="pretrain")
    _, summary = pretrain_params(cfg, corpus, out, digest)
    return summary


# ---------------------------------------------------------------------------
# fine-tuning and evaluation


def nlvr_eval_set(records, vocab: Vocab, seed: int, n: int = NLVR_EVAL_PAIRS):
    rng = np.random.default_rng([seed, 89])
    out = []
    for _ in range(n):
        i, j = rng.choice(len(records), size=2, replace=False)
        out.append(make_nlvr_example(records[int(i)], records[int(j)], vocab, rng))
    return out


def evaluate(params: SharedParams, corpus: Corpus, task: str, mode: str, split: str, seed: int,
             pool_size: int = 20) -> dict:
    """Evaluation report ``{task, mode, metric_name, value, n_examples, seed}`` plus extras."""
    records, vocab = corpus[split], corpus.vocab
    needed = {"vqa": "head.vqa.out.weight", "gqa2stage": "head.gqa.out.weight",
              "retrieval": "head.sim.weight", "nlvr": "head.nlvr.out.weight"}[task]
    if needed not in params:
        raise ValidationError(f"checkpoint has no head for task {task!r}")
    if task in ("vqa", "gqa2stage"):
        examples = stored_qa(records, vocab)
        return _report(task, mode, "accuracy", qa_accuracy(params, examples, mode, task), len(examples), seed)
    if task == "nlvr":
        examples = nlvr_eval_set(records, vocab, seed)
        return _report(task, mode, "accuracy", nlvr_accuracy(params, examples, mode), len(examples), seed)
    pools = retrieval_pools(records, vocab, pool_size, seed)
    metrics = retrieval_metrics(pool_score_matrix(params, pools, mode), pools)
    oracle = retrieval_metrics(oracle_score_matrix(pools), pools)
    return {**_report(task, mode, "R@1", metrics["R@1"], len(pools), seed), "metrics": metrics,
            "oracle_R@1": oracle["R@1"], "pool_size": pool_size}


def _report(task, mode, metric_name, value, n, seed) -> dict:
    return {"task": task, "mode": mode, "metric_name": metric_name, "value": float(value),
            "n_examples": int(n), "seed": int(seed)}


def finetune_params(params: SharedParams, corpus: Corpus, fc: FinetuneConfig, seed: int,
                    metrics_path: str | Path | None = None) -> dict:
    """Fine-tune ``params`` in place for ``fc.task`` in ``fc.mode``; returns dev/test reports."""
    vocab, train = corpus.vocab, corpus["train"]
    ensure_heads(params, fc.task, fc.answer_set_size)
    before = None
    if fc.task == "retrieval":
        before = evaluate(params, corpus, "retrieval", fc.mode, "dev", seed, fc.pool_size)

    def on_step(rec):
        if metrics_path is not None:
            append_metrics(metrics_path, {**rec, "task": fc.task, "mode": fc.mode})

    stage = fc.stages[0]
    if fc.task == "vqa":
        train_qa(params, train, vocab, fc, stage, seed, "vqa", on_step=on_step)
    elif fc.task == "gqa2stage":
        two_stage_finetune(params, train, train, vocab, fc, seed, on_step=on_step)
    elif fc.task == "retrieval":
        train_retrieval(params, train, vocab, fc, stage, seed, on_step=on_step)
    else:
        train_nlvr(params, train, vocab, fc, stage, seed, on_step=on_step)
    result = {split: evaluate(params, corpus, fc.task, fc.mode, split, seed, fc.pool_size) for split in ("dev", "test")}
    if before is not None:
        result["dev_before"] = before
    return result


def parse_modes(mode: str | None, default: str) -> list[str]:
    mode = mode or default
    if mode == "both":
        return list(MODES)
    if mode in MODES:
        return [mode]
    raise ValueError(f"fine-tuning mode must be single_stream, two_stream or both, got {mode!r}")


def mark_selection(rows: list[dict]) -> str:
    """Dev argmax over fine-tuning modes; a tie goes to the first row (single-stream)."""
    best = max(range(len(rows)), key=lambda i: (rows[i]["dev"]["value"], -i))
    for i, row in enumerate(rows):
        row["selected"] = i == best
    return rows[best]["mode"]


def cmd_finetune(cfg: RunConfig, checkpoint: str | Path, task: str | None = None, mode: str | None = None) -> dict:
    """Fine-tune a pre-trained checkpoint in one or both modes; one sub-directory per mode."""
    corpus, digest = load_corpus(cfg)
    base = load_params(checkpoint, cfg)
    task = task or cfg.finetune.task
    out = Path(cfg.out_dir)
    write_manifest(out, cfg, digest, command="finetune", checkpoint=str(checkpoint), task=task)
    rows = []
    for m in parse_modes(mode, cfg.finetune.mode):
        fc = replace(cfg.finetune, task=task, mode=m)
        params = base.clone()
        sub = out / f"{task}_{m}"
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "metrics.jsonl").unlink(missing_ok=True)
        result = finetune_params(params, corpus, fc, cfg.seed, sub / "metrics.jsonl")
        for split in ("dev", "test"):
            write_json(sub / f"eval_{split}.json", result[split])
        save_checkpoint(sub / "final.ckpt", params, None, {"task": task, "mode": m, "seed": cfg.seed})
        rows.append({"task": task, "mode": m, "seed": cfg.seed, **result})
    selected = mark_selection(rows)
    report = {"task": task, "rows": rows, "selected_mode": selected, "seed": cfg.seed}
    write_json(out / "finetune_report.json", report)
    return report


def cmd_mode_sweep(cfg: RunConfig, checkpoint: str | Path, task: str | None = None) -> dict:
    """Fine-tuning-architecture table: one row per mode, the dev argmax marked."""
    return cmd_finetune(cfg, checkpoint, task, "both")


def cmd_eval(cfg: RunConfig, checkpoint: str | Path, task: str | None = None, mode: str | None = None,
             split: str = "dev") -> dict:
    corpus, _ = load_corpus(cfg)
    params = load_params(checkpoint)
    check_vocab(params.config, corpus.vocab)
    report = evaluate(params, corpus, task or cfg.finetune.task, mode or cfg.finetune.mode, split, cfg.seed,
                      cfg.finetune.pool_size)
    write_json(Path(cfg.out_dir) / f"eval_{report['task']}_{report['mode']}_{split}.json", report)
    return report


# ---------------------------------------------------------------------------
# ablations


def cmd_ablate_modes(cfg: RunConfig) -> dict:
    """Pre-training-fashion table: pre-train per mode mix, then QA fine-tune in both modes."""
    corpus, digest = load_corpus(cfg)
    out = Path(cfg.out_dir)
    write_manifest(out, cfg, digest, command="ablate-modes")
    rows = []
    for mix in MODE_MIXES:
        run = replace(cfg, pretrain=replace(cfg.pretrain, mode_mix=mix))
        params, summary = pretrain_params(run, corpus)
        dev = {}
        for m in MODES:
            ft = params.clone()
            fc = replace(cfg.finetune, task="vqa", mode=m)
            dev[m] = finetune_params(ft, corpus, fc, cfg.seed)["dev"]["value"]
        rows.append({"mode_mix": mix, "seed": cfg.seed, "pretrain_loss_ratio": summary["loss"]["ratio"],
                     "itm_dev_accuracy": summary["itm_dev_accuracy"], "qa_dev_accuracy": dev,
                     "best_dev_accuracy": max(dev.values())})
    report = {"rows": rows, "metric": "qa dev accuracy", "seed": cfg.seed,
              "ordering": [r["mode_mix"] for r in sorted(rows, key=lambda r: -r["best_dev_accuracy"])]}
    write_json(out / "ablate_modes.json", report)
    return report


def cmd_ls_sweep(cfg: RunConfig, values=None) -> dict:
    """Split-layer table: two-stream-only pre-training per L_s, QA fine-tuning in two-stream mode."""
    L = cfg.encoder.num_layers
    values = list(range(L + 1)) if values is None else sorted(int(v) for v in values)
    bad = [v for v in values if not 0 <= v <= L]
    if bad:
        raise ValidationError(f"L_s values {bad} outside [0, {L}]")
    corpus, digest = load_corpus(cfg)
    out = Path(cfg.out_dir)
    write_manifest(out, cfg, digest, command="ls-sweep", values=values)
    rows = []
    for ls in values:
        run = replace(cfg, encoder=replace(cfg.encoder, split_layer=ls),
                      pretrain=replace(cfg.pretrain, mode_mix="two_only"))
        params, summary = pretrain_params(run, corpus)
        fc = replace(cfg.finetune, task="vqa", mode=TWO_STREAM)
        acc = finetune_params(params, corpus, fc, cfg.seed)["dev"]["value"]
        rows.append({"split_layer": ls, "cross_attention_layers": L - ls, "qa_dev_accuracy": acc,
                     "itm_dev_accuracy": summary["itm_dev_accuracy"][TWO_STREAM], "seed": cfg.seed})
    report = {"rows": rows, "num_layers": L, "seed": cfg.seed}
    write_json(out / "ls_sweep.json", report)
    return report


# ---------------------------------------------------------------------------
# attention dumps


def dump_attention(params: SharedParams, corpus: Corpus, example: int, mode: str, split: str = "dev",
                   layer: int | None = None, head: int | None = None) -> dict:
    """All (layer, head) maps for one corpus example's fine caption, with row/column labels."""
    cfg = params.config
    records = corpus[split]
    if not 0 <= example < len(records):
        raise ValidationError(f"example {example} outside {split} split of {len(records)}")
    if layer is not None and not 1 <= layer <= cfg.num_layers:
        raise ValidationError(f"layer {layer} outside [1, {cfg.num_layers}]")
    if head is not None and not 0 <= head < cfg.num_heads:
        raise ValidationError(f"head {head} outside [0, {cfg.num_heads})")
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    rec = records[example]
    vocab = corpus.vocab
    text = vocab.encode(rec.fine)
    objects = rec.scene.object_input()
    with T.no_grad():
        enc = encode_pairs(params, [text], [objects], mode, record=True)
    tokens = vocab.decode(text.token_ids)
    objs = ["[IMG]"] + [f"obj{i}" for i in range(objects.num_objects)]
    labels = {"joint": objs + tokens, "text": tokens, "image": objs}
    sets = {"joint": ("joint", "joint"), "text": ("text", "text"), "image": ("image", "image"), "cross": ("image", "text")}
    maps = []
    for kind, l, probs in enc.attention:
        if layer is not None and l != layer:
            continue
        q_set, k_set = sets[kind]
        for h in range(probs.shape[1]):
            if head is not None and h != head:
                continue
            maps.append({"kind": kind, "layer": l, "head": h, "query_set": q_set, "key_set": k_set,
                         "row_labels": labels[q_set], "col_labels": labels[k_set],
                         "weights": probs[0, h].tolist()})
    return {
        "mode": mode, "split": split, "example": example, "scene_id": rec.scene_id,
        "num_layers": cfg.num_layers, "num_heads": cfg.num_heads, "split_layer": cfg.split_layer,
        "tokens": tokens, "objects": objs,
        "object_classes": [f"{o.color} {o.shape}" for o in rec.scene.objects],
        "segments": {"image": [0, len(objs)], "text": [len(objs), len(objs) + len(tokens)]} if mode == SINGLE_STREAM else None,
        "vocab_digest": vocab.digest(),
        "maps": maps,
    }


def image_to_text_block(dump: dict, entry: dict) -> np.ndarray:
    """Rows for image positions, columns for text positions, from a joint or cross map."""
    w = np.asarray(entry["weights"])
    if entry["kind"] == "cross":
        return w
    if entry["kind"] != "joint":
        raise ValueError("only joint and cross maps have an image-to-text block")
    (i0, i1), (t0, t1) = dump["segments"]["image"], dump["segments"]["text"]
    return w[i0:i1, t0:t1]


def cmd_dump_attention(cfg: RunConfig, checkpoint: str | Path, example: int = 0, mode: str | None = None,
                       layer: int | None = None, head: int | None = None, out_path: str | Path | None = None) -> dict:
    corpus, _ = load_corpus(cfg)
    params = load_params(checkpoint)
    check_vocab(params.config, corpus.vocab)
    mode = mode or cfg.finetune.mode
    dump = dump_attention(params, corpus, example, mode, layer=layer, head=head)
    path = Path(out_path) if out_path else Path(cfg.out_dir) / f"attention_{mode}_{example}.json"
    write_json(path, dump)
    return {"path": str(path), "maps": len(dump["maps"])}


# ---------------------------------------------------------------------------
# gradient check


def cmd_gradcheck(encoder: EncoderConfig | None = None, seed: int = 0) -> GradcheckReport:
    return run_gradcheck(encoder or tiny_encoder_config(), seed)
