"""Downstream heads, losses and fine-tuning loops.

Every head reads the pooled state of the configured mode: the [CLS] state in
single-stream mode, the [IMG] state in two-stream mode. Tasks on the synthetic
world:

* ``vqa``: multi-label answer scoring with soft-target BCE, softmax at inference;
* ``retrieval``: caption -> image ranking with a tanh similarity head trained by
  circle loss, with one hard-negative refresh;
* ``nlvr``: one statement against two images, classified from the concatenated
  pooled states;
* ``gqa2stage``: answer classification fine-tuned on a skewed split, then on a
  balanced split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import MODES, SINGLE_STREAM, SharedParams, TextInput, encode_pairs
from .optim import Adam
from .synthworld import (
    ANSWERS,
    COLORS,
    COUNT_WORDS,
    SHAPES,
    Scene,
    SceneRecord,
    Vocab,
    caption_holds,
    caption_words,
    oracle_score,
    qa_words,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

TASKS = ("vqa", "retrieval", "nlvr", "gqa2stage")
GQA_SKEWED_TYPES = (0.55, 0.15, 0.15, 0.15)  # count, color, shape, exists


@dataclass
class StageConfig:
    epochs: int = 1
    steps_per_epoch: int = 500
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class FinetuneConfig:
    task: str = "vqa"
    mode: str = SINGLE_STREAM
    answer_set_size: int = len(ANSWERS)
    circle_m: float = 0.25
    circle_gamma: float = 32.0
    stages: list[StageConfig] = field(default_factory=lambda: [StageConfig()])
    negatives: int = 3
    mining_candidates: int = 15
    pool_size: int = 20
    soft_distractor: float = 0.3

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.task == "gqa2stage" and len(self.stages) != 2:
            raise ValueError("gqa2stage needs exactly two stages")

    def to_dict(self) -> dict:
        return asdict(self)


def ensure_heads(p: SharedParams, task: str, num_answers: int = len(ANSWERS)) -> None:
    d = p.config.hidden_dim
    if task == "vqa":
        _mlp_head(p, "head.vqa", d, d, num_answers)
    elif task == "retrieval":
        p.add_head("head.sim.weight", (d, 1))
        p.add_head("head.sim.bias", (1,))
    elif task == "nlvr":
        _mlp_head(p, "head.nlvr", 2 * d, d, 2)
    elif task == "gqa2stage":
        _mlp_head(p, "head.gqa", d, d, num_answers)
    else:
        raise ValueError(f"unknown task {task!r}")


def _mlp_head(p, prefix, d_in, d_hidden, d_out):
    p.add_head(f"{prefix}.hidden.weight", (d_in, d_hidden))
    p.add_head(f"{prefix}.hidden.bias", (d_hidden,))
    p.add_head(f"{prefix}.out.weight", (d_hidden, d_out))
    p.add_head(f"{prefix}.out.bias", (d_out,))


def mlp(x: Tensor, p: SharedParams, prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, p[f"{prefix}.hidden.weight"], p[f"{prefix}.hidden.bias"]))
    return T.linear(h, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def _rows(pooled: Tensor) -> Tensor:
    return T.reshape(pooled, (1,) + pooled.shape) if pooled.ndim == 1 else pooled


# ---------------------------------------------------------------------------
# VQA


def vqa_forward_loss(pooled: Tensor, soft_targets, p: SharedParams) -> Tensor:
    """Mean per-answer sigmoid BCE of the answer MLP against soft scores in [0, 1]."""
    t = np.atleast_2d(np.asarray(soft_targets, dtype=np.float64))
    if ((t < 0) | (t > 1)).any():
        raise ValueError("soft targets must lie in [0, 1]")
    return T.bce_with_logits(mlp(_rows(pooled), p, "head.vqa"), t)


def vqa_predict(pooled: Tensor, p: SharedParams) -> np.ndarray:
    """Softmax over answer logits, argmax per row."""
    probs = T.softmax(mlp(_rows(pooled), p, "head.vqa"))
    return probs.data.argmax(axis=1)


def _answer_group(answer: str) -> tuple[str, ...]:
    for group in (COUNT_WORDS, COLORS, SHAPES, ("yes", "no")):
        if answer in group:
            return group
    raise ValueError(answer)


def soft_target(answer: str, rng: np.random.Generator, distractor_score: float = 0.3) -> np.ndarray:
    """1.0 for the answer, ``distractor_score`` for one same-type alternative."""
    t = np.zeros(len(ANSWERS))
    t[ANSWERS.index(answer)] = 1.0
    others = [a for a in _answer_group(answer) if a != answer]
    t[ANSWERS.index(others[int(rng.integers(len(others)))])] = distractor_score
    return t


# ---------------------------------------------------------------------------
# retrieval


def similarity_scores(pooled: Tensor, p: SharedParams) -> Tensor:
    """tanh-squashed linear score per pooled row, in (-1, 1)."""
    s = T.linear(_rows(pooled), p["head.sim.weight"], p["head.sim.bias"])
    return T.tanh(T.reshape(s, (s.shape[0],)))


def similarity_score(pooled: Tensor, p: SharedParams) -> float:
    return float(similarity_scores(pooled, p).data[0])


def _circle_weights(s_pos, s_neg, m):
    s_pos, s_neg = np.asarray(s_pos, dtype=float), np.asarray(s_neg, dtype=float)
    return np.maximum(0.0, 1.0 + m - s_pos), np.maximum(0.0, s_neg + m)


def circle_loss(s_pos: Sequence[float], s_neg: Sequence[float], m: float = 0.25, gamma: float = 32.0) -> float:
    """Unified pair-weighting circle loss for one query.

    ``log(1 + sum_n exp(g*a_n*(s_n - m)) * sum_p exp(-g*a_p*(s_p - 1 + m)))``
    with ``a_p = max(0, 1 + m - s_p)`` and ``a_n = max(0, s_n + m)``.
    """
    s_pos, s_neg = np.asarray(s_pos, dtype=float), np.asarray(s_neg, dtype=float)
    if s_pos.size == 0 or s_neg.size == 0:
        return 0.0
    a_p, a_n = _circle_weights(s_pos, s_neg, m)
    neg = np.logaddexp.reduce(gamma * a_n * (s_neg - m))
    pos = np.logaddexp.reduce(-gamma * a_p * (s_pos - (1.0 - m)))
    return float(np.logaddexp(0.0, neg + pos))


def circle_loss_tensor(s_pos: Tensor, s_neg: Tensor, m: float = 0.25, gamma: float = 32.0) -> Tensor:
    """Differentiable circle loss; the self-paced weights are held constant."""
    a_p, a_n = _circle_weights(s_pos.data, s_neg.data, m)
    neg = T.logsumexp(T.mul_const(T.add(s_neg, Tensor(np.full(s_neg.shape, -m))), gamma * a_n))
    pos = T.logsumexp(T.mul_const(T.add(s_pos, Tensor(np.full(s_pos.shape, -(1.0 - m)))), -gamma * a_p))
    return T.softplus(neg + pos)


def mine_hard_negatives(query, corpus: Sequence, model: Callable[[object, Sequence], np.ndarray], k: int) -> list:
    """Top-``k`` candidates of ``corpus`` by ``model(query, corpus)`` score, highest first.

    ``corpus`` must not contain the query's positive.
    """
    if k > len(corpus):
        raise ValueError(f"k={k} exceeds corpus size {len(corpus)}")
    scores = np.asarray(model(query, corpus), dtype=float)
    order = np.argsort(-scores, kind="stable")[:k]
    return [corpus[int(i)] for i in order]


def recall_at_k(scores: np.ndarray, positive: np.ndarray, k: int) -> float:
    """Share of pools whose positive ranks within the top ``k``; ties count against it."""
    scores = np.asarray(scores, dtype=float)
    pos_scores = scores[np.arange(len(scores)), positive]
    ahead = (scores >= pos_scores[:, None]).sum(axis=1) - 1
    return float((ahead < k).mean())


@dataclass
class RetrievalPool:
    query: TextInput
    query_words: list[str]
    candidates: list[Scene]
    positive: int


def retrieval_pools(records: Sequence[SceneRecord], vocab: Vocab, pool_size: int, seed: int) -> list[RetrievalPool]:
    """One pool per record: its fine caption against the true scene plus random distractors.

    A distractor the caption is also true of would be a second positive, so
    such scenes are skipped (the same rule ITM sampling applies).
    """
    rng = np.random.default_rng([seed, 41])
    pools = []
    for i, rec in enumerate(records):
        others = []
        for j in rng.permutation(len(records)):
            if j != i and not caption_holds(records[int(j)].scene, rec.fine):
                others.append(int(j))
                if len(others) == pool_size - 1:
                    break
        if len(others) < pool_size - 1:
            raise ValueError(f"not enough distractors for a pool of {pool_size}")
        cands = [records[j].scene for j in others]
        pos = int(rng.integers(pool_size))
        cands.insert(pos, rec.scene)
        pools.append(RetrievalPool(vocab.encode(rec.fine), list(rec.fine), cands, pos))
    return pools


def score_pairs(p: SharedParams, texts: Sequence[TextInput], scenes: Sequence[Scene], mode: str,
                batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(texts), batch):
            enc = encode_pairs(p, texts[s:s + batch], [sc.object_input() for sc in scenes[s:s + batch]], mode)
            out.append(similarity_scores(enc.pooled, p).data)
    return np.concatenate(out) if out else np.zeros(0)


def pool_score_matrix(p: SharedParams, pools: Sequence[RetrievalPool], mode: str) -> np.ndarray:
    texts = [pl.query for pl in pools for _ in pl.candidates]
    scenes = [c for pl in pools for c in pl.candidates]
    return score_pairs(p, texts, scenes, mode).reshape(len(pools), -1)


def oracle_score_matrix(pools: Sequence[RetrievalPool]) -> np.ndarray:
    return np.array([[oracle_score(pl.query_words, c) for c in pl.candidates] for pl in pools])


def retrieval_metrics(scores: np.ndarray, pools: Sequence[RetrievalPool]) -> dict[str, float]:
    pos = np.array([pl.positive for pl in pools])
    return {f"R@{k}": recall_at_k(scores, pos, k) for k in (1, 5, 10)}


# ---------------------------------------------------------------------------
# NLVR


@dataclass
class NlvrExample:
    statement: TextInput
    img0: Scene
    img1: Scene
    label: int


def nlvr_logits(p, statements, img0, img1, mode) -> Tensor:
    a = encode_pairs(p, statements, [s.object_input() for s in img0], mode)
    b = encode_pairs(p, statements, [s.object_input() for s in img1], mode)
    return mlp(T.concat([a.pooled, b.pooled], axis=1), p, "head.nlvr")


def nlvr_forward_loss(statement: TextInput, img0: Scene, img1: Scene, p: SharedParams, label: int,
                      mode: str = SINGLE_STREAM) -> Tensor:
    """Two-way cross-entropy from ``pooled(img0, s) ++ pooled(img1, s)``."""
    return T.cross_entropy(nlvr_logits(p, [statement], [img0], [img1], mode), [int(label)])


def make_nlvr_example(r0: SceneRecord, r1: SceneRecord, vocab: Vocab, rng) -> NlvrExample:
    classes = sorted(set(r0.scene.classes) | set(r1.scene.classes))
    color, shape = classes[int(rng.integers(len(classes)))]
    in0 = (color, shape) in r0.scene.classes
    in1 = (color, shape) in r1.scene.classes
    if rng.random() < 0.5:
        words, label = ["a", color, shape, "in", "both"], in0 and in1
    else:
        words, label = ["a", color, shape, "in", "exactly", "one"], in0 != in1
    return NlvrExample(vocab.encode(words), r0.scene, r1.scene, int(label))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class QAExample:
    text: TextInput
    scene: Scene
    answer: str


def qa_examples(records, vocab, seed, n, type_weights=None) -> list[QAExample]:
    rng = np.random.default_rng([seed, 53])
    out = []
    for _ in range(n):
        rec = records[int(rng.integers(len(records)))]
        words, ans = qa_words(rec.scene, [seed, rec.scene_id, int(rng.integers(1 << 30))], type_weights=type_weights)
        out.append(QAExample(vocab.encode(words), rec.scene, ans))
    return out


def stored_qa(records, vocab: Vocab) -> list[QAExample]:
    return [QAExample(vocab.encode(r.question), r.scene, r.answer) for r in records]


def _optimizer(stage: StageConfig) -> Adam:
    return Adam(lr=stage.lr, total_steps=stage.epochs * stage.steps_per_epoch)


def _head_prefix(task):
    return {"vqa": "head.vqa", "gqa2stage": "head.gqa"}[task]


def train_qa(p, records, vocab, cfg: FinetuneConfig, stage: StageConfig, seed, task="vqa",
             type_weights=None, on_step=None) -> list[dict]:
    """VQA (soft-target BCE) or GQA-style (cross-entropy) fine-tuning for one stage."""
    opt = _optimizer(stage)
    rng = np.random.default_rng([seed, 61])
    history = []
    steps = stage.epochs * stage.steps_per_epoch
    for step in range(steps):
        batch = qa_examples(records, vocab, [seed, step], stage.batch_size, type_weights)
        enc = encode_pairs(p, [e.text for e in batch], [e.scene.object_input() for e in batch], cfg.mode)
        if task == "vqa":
            targets = np.stack([soft_target(e.answer, rng, cfg.soft_distractor) for e in batch])
            loss = vqa_forward_loss(enc.pooled, targets, p)
        else:
            loss = T.cross_entropy(mlp(enc.pooled, p, "head.gqa"), [ANSWERS.index(e.answer) for e in batch])
        p.zero_grad()
        T.backward(loss)
        lr = opt.step(p)
        rec = {"step": step, "loss": loss.item(), "lr": lr}
        history.append(rec)
        if on_step:
            on_step(rec)
    return history


def qa_accuracy(p, examples: Sequence[QAExample], mode, task="vqa") -> float:
    prefix = _head_prefix(task)
    correct = 0
    with T.no_grad():
        for s in range(0, len(examples), 256):
            chunk = examples[s:s + 256]
            enc = encode_pairs(p, [e.text for e in chunk], [e.scene.object_input() for e in chunk], mode)
            pred = T.softmax(mlp(enc.pooled, p, prefix)).data.argmax(axis=1)
            correct += sum(int(a == ANSWERS.index(e.answer)) for a, e in zip(pred, chunk))
    return correct / len(examples)


def train_retrieval(p, records, vocab, cfg: FinetuneConfig, stage: StageConfig, seed, on_step=None) -> list[dict]:
    """Circle-loss ranking with random negatives, refreshed to hard negatives after each epoch."""
    opt = _optimizer(stage)
    queries_per_step = max(1, stage.batch_size // (1 + cfg.negatives))
    history = []
    hard: dict[int, int] = {}
    step = 0
    for epoch in range(stage.epochs):
        rng = np.random.default_rng([seed, 71, epoch])
        plan = [rng.choice(len(records), size=queries_per_step) for _ in range(stage.steps_per_epoch)]
        captions = {}
        for qs in plan:
            for q in qs:
                rec = records[int(q)]
                captions[int(q)] = captions.get(int(q)) or caption_words(rec.scene, "fine", [seed, epoch, rec.scene_id])
        if epoch > 0:
            hard = refresh_hard_negatives(p, records, vocab, captions, cfg, [seed, 73, epoch])
        for qs in plan:
            texts, scenes, n_per = [], [], 1 + cfg.negatives
            for q in qs:
                q = int(q)
                text = vocab.encode(captions[q])
                negs = []
                if q in hard:
                    negs.append(hard[q])
                while len(negs) < cfg.negatives:
                    j = int(rng.integers(len(records)))
                    if j != q and not caption_holds(records[j].scene, captions[q]):
                        negs.append(j)
                for j in [q] + negs:
                    texts.append(text)
                    scenes.append(records[j].scene)
            enc = encode_pairs(p, texts, [s.object_input() for s in scenes], cfg.mode)
            s = similarity_scores(enc.pooled, p)
            losses = []
            for qi in range(len(qs)):
                base = qi * n_per
                s_pos = T.take(s, np.array([base]))
                s_neg = T.take(s, np.arange(base + 1, base + n_per))
                losses.append(circle_loss_tensor(s_pos, s_neg, cfg.circle_m, cfg.circle_gamma))
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = T.scale(loss, 1.0 / len(losses))
            p.zero_grad()
            T.backward(loss)
            lr = opt.step(p)
            rec = {"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr}
            history.append(rec)
            if on_step:
                on_step(rec)
            step += 1
    return history


def refresh_hard_negatives(p, records, vocab, captions: dict[int, list[str]], cfg: FinetuneConfig, seed) -> dict[int, int]:
    """Hardest non-matching scene per query among ``mining_candidates`` random ones."""
    rng = np.random.default_rng(seed)
    out = {}
    for q, words in captions.items():
        # a scene the caption is true of is not a negative, however high it scores
        cands = [int(j) for j in rng.choice(len(records), size=cfg.mining_candidates + 1, replace=False)
                 if j != q and not caption_holds(records[int(j)].scene, words)]
        cands = cands[: cfg.mining_candidates]
        if not cands:
            continue
        text = vocab.encode(words)

        def model(_query, corpus):
            return score_pairs(p, [text] * len(corpus), [records[j].scene for j in corpus], cfg.mode)

        out[q] = mine_hard_negatives(text, cands, model, 1)[0]
    return out


def train_nlvr(p, records, vocab, cfg: FinetuneConfig, stage: StageConfig, seed, on_step=None) -> list[dict]:
    opt = _optimizer(stage)
    history = []
    for step in range(stage.epochs * stage.steps_per_epoch):
        rng = np.random.default_rng([seed, 83, step])
        batch = [nlvr_sample(records, vocab, rng) for _ in range(stage.batch_size)]
        logits = nlvr_logits(p, [e.statement for e in batch], [e.img0 for e in batch], [e.img1 for e in batch], cfg.mode)
        loss = T.cross_entropy(logits, [e.label for e in batch])
        p.zero_grad()
        T.backward(loss)
        lr = opt.step(p)
        rec = {"step": step, "loss": loss.item(), "lr": lr}
        history.append(rec)
        if on_step:
            on_step(rec)
    return history


def nlvr_sample(records, vocab, rng) -> NlvrExample:
    i, j = rng.choice(len(records), size=2, replace=False)
    return make_nlvr_example(records[int(i)], records[int(j)], vocab, rng)


def nlvr_accuracy(p, examples: Sequence[NlvrExample], mode) -> float:
    correct = 0
    with T.no_grad():
        for s in range(0, len(examples), 128):
            chunk = examples[s:s + 128]
            logits = nlvr_logits(p, [e.statement for e in chunk], [e.img0 for e in chunk], [e.img1 for e in chunk], mode)
            correct += int((logits.data.argmax(axis=1) == np.array([e.label for e in chunk])).sum())
    return correct / len(examples)


def two_stage_finetune(p, stage_a_records, stage_b_records, vocab, cfg: FinetuneConfig, seed,
                       on_step=None) -> tuple[SharedParams, list[list[dict]]]:
    """Skewed-split stage followed by balanced-split stage; B starts from A's parameters."""
    if not stage_a_records or not stage_b_records:
        raise ValueError("both fine-tuning stages need data")
    stage_a, stage_b = cfg.stages
    logs = []
    for name, recs, stage, weights in (("a", stage_a_records, stage_a, GQA_SKEWED_TYPES),
                                       ("b", stage_b_records, stage_b, None)):
        cb = (lambda r, name=name: on_step({**r, "stage": name})) if on_step else None
        logs.append(train_qa(p, recs, vocab, cfg, stage, [seed, ord(name)], task="gqa2stage",
                             type_weights=weights, on_step=cb))
    return p, logs
