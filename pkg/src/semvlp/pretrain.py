"""Pre-training tasks, loss gating and the alternating update schedule.

Four objectives share one encoder: masked LM on text states, masked object
prediction (feature regression + detected-label classification) on object
states, image-text matching and image QA on the pooled state of the active
mode. Mismatched pairs contribute only to matching; their MLM, object and QA
targets are inert. Enabled losses are summed with equal weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .encoder import (
    MASK_ID,
    SINGLE_STREAM,
    TWO_STREAM,
    ObjectInput,
    SharedParams,
    TextInput,
    encode_pairs,
)
from .optim import Adam
from .synthworld import ANSWERS, caption_holds, caption_words, qa_words
from .tensor import Tensor

COMPONENTS = ("mlm", "roi_regression", "label_clf", "itm", "qa")
MODE_MIXES = ("alternate", "single_only", "two_only")


class NoTargetsError(ValueError):
    pass


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3  # desk scale; at 1e-4 ITM stays near chance after 2,000 steps
    warmup_steps: int = 200
    max_grad_norm: float | None = 1.0
    mask_rate: float = 0.15
    mode_mix: str = "alternate"
    text_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # coarse, fine, question
    fresh_text: bool = True
    # share of ITM replacement captions that are coarse captions of a scene with the same object count
    hard_negative_rate: float = 0.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.mode_mix not in MODE_MIXES:
            raise ValueError(f"mode_mix must be one of {MODE_MIXES}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and at least 2")
        if not 0.0 <= self.hard_negative_rate <= 1.0:
            raise ValueError("hard_negative_rate must lie in [0, 1]")
        self.text_mix = tuple(float(x) for x in self.text_mix)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class TokenTargets:
    positions: tuple[int, ...]
    ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ObjectTargets:
    indices: tuple[int, ...]      # 0-based object indices (row j + 1 of O_L)
    features: np.ndarray
    labels: tuple[int, ...]


def num_to_mask(rate: float, length: int) -> int:
    # half-up rounding; Python's round() would send 0.5 to 0
    return max(1, int(np.floor(rate * length + 0.5)))


def mask_tokens(
    t: TextInput, rate: float, rng_seed, vocab_size: int, first_regular_id: int = 5
) -> tuple[TextInput, TokenTargets]:
    """BERT-style masking of ``max(1, round(rate*m))`` word positions.

    Chosen positions become [MASK] 80% of the time, a random regular token 10%,
    and stay unchanged 10%. [CLS] and [SEP] are never chosen.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    m = t.num_words
    if m == 0:
        raise NoTargetsError("cannot mask an empty text")
    rng = np.random.default_rng(rng_seed)
    k = min(m, num_to_mask(rate, m))
    positions = np.sort(rng.choice(np.arange(1, m + 1), size=k, replace=False))
    ids = list(t.token_ids)
    originals = tuple(ids[p] for p in positions)
    for p in positions:
        u = rng.random()
        if u < 0.8:
            ids[p] = MASK_ID
        elif u < 0.9:
            ids[p] = int(rng.integers(first_regular_id, vocab_size))
    return t.replace_tokens(ids), TokenTargets(tuple(int(p) for p in positions), originals)


def mask_objects(o: ObjectInput, rate: float, rng_seed) -> tuple[ObjectInput, ObjectTargets]:
    """Zero the features of ``max(1, round(rate*n))`` objects; boxes are kept."""
    n = o.num_objects
    if n == 0:
        raise NoTargetsError("cannot mask a scene without objects")
    rng = np.random.default_rng(rng_seed)
    k = min(n, num_to_mask(rate, n))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    feats = o.features.copy()
    originals = feats[idx].copy()
    feats[idx] = 0.0
    return o.with_features(feats), ObjectTargets(
        tuple(int(i) for i in idx), originals, tuple(int(o.detector_labels[i]) for i in idx)
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class PretrainPair:
    pair_id: int
    text: TextInput
    objects: ObjectInput
    qa_answer: int | None = None
    scene: object = None


@dataclass
class PretrainExample:
    pair_id: int
    caption_source: int
    text: TextInput
    objects: ObjectInput
    matched: bool
    mlm: TokenTargets | None
    obj: ObjectTargets | None
    qa_answer: int | None
    itm: bool = True  # False for question-answer pairs, which carry no matching label

    @property
    def itm_label(self) -> int:
        return 1 if self.matched else 0


@dataclass
class PretrainBatch:
    examples: list[PretrainExample]

    @property
    def itm_labels(self) -> np.ndarray:
        return np.array([e.itm_label for e in self.examples])

    @property
    def itm_rows(self) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.examples) if e.itm], dtype=int)

    def __len__(self) -> int:
        return len(self.examples)


class CaptionPool(Protocol):
    def draw(self, rng: np.random.Generator) -> tuple[int, TextInput]: ...

    def describes(self, pair: PretrainPair, text: TextInput) -> bool: ...


@dataclass
class ListCaptionPool:
    """Replacement captions from a fixed list of ``(pair_id, text)``."""

    captions: list[tuple[int, TextInput]]

    def draw(self, rng):
        return self.captions[int(rng.integers(len(self.captions)))]

    def describes(self, pair, text):
        return text.token_ids == pair.text.token_ids


def sample_itm(
    pairs: Sequence[PretrainPair],
    rng_seed,
    caption_pool: CaptionPool,
    mask_rate: float = 0.15,
    vocab_size: int | None = None,
    first_regular_id: int = 5,
    max_draws: int = 1000,
    hard_rate: float = 0.0,
) -> PretrainBatch:
    """Mismatch exactly half of the pairs, then apply masking to every pair.

    A mismatched pair gets a caption from a different pair that does not also
    describe its image; its MLM, object and QA targets are made inert. With
    ``hard_rate`` > 0 and a pool offering ``draw_similar``, that share of the
    replacements comes from a look-alike scene instead of a uniform draw.
    """
    b = len(pairs)
    if b < 2 or b % 2:
        raise ValueError(f"ITM sampling needs an even batch of at least 2, got {b}")
    if vocab_size is None:
        raise ValueError("vocab_size is required for token masking")
    rng = np.random.default_rng(rng_seed)
    mismatched = set(int(i) for i in rng.permutation(b)[: b // 2])
    examples = []
    for i, pair in enumerate(pairs):
        text, source = pair.text, pair.pair_id
        if i in mismatched:
            hard = hard_rate > 0 and hasattr(caption_pool, "draw_similar") and rng.random() < hard_rate
            for _ in range(max_draws):
                source, text = caption_pool.draw_similar(rng, pair) if hard else caption_pool.draw(rng)
                if source != pair.pair_id and not caption_pool.describes(pair, text):
                    break
            else:
                raise RuntimeError(f"no mismatching caption found for pair {pair.pair_id}")
        seed = [*np.atleast_1d(rng_seed).tolist(), i]
        masked_text, tok = mask_tokens(text, mask_rate, seed + [0], vocab_size, first_regular_id)
        masked_obj, obj = mask_objects(pair.objects, mask_rate, seed + [1])
        matched = i not in mismatched
        examples.append(PretrainExample(
            pair.pair_id, source, masked_text, masked_obj, matched,
            tok if matched else None,
            obj if matched else None,
            pair.qa_answer if matched else None,
        ))
    return PretrainBatch(examples)


# ---------------------------------------------------------------------------
# heads and losses


def ensure_pretrain_heads(p: SharedParams, num_labels: int, num_answers: int) -> None:
    cfg = p.config
    d = cfg.hidden_dim
    p.add_head("head.mlm.weight", (d, cfg.vocab_size))
    p.add_head("head.mlm.bias", (cfg.vocab_size,))
    p.add_head("head.obj_reg.weight", (d, cfg.object_feature_dim))
    p.add_head("head.obj_reg.bias", (cfg.object_feature_dim,))
    p.add_head("head.obj_label.weight", (d, num_labels))
    p.add_head("head.obj_label.bias", (num_labels,))
    p.add_head("head.itm.weight", (d, 2))
    p.add_head("head.itm.bias", (2,))
    p.add_head("head.qa.hidden.weight", (d, d))
    p.add_head("head.qa.hidden.bias", (d,))
    p.add_head("head.qa.out.weight", (d, num_answers))
    p.add_head("head.qa.out.bias", (num_answers,))


def _as_batch(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def mlm_loss(H_L: Tensor, targets: Sequence[TokenTargets | None], p: SharedParams) -> Tensor | None:
    """Mean cross-entropy over active masked positions; None when nothing is active."""
    H = _as_batch(H_L)
    rows, cols, ids = [], [], []
    for b, tgt in enumerate(targets):
        if tgt is None:
            continue
        rows.extend([b] * len(tgt.positions))
        cols.extend(tgt.positions)
        ids.extend(tgt.ids)
    if not ids:
        return None
    states = T.take(H, (np.array(rows), np.array(cols)))
    logits = T.linear(states, p["head.mlm.weight"], p["head.mlm.bias"])
    return T.cross_entropy(logits, ids)


def object_loss(
    O_L: Tensor, targets: Sequence[ObjectTargets | None], p: SharedParams
) -> tuple[Tensor, Tensor] | None:
    """(ROI-feature smooth-L1 regression, detected-label cross-entropy) over masked objects."""
    O = _as_batch(O_L)
    rows, cols, feats, labels = [], [], [], []
    for b, tgt in enumerate(targets):
        if tgt is None:
            continue
        rows.extend([b] * len(tgt.indices))
        cols.extend(i + 1 for i in tgt.indices)  # row 0 is [IMG]
        feats.append(tgt.features)
        labels.extend(tgt.labels)
    if not labels:
        return None
    states = T.take(O, (np.array(rows), np.array(cols)))
    pred = T.linear(states, p["head.obj_reg.weight"], p["head.obj_reg.bias"])
    reg = T.smooth_l1(pred, np.concatenate(feats, axis=0))
    logits = T.linear(states, p["head.obj_label.weight"], p["head.obj_label.bias"])
    return reg, T.cross_entropy(logits, labels)


def itm_logits(pooled: Tensor, p: SharedParams) -> Tensor:
    pooled = T.reshape(pooled, (1,) + pooled.shape) if pooled.ndim == 1 else pooled
    return T.linear(pooled, p["head.itm.weight"], p["head.itm.bias"])


def itm_loss(pooled: Tensor, labels, p: SharedParams) -> Tensor:
    """Two-way cross-entropy: label 1 = matched, 0 = mismatched."""
    return T.cross_entropy(itm_logits(pooled, p), np.atleast_1d(labels))


def qa_logits(pooled: Tensor, p: SharedParams) -> Tensor:
    pooled = T.reshape(pooled, (1,) + pooled.shape) if pooled.ndim == 1 else pooled
    h = T.gelu(T.linear(pooled, p["head.qa.hidden.weight"], p["head.qa.hidden.bias"]))
    return T.linear(h, p["head.qa.out.weight"], p["head.qa.out.bias"])


def qa_loss(pooled: Tensor, answers: Sequence[int | None], p: SharedParams) -> Tensor | None:
    """Answer-classification cross-entropy over pairs that carry an answer."""
    pooled = T.reshape(pooled, (1,) + pooled.shape) if pooled.ndim == 1 else pooled
    rows = [i for i, a in enumerate(answers) if a is not None]
    if not rows:
        return None
    n_answers = p["head.qa.out.bias"].shape[0]
    ans = [int(answers[i]) for i in rows]
    if min(ans) < 0 or max(ans) >= n_answers:
        raise IndexError(f"answer id out of range [0, {n_answers})")
    return T.cross_entropy(qa_logits(T.take(pooled, np.array(rows)), p), ans)


# ---------------------------------------------------------------------------
# schedule and training step


def schedule_mode(step: int, mode_mix: str = "alternate") -> str:
    """Even steps single-stream, odd steps two-stream (or a fixed mode for ablations)."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if mode_mix == "single_only":
        return SINGLE_STREAM
    if mode_mix == "two_only":
        return TWO_STREAM
    if mode_mix != "alternate":
        raise ValueError(f"unknown mode_mix {mode_mix!r}")
    return SINGLE_STREAM if step % 2 == 0 else TWO_STREAM


@dataclass
class LossReport:
    mode: str
    mlm: float = 0.0
    roi_regression: float = 0.0
    label_clf: float = 0.0
    itm: float = 0.0
    qa: float = 0.0
    total: float = 0.0
    enabled: dict[str, bool] = field(default_factory=dict)
    lr: float | None = None
    step: int | None = None

    def component(self, name: str) -> float | None:
        return getattr(self, name) if self.enabled.get(name) else None

    def to_metrics(self) -> dict:
        return {
            "step": self.step, "mode": self.mode,
            "mlm": self.component("mlm"), "roi": self.component("roi_regression"),
            "label": self.component("label_clf"), "itm": self.component("itm"),
            "qa": self.component("qa"), "total": self.total, "lr": self.lr,
        }


def compute_losses(
    p: SharedParams, batch: PretrainBatch, mode: str, rng: np.random.Generator | None = None
) -> tuple[Tensor, LossReport]:
    ex = batch.examples
    enc = encode_pairs(p, [e.text for e in ex], [e.objects for e in ex], mode, rng=rng)
    parts: dict[str, Tensor | None] = {"mlm": mlm_loss(enc.text, [e.mlm for e in ex], p)}
    obj = object_loss(enc.objects, [e.obj for e in ex], p)
    parts["roi_regression"], parts["label_clf"] = obj if obj is not None else (None, None)
    rows = batch.itm_rows
    parts["itm"] = None
    if len(rows):
        pooled = enc.pooled if len(rows) == len(ex) else T.take(enc.pooled, rows)
        parts["itm"] = itm_loss(pooled, batch.itm_labels[rows], p)
    parts["qa"] = qa_loss(enc.pooled, [e.qa_answer for e in ex], p)
    report = LossReport(mode=mode)
    total: Tensor | None = None
    for name in COMPONENTS:
        part = parts[name]
        report.enabled[name] = part is not None
        if part is None:
            continue
        setattr(report, name, part.item())
        total = part if total is None else total + part
    report.total = total.item()
    return total, report


def train_step(
    batch: PretrainBatch,
    params: SharedParams,
    optimizer: Adam,
    step: int,
    mode_mix: str = "alternate",
    rng: np.random.Generator | None = None,
) -> LossReport:
    """One equal-weight multi-task update in the scheduled mode."""
    mode = schedule_mode(step, mode_mix)
    params.zero_grad()
    total, report = compute_losses(params, batch, mode, rng)
    T.backward(total)
    report.lr = optimizer.step(params)
    report.step = step
    return report


# ---------------------------------------------------------------------------
# data stream over a synthetic corpus


class CorpusCaptionPool:
    """Replacement captions drawn from other scenes of a corpus split."""

    def __init__(self, records, vocab, seed, fresh_text: bool):
        self.records = records
        self.vocab = vocab
        self.seed = seed
        self.fresh_text = fresh_text
        self._by_id = {r.scene_id: r for r in records}
        self._by_count: dict[int, list] = {}
        for r in records:
            self._by_count.setdefault(len(r.scene.objects), []).append(r)

    def draw(self, rng):
        return self._caption(self.records[int(rng.integers(len(self.records)))], rng)

    def draw_similar(self, rng, pair):
        """The coarse caption of some scene with as many objects as ``pair``'s scene.

        Once the count agrees, a coarse caption can only be wrong about the
        layout, so these negatives are resolvable from box positions alone.
        """
        scene = pair.scene if pair.scene is not None else self._by_id[pair.pair_id].scene
        same = self._by_count.get(len(scene.objects), [])
        if len(same) < 2:
            return self.draw(rng)
        return self._caption(same[int(rng.integers(len(same)))], rng, "coarse")

    def _caption(self, rec, rng, level: str | None = None):
        if level is None:
            level = "coarse" if rng.random() < 0.5 else "fine"
        if self.fresh_text and level == "fine":
            words = caption_words(rec.scene, "fine", [self.seed, rec.scene_id, int(rng.integers(1 << 30))])
        else:
            words = rec.coarse if level == "coarse" else rec.fine
        return rec.scene_id, self.vocab.encode(words)

    def describes(self, pair, text):
        scene = pair.scene if pair.scene is not None else self._by_id[pair.pair_id].scene
        return caption_holds(scene, self.vocab.words(text))


class PretrainData:
    """Deterministic per-step batches: scenes, text kind, ITM sampling and masking."""

    def __init__(self, records, vocab, config: PretrainConfig, seed: int = 0):
        self.records = list(records)
        self.vocab = vocab
        self.config = config
        self.seed = int(seed)
        self.pool = CorpusCaptionPool(self.records, vocab, self.seed, config.fresh_text)

    def pair_for(self, rec, kind: str, rng) -> PretrainPair:
        fresh = self.config.fresh_text
        sub = [self.seed, rec.scene_id, int(rng.integers(1 << 30))]
        if kind == "question":
            words, answer = qa_words(rec.scene, sub) if fresh else (rec.question, rec.answer)
            return PretrainPair(rec.scene_id, self.vocab.encode(words), rec.scene.object_input(),
                                ANSWERS.index(answer), rec.scene)
        if kind == "fine" and fresh:
            words = caption_words(rec.scene, "fine", sub)
        else:
            words = rec.coarse if kind == "coarse" else rec.fine
        return PretrainPair(rec.scene_id, self.vocab.encode(words), rec.scene.object_input(), None, rec.scene)

    def batch(self, step: int) -> PretrainBatch:
        """Caption pairs go through ITM sampling; question pairs stay matched and train QA only."""
        cfg = self.config
        rng = np.random.default_rng([self.seed, 17, step])
        b = cfg.batch_size
        w = np.array(cfg.text_mix, dtype=float) / sum(cfg.text_mix)
        n_q = int(round(b * w[2]))
        n_q -= n_q % 2
        n_c = b - n_q
        idx = rng.choice(len(self.records), size=b, replace=len(self.records) < b)
        caption_w = w[:2] / w[:2].sum() if w[:2].sum() > 0 else np.array([0.5, 0.5])
        kinds = list(rng.choice(["coarse", "fine"], size=n_c, p=caption_w)) + ["question"] * n_q
        pairs = [self.pair_for(self.records[int(i)], str(k), rng) for i, k in zip(idx, kinds)]
        vocab_size, first = len(self.vocab), self.vocab.first_regular_id
        examples = []
        if n_c:
            examples = sample_itm(pairs[:n_c], [self.seed, 23, step], self.pool, cfg.mask_rate, vocab_size, first,
                                  hard_rate=cfg.hard_negative_rate).examples
        for i, pair in enumerate(pairs[n_c:]):
            seed = [self.seed, 29, step, i]
            text, tok = mask_tokens(pair.text, cfg.mask_rate, seed + [0], vocab_size, first)
            objs, obj = mask_objects(pair.objects, cfg.mask_rate, seed + [1])
            examples.append(PretrainExample(pair.pair_id, pair.pair_id, text, objs, True, tok, obj, pair.qa_answer, itm=False))
        return PretrainBatch(examples)


def append_metrics(path: str | Path, record: dict) -> None:
    """Append one JSON line and flush, so the file parses at any truncation point."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def itm_accuracy(p: SharedParams, data: PretrainData, n_batches: int, mode: str, masked: bool = True,
                 seed_offset: int = 10_000) -> float:
    """Matching accuracy on half-mismatched caption batches drawn from ``data``.

    With ``masked`` the batches go through the same sampling and masking as
    training (the pre-training input distribution); otherwise texts and
    objects are left intact.
    """
    correct = total = 0
    cfg = data.config
    if masked:
        uniform = replace(cfg, text_mix=(0.5, 0.5, 0.0), hard_negative_rate=0.0)
        caption_only = PretrainData(data.records, data.vocab, uniform, data.seed)
        for s in range(n_batches):
            batch = caption_only.batch(seed_offset + s)
            with T.no_grad():
                enc = encode_pairs(p, [e.text for e in batch.examples], [e.objects for e in batch.examples], mode)
                pred = itm_logits(enc.pooled, p).data.argmax(axis=1)
            correct += int((pred == batch.itm_labels).sum())
            total += len(batch)
        return correct / total
    for s in range(n_batches):
        rng = np.random.default_rng([data.seed, 31, seed_offset + s])
        idx = rng.choice(len(data.records), size=cfg.batch_size, replace=len(data.records) < cfg.batch_size)
        kinds = ["fine" if rng.random() < 0.5 else "coarse" for _ in idx]
        pairs = [data.pair_for(data.records[int(i)], k, rng) for i, k in zip(idx, kinds)]
        order = rng.permutation(len(pairs))
        mism = set(int(i) for i in order[: len(pairs) // 2])
        texts, labels = [], []
        for i, pair in enumerate(pairs):
            text = pair.text
            if i in mism:
                while True:
                    src, text = data.pool.draw(rng)
                    if src != pair.pair_id and not data.pool.describes(pair, text):
                        break
            texts.append(text)
            labels.append(0 if i in mism else 1)
        with T.no_grad():
            enc = encode_pairs(p, texts, [pr.objects for pr in pairs], mode)
            pred = itm_logits(enc.pooled, p).data.argmax(axis=1)
        correct += int((pred == np.array(labels)).sum())
        total += len(labels)
    return correct / total
