"""Deterministic synthetic image-text world.

Scenes hold 1-6 shapes (4 types x 4 colors) on a 100x100 canvas. Each object's
"detector feature" is the prototype of its (type, color) class plus Gaussian
noise, standing in for region features. Captions come at two granularities:
coarse ones only state the count and rough horizontal layout, fine ones name
two specific objects and their spatial relation. The canvas uses a y-up
convention, so "above" means a larger center y.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CLS_ID, MASK_ID, PAD_ID, SEP_ID, ObjectInput, TextInput

SHAPES = ("square", "circle", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
COUNT_WORDS = ("one", "two", "three", "four", "five", "six")
ANSWERS = COUNT_WORDS + COLORS + SHAPES + ("yes", "no")
RELATIONS = ("left", "right", "above", "below")
CANVAS = (100.0, 100.0)
N_MAX = 6
FEATURE_DIM = 16
FEATURE_NOISE = 0.05
PROTOTYPE_SEED = 20240917
NUM_LABELS = len(SHAPES) * len(COLORS)

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
WORDS = (
    "a", "the", "of", "on", "in", "is", "there", "shape", "shapes", "object",
    "how", "many", "what", "color", "middle", "both", "exactly", ":", "?",
) + COUNT_WORDS + COLORS + SHAPES + RELATIONS


class GenerationError(RuntimeError):
    pass


class VocabMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS[:4]:
            raise VocabMismatchError("vocab must start with [PAD] [CLS] [SEP] [MASK]")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabMismatchError("duplicate vocab tokens")

    @classmethod
    def default(cls) -> "Vocab":
        return cls(SPECIALS + WORDS)

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def first_regular_id(self) -> int:
        return len(SPECIALS)

    def encode(self, words: Sequence[str]) -> TextInput:
        idx = self.index
        missing = [w for w in words if w not in idx]
        if missing:
            raise VocabMismatchError(f"tokens not in vocab: {missing}")
        return TextInput((CLS_ID, *(idx[w] for w in words), SEP_ID))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def words(self, text: TextInput) -> list[str]:
        """Token strings between [CLS] and [SEP]."""
        return self.decode(text.token_ids[1:-1])

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "sha256": self.digest(),
                "specials": {"pad": PAD_ID, "cls": CLS_ID, "sep": SEP_ID, "mask": MASK_ID}}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        v = cls(tuple(obj["tokens"]))
        if "sha256" in obj and obj["sha256"] != v.digest():
            raise VocabMismatchError("vocab file hash does not match its tokens")
        return v


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: tuple[float, float, float, float]

    @property
    def label(self) -> int:
        return detector_label(self.shape, self.color)

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return (x1 + x2) / 2.0, (y1 + y2) / 2.0


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[SceneObject, ...]
    features: np.ndarray = field(compare=False, repr=False)
    canvas: tuple[float, float] = CANVAS

    def object_input(self) -> ObjectInput:
        return ObjectInput(
            self.features,
            np.array([o.box for o in self.objects]),
            self.canvas,
            np.array([o.label for o in self.objects]),
        )

    @property
    def classes(self) -> list[tuple[str, str]]:
        return [(o.color, o.shape) for o in self.objects]


def detector_label(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def prototypes() -> np.ndarray:
    """(shape, color) prototypes as the sum of a shape and a color vector."""
    rng = np.random.default_rng(PROTOTYPE_SEED)
    shape_vecs = rng.normal(0.0, np.sqrt(0.5), size=(len(SHAPES), FEATURE_DIM))
    color_vecs = rng.normal(0.0, np.sqrt(0.5), size=(len(COLORS), FEATURE_DIM))
    return (shape_vecs[:, None, :] + color_vecs[None, :, :]).reshape(NUM_LABELS, FEATURE_DIM)


_PROTOTYPES = prototypes()


def gen_scene(rng_seed, scene_id: int = 0) -> tuple[Scene, ObjectInput]:
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(1, N_MAX + 1))
    w, h = CANVAS
    objects = []
    for _ in range(n):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        bw, bh = (float(v) for v in rng.integers(10, 31, size=2))
        x1 = float(rng.integers(0, int(w - bw) + 1))
        y1 = float(rng.integers(0, int(h - bh) + 1))
        objects.append(SceneObject(shape, color, (x1, y1, x1 + bw, y1 + bh)))
    labels = [o.label for o in objects]
    feats = _PROTOTYPES[labels] + rng.normal(0.0, FEATURE_NOISE, size=(n, FEATURE_DIM))
    scene = Scene(scene_id, tuple(objects), feats)
    return scene, scene.object_input()


def relation(a: SceneObject, b: SceneObject) -> str:
    """Relation word for "a <rel> b" from box centers; ties go to the horizontal axis."""
    (ax, ay), (bx, by) = a.center, b.center
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy):
        return "left" if dx > 0 else "right"
    return "below" if dy > 0 else "above"


def _layout(scene: Scene) -> list[str]:
    mean_x = float(np.mean([o.center[0] for o in scene.objects]))
    if mean_x < 40.0:
        return ["on", "the", "left"]
    if mean_x > 60.0:
        return ["on", "the", "right"]
    return ["in", "the", "middle"]


def _count_phrase(n: int) -> list[str]:
    return [COUNT_WORDS[n - 1], "shape" if n == 1 else "shapes"]


def caption_words(scene: Scene, level: str, rng_seed) -> list[str]:
    if level == "coarse":
        return _count_phrase(len(scene.objects)) + _layout(scene)
    if level != "fine":
        raise ValueError(f"unknown caption level {level!r}")
    rng = np.random.default_rng(rng_seed)
    objs = scene.objects
    words = _count_phrase(len(objs)) + [":"]
    if len(objs) == 1:
        return words + ["a", objs[0].color, objs[0].shape]
    i, j = (int(k) for k in rng.choice(len(objs), size=2, replace=False))
    a, b = objs[i], objs[j]
    rel = relation(a, b)
    tail = [rel, "of"] if rel in ("left", "right") else [rel]
    return words + ["a", a.color, a.shape] + tail + ["a", b.color, b.shape]


def gen_caption(scene: Scene, level: str, rng_seed, vocab: Vocab | None = None) -> TextInput:
    return (vocab or Vocab.default()).encode(caption_words(scene, level, rng_seed))


def _parse_object(words: Sequence[str], k: int) -> tuple[tuple[str, str], int]:
    if words[k] != "a" or words[k + 1] not in COLORS or words[k + 2] not in SHAPES:
        raise ValueError("not an object phrase")
    return (words[k + 1], words[k + 2]), k + 3


def caption_holds(scene: Scene, words: Sequence[str]) -> bool:
    """Whether a caption (coarse or fine template) is true of ``scene``.

    Questions and unparseable text return False.
    """
    words = list(words)
    try:
        n = COUNT_WORDS.index(words[0]) + 1
    except (ValueError, IndexError):
        return False
    if n != len(scene.objects) or words[1:2] != _count_phrase(n)[1:]:
        return False
    rest = words[2:]
    if rest and rest[0] != ":":
        return rest == _layout(scene)
    try:
        first, k = _parse_object(rest, 1)
    except (ValueError, IndexError):
        return False
    if k == len(rest):
        return first in scene.classes
    rel = rest[k]
    k += 2 if rel in ("left", "right") else 1
    try:
        second, k = _parse_object(rest, k)
    except (ValueError, IndexError):
        return False
    if k != len(rest):
        return False
    objs = scene.objects
    return any(
        i != j and (a.color, a.shape) == first and (b.color, b.shape) == second and relation(a, b) == rel
        for i, a in enumerate(objs)
        for j, b in enumerate(objs)
    )


# ---------------------------------------------------------------------------
# question answering

QUESTION_TYPES = ("count", "color", "shape", "exists")


def qa_words(scene: Scene, rng_seed, max_attempts: int = 100, type_weights=None) -> tuple[list[str], str]:
    """Templated question and its unique answer; ambiguous draws are re-rolled.

    ``type_weights`` skews the question-type distribution (default uniform).
    """
    rng = np.random.default_rng(rng_seed)
    objs = scene.objects
    probs = None if type_weights is None else np.asarray(type_weights, dtype=float) / np.sum(type_weights)
    for _ in range(max_attempts):
        kind = QUESTION_TYPES[int(rng.choice(len(QUESTION_TYPES), p=probs))]
        if kind == "count":
            return ["how", "many", "shapes", "?"], COUNT_WORDS[len(objs) - 1]
        if kind == "color":
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            hits = [o for o in objs if o.shape == shape]
            if len(hits) == 1:
                return ["what", "color", "is", "the", shape, "?"], hits[0].color
        elif kind == "shape":
            color = COLORS[int(rng.integers(len(COLORS)))]
            hits = [o for o in objs if o.color == color]
            if len(hits) == 1:
                return ["what", "shape", "is", "the", color, "object", "?"], hits[0].shape
        else:
            color = COLORS[int(rng.integers(len(COLORS)))]
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            present = (color, shape) in scene.classes
            return ["is", "there", "a", color, shape, "?"], "yes" if present else "no"
    raise GenerationError(f"no unambiguous question for scene {scene.scene_id} in {max_attempts} attempts")


def gen_qa(scene: Scene, rng_seed, vocab: Vocab | None = None) -> tuple[TextInput, int]:
    words, answer = qa_words(scene, rng_seed)
    return (vocab or Vocab.default()).encode(words), ANSWERS.index(answer)


def answer_for(scene: Scene, words: Sequence[str]) -> str | None:
    """Ground-truth answer of a templated question, or None if it is ambiguous."""
    words = list(words)
    if words == ["how", "many", "shapes", "?"]:
        return COUNT_WORDS[len(scene.objects) - 1]
    if words[:4] == ["what", "color", "is", "the"]:
        hits = [o for o in scene.objects if o.shape == words[4]]
        return hits[0].color if len(hits) == 1 else None
    if words[:4] == ["what", "shape", "is", "the"]:
        hits = [o for o in scene.objects if o.color == words[4]]
        return hits[0].shape if len(hits) == 1 else None
    if words[:3] == ["is", "there", "a"]:
        return "yes" if (words[3], words[4]) in scene.classes else "no"
    return None


# ---------------------------------------------------------------------------
# corpus


def scene_seed(corpus_seed: int, scene_id: int) -> list[int]:
    return [int(corpus_seed), int(scene_id)]


@dataclass
class SceneRecord:
    scene: Scene
    split: str
    coarse: list[str]
    fine: list[str]
    question: list[str]
    answer: str

    @property
    def scene_id(self) -> int:
        return self.scene.scene_id

    def to_json(self) -> dict:
        s = self.scene
        return {
            "scene_id": s.scene_id,
            "split": self.split,
            "image_size": list(s.canvas),
            "objects": [{"shape": o.shape, "color": o.color, "box": list(o.box)} for o in s.objects],
            "features": [[float(v) for v in row] for row in s.features],
            "detector_labels": [o.label for o in s.objects],
            "captions": {"coarse": " ".join(self.coarse), "fine": " ".join(self.fine)},
            "qa": {"question": " ".join(self.question), "answer": self.answer,
                   "answer_id": ANSWERS.index(self.answer)},
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocab) -> "SceneRecord":
        objs = tuple(SceneObject(o["shape"], o["color"], tuple(float(v) for v in o["box"])) for o in obj["objects"])
        scene = Scene(int(obj["scene_id"]), objs, np.array(obj["features"], dtype=np.float64),
                      tuple(float(v) for v in obj["image_size"]))
        rec = cls(scene, obj["split"], obj["captions"]["coarse"].split(), obj["captions"]["fine"].split(),
                  obj["qa"]["question"].split(), obj["qa"]["answer"])
        for words in (rec.coarse, rec.fine, rec.question):
            vocab.encode(words)
        if [o.label for o in objs] != list(obj["detector_labels"]):
            raise VocabMismatchError(f"scene {scene.scene_id}: detector labels disagree with objects")
        return rec


@dataclass
class Corpus:
    seed: int
    splits: dict[str, list[SceneRecord]]
    vocab: Vocab

    def __getitem__(self, split: str) -> list[SceneRecord]:
        return self.splits[split]

    def records(self) -> list[SceneRecord]:
        return [r for split in ("train", "dev", "test") for r in self.splits.get(split, [])]


def make_record(corpus_seed: int, scene_id: int, split: str) -> SceneRecord:
    base = scene_seed(corpus_seed, scene_id)
    scene, _ = gen_scene(base + [0], scene_id)
    question, answer = qa_words(scene, base + [3])
    return SceneRecord(scene, split, caption_words(scene, "coarse", base + [1]),
                       caption_words(scene, "fine", base + [2]), question, answer)


def build_corpus(n_pairs: int, split_ratios=(0.8, 0.1, 0.1), rng_seed: int = 0) -> Corpus:
    ratios = np.asarray(split_ratios, dtype=np.float64)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("split ratios must be three nonnegative numbers summing to 1")
    order = np.random.default_rng([int(rng_seed), 999]).permutation(n_pairs)
    n_train = int(round(ratios[0] * n_pairs))
    n_dev = int(round(ratios[1] * n_pairs))
    bounds = {"train": order[:n_train], "dev": order[n_train:n_train + n_dev], "test": order[n_train + n_dev:]}
    splits = {
        name: [make_record(rng_seed, int(i), name) for i in sorted(ids)]
        for name, ids in bounds.items()
    }
    return Corpus(int(rng_seed), splits, Vocab.default())


def write_corpus(corpus: Corpus, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON lines, one scene per line) and ``<path>.vocab.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in corpus.records():
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    vocab_path = vocab_path_for(path)
    vocab_path.write_text(json.dumps({**corpus.vocab.to_json(), "corpus_seed": corpus.seed}, indent=1) + "\n")
    return path, vocab_path


def vocab_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def read_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    meta = json.loads(vocab_path_for(path).read_text())
    vocab = Vocab.from_json(meta)
    splits: dict[str, list[SceneRecord]] = {"train": [], "dev": [], "test": []}
    with path.open() as fh:
        for line in fh:
            if line.strip():
                rec = SceneRecord.from_json(json.loads(line), vocab)
                splits[rec.split].append(rec)
    return Corpus(int(meta.get("corpus_seed", 0)), splits, vocab)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# oracle scoring


def decode_scene(scene: Scene) -> Scene:
    """Re-derive object classes from features by nearest prototype."""
    d = ((scene.features[:, None, :] - _PROTOTYPES[None, :, :]) ** 2).sum(-1)
    labels = d.argmin(axis=1)
    objs = tuple(
        SceneObject(SHAPES[int(l) // len(COLORS)], COLORS[int(l) % len(COLORS)], o.box)
        for l, o in zip(labels, scene.objects)
    )
    return Scene(scene.scene_id, objs, scene.features, scene.canvas)


def oracle_score(caption: Sequence[str], scene: Scene) -> float:
    """Prototype-based matching score: 1 if the decoded scene satisfies the caption."""
    return 1.0 if caption_holds(decode_scene(scene), caption) else 0.0
