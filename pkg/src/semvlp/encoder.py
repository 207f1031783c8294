"""Input embeddings and the shared Transformer encoder.

One :class:`SharedParams` store drives both encoding modes:

* single-stream: ``[IMG] o_1..o_n [CLS] w_1..w_m [SEP]`` runs through every
  layer's self-attention and feed-forward block with full attention;
* two-stream: the text runs through the same blocks on its own, then the
  image runs through them too, with a cross-attention block (image queries,
  final text states as keys/values) inserted in every layer above the split.

Internally everything is batched with padding masks; the single-example
functions :func:`encode_single_stream` and :func:`encode_two_stream` wrap a
batch of one and additionally return labelled attention maps.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
TEXT_SEGMENT, IMAGE_SEGMENT = 0, 1
SINGLE_STREAM, TWO_STREAM = "single_stream", "two_stream"
MODES = (SINGLE_STREAM, TWO_STREAM)


class InputError(ValueError):
    """A text or object input violates its contract."""


@dataclass
class EncoderConfig:
    num_layers: int = 4
    split_layer: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 48
    max_text_len: int = 24
    object_feature_dim: int = 16
    dropout_rate: float = 0.0
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if not 0 <= self.split_layer <= self.num_layers:
            raise ValueError(f"split_layer must lie in [0, {self.num_layers}], got {self.split_layer}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.hidden_dim < 2 or self.ffn_dim < 1 or self.vocab_size < 5:
            raise ValueError("degenerate encoder dimensions")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def base(cls, vocab_size: int = 30522) -> "EncoderConfig":
        """The 12-layer, 768-wide configuration with the split at layer 6."""
        return cls(num_layers=12, split_layer=6, hidden_dim=768, num_heads=12, ffn_dim=3072,
                   vocab_size=vocab_size, max_text_len=20, object_feature_dim=2048)


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class TextInput:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...] = ()

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        object.__setattr__(self, "token_ids", ids)
        if len(ids) < 2 or ids[0] != CLS_ID or ids[-1] != SEP_ID:
            raise InputError("text must start with [CLS] and end with [SEP]")
        segs = tuple(int(s) for s in self.segment_ids) or (TEXT_SEGMENT,) * len(ids)
        if len(segs) != len(ids):
            raise InputError("segment_ids length differs from token_ids")
        object.__setattr__(self, "segment_ids", segs)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(range(len(self.token_ids)))

    @property
    def num_words(self) -> int:
        return len(self.token_ids) - 2

    def replace_tokens(self, token_ids: Sequence[int]) -> "TextInput":
        return TextInput(tuple(token_ids), self.segment_ids)


@dataclass(frozen=True, eq=False)
class ObjectInput:
    features: np.ndarray
    boxes: np.ndarray
    image_size: tuple[float, float]
    detector_labels: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.array(self.detector_labels, dtype=np.int64).reshape(-1)
        if feats.ndim != 2:
            feats = feats.reshape(len(boxes), -1)
        if not (len(feats) == len(boxes) == len(labels)):
            raise InputError("features, boxes and detector_labels disagree on object count")
        w, h = (float(v) for v in self.image_size)
        if w <= 0 or h <= 0:
            raise InputError(f"degenerate image size {(w, h)}")
        x1, y1, x2, y2 = boxes.T
        if ((x1 < 0) | (x1 > x2) | (x2 > w) | (y1 < 0) | (y1 > y2) | (y2 > h)).any():
            raise InputError("box outside the image")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "detector_labels", labels)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def num_objects(self) -> int:
        return len(self.boxes)

    def with_features(self, features: np.ndarray) -> "ObjectInput":
        return ObjectInput(features, self.boxes, self.image_size, self.detector_labels)

    def locations(self) -> np.ndarray:
        return np.array([location_vector(b, self.image_size) for b in self.boxes]).reshape(-1, 4)


def location_vector(box, image_size) -> np.ndarray:
    """Normalized box corners ``(x1/W, y1/H, x2/W, y2/H)``."""
    w, h = (float(v) for v in image_size)
    if w == 0 or h == 0:
        raise InputError("degenerate image: zero width or height")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
        raise InputError(f"box {box} outside image {image_size}")
    return np.array([x1 / w, y1 / h, x2 / w, y2 / h])


# ---------------------------------------------------------------------------
# parameters


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    shapes[f"{prefix}.ln.gamma"] = (d,)
    shapes[f"{prefix}.ln.beta"] = (d,)
    return shapes


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every encoder parameter."""
    d, f, fd = cfg.hidden_dim, cfg.ffn_dim, cfg.object_feature_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.word": (cfg.vocab_size, d),
        "embed.segment": (2, d),
        "embed.position": (cfg.max_text_len + 2, d),
        "embed.text_ln.gamma": (d,),
        "embed.text_ln.beta": (d,),
        "embed.img": (fd + 4,),
        "embed.obj_proj.weight": (fd + 4, d),
        "embed.obj_proj.bias": (d,),
        "embed.obj_ln.gamma": (d,),
        "embed.obj_ln.beta": (d,),
    }
    for l in range(1, cfg.num_layers + 1):
        shapes.update(_attention_shapes(f"layer{l}.self", d))
        shapes.update({
            f"layer{l}.ffn.in.weight": (d, f),
            f"layer{l}.ffn.in.bias": (f,),
            f"layer{l}.ffn.out.weight": (f, d),
            f"layer{l}.ffn.out.bias": (d,),
            f"layer{l}.ffn.ln.gamma": (d,),
            f"layer{l}.ffn.ln.beta": (d,),
        })
        if l > cfg.split_layer:
            shapes.update(_attention_shapes(f"layer{l}.cross", d))
    return shapes


def closed_form_param_count(cfg: EncoderConfig) -> int:
    """Encoder parameter count from the block formulas alone."""
    d, f, fd = cfg.hidden_dim, cfg.ffn_dim, cfg.object_feature_dim
    embeddings = (cfg.vocab_size + 2 + cfg.max_text_len + 2) * d + 2 * d + (fd + 4) + (fd + 4) * d + d + 2 * d
    attn = 4 * (d * d + d) + 2 * d
    ffn = d * f + f + f * d + d + 2 * d
    return embeddings + cfg.num_layers * (attn + ffn) + (cfg.num_layers - cfg.split_layer) * attn


def _init_value(name: str, shape, std: float, seed: int) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith(".beta") or name.endswith(".bias"):
        return np.zeros(shape)
    # seeded per name so initialization is independent of registration order
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return _truncated_normal(rng, shape, std)


def param_group(name: str) -> str:
    """Gradient-check grouping: ``embed``, ``layer2.self``, ``head.mlm`` ..."""
    parts = name.split(".")
    if parts[0] == "embed":
        return "embed"
    return ".".join(parts[:2])


class SharedParams:
    """The single parameter store read by both encoding modes and all heads."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor], seed: int = 0):
        self.config = config
        self.seed = seed
        self._tensors: dict[str, Tensor] = dict(tensors)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "SharedParams":
        tensors = {
            name: Tensor(_init_value(name, shape, config.init_std, seed), requires_grad=True)
            for name, shape in encoder_shapes(config).items()
        }
        return cls(config, tensors, seed)

    def add_head(self, name: str, shape: Sequence[int], init: str = "normal") -> Tensor:
        """Register (or return the existing) task-head parameter ``head.<...>``."""
        if not name.startswith("head."):
            raise ValueError("task-head parameter names must start with 'head.'")
        if name in self._tensors:
            existing = self._tensors[name]
            if existing.shape != tuple(shape):
                raise ValueError(f"{name} already registered with shape {existing.shape}")
            return existing
        if init == "zeros":
            value = np.zeros(tuple(shape))
        else:
            value = _init_value(name, tuple(shape), self.config.init_std, self.seed)
        t = Tensor(value, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def encoder_names(self) -> list[str]:
        return [n for n in self._tensors if not n.startswith("head.")]

    def encoder_param_count(self) -> int:
        return sum(self._tensors[n].data.size for n in self.encoder_names())

    def param_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self._tensors:
            out.setdefault(param_group(n), []).append(n)
        return out

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def clone(self) -> "SharedParams":
        return SharedParams(
            self.config,
            {n: Tensor(t.data, requires_grad=True) for n, t in self._tensors.items()},
            self.seed,
        )

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}


# ---------------------------------------------------------------------------
# batching


@dataclass
class TextBatch:
    ids: np.ndarray        # (B, T) int, PAD beyond each length
    segments: np.ndarray   # (B, T) int
    lengths: np.ndarray    # (B,)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class ObjectBatch:
    inputs: np.ndarray     # (B, N, feature_dim + 4): features ++ location
    counts: np.ndarray     # (B,)

    @property
    def mask(self) -> np.ndarray:
        """(B, N + 1) validity including the leading [IMG] row."""
        n = self.inputs.shape[1]
        return np.arange(n + 1)[None, :] <= self.counts[:, None]


def collate_text(texts: Sequence[TextInput], cfg: EncoderConfig) -> TextBatch:
    lengths = np.array([len(t) for t in texts], dtype=np.int64)
    if lengths.max() > cfg.max_text_len + 2:
        raise InputError(f"text longer than max_text_len + 2 = {cfg.max_text_len + 2}")
    ids = np.full((len(texts), lengths.max()), PAD_ID, dtype=np.int64)
    segs = np.zeros_like(ids)
    for i, t in enumerate(texts):
        ids[i, : len(t)] = t.token_ids
        segs[i, : len(t)] = t.segment_ids
    if ids.max() >= cfg.vocab_size:
        raise InputError(f"token id {ids.max()} out of range for vocab_size {cfg.vocab_size}")
    if segs.max() > 1 or segs.min() < 0:
        raise InputError("segment ids must be 0 or 1")
    return TextBatch(ids, segs, lengths)


def collate_objects(objects: Sequence[ObjectInput], cfg: EncoderConfig) -> ObjectBatch:
    fd = cfg.object_feature_dim
    counts = np.array([o.num_objects for o in objects], dtype=np.int64)
    inputs = np.zeros((len(objects), int(counts.max(initial=0)), fd + 4))
    for i, o in enumerate(objects):
        if o.num_objects and o.features.shape[1] != fd:
            raise InputError(f"object feature dim {o.features.shape[1]} != configured {fd}")
        if o.num_objects:
            inputs[i, : o.num_objects, :fd] = o.features
            inputs[i, : o.num_objects, fd:] = o.locations()
    return ObjectBatch(inputs, counts)


# ---------------------------------------------------------------------------
# embeddings


def embed_text_batch(p: SharedParams, tb: TextBatch) -> Tensor:
    b, t = tb.ids.shape
    pos = np.broadcast_to(np.arange(t), (b, t))
    x = T.embedding(p["embed.word"], tb.ids) + T.embedding(p["embed.segment"], tb.segments)
    x = x + T.embedding(p["embed.position"], pos)
    return T.layer_norm(x, p["embed.text_ln.gamma"], p["embed.text_ln.beta"], p.config.layer_norm_eps)


def embed_object_batch(p: SharedParams, ob: ObjectBatch) -> Tensor:
    b, n, k = ob.inputs.shape
    img = T.embedding(T.reshape(p["embed.img"], (1, k)), np.zeros((b, 1), dtype=np.int64))
    rows = T.concat([img, Tensor(ob.inputs)], axis=1) if n else img
    x = T.linear(rows, p["embed.obj_proj.weight"], p["embed.obj_proj.bias"])
    x = x + T.embedding(p["embed.segment"], np.full((b, n + 1), IMAGE_SEGMENT, dtype=np.int64))
    return T.layer_norm(x, p["embed.obj_ln.gamma"], p["embed.obj_ln.beta"], p.config.layer_norm_eps)


def embed_text(t: TextInput, p: SharedParams) -> Tensor:
    """Embedding rows ``word + segment + position`` then layer norm: ``(m+2, d)``."""
    x = embed_text_batch(p, collate_text([t], p.config))
    return T.reshape(x, x.shape[1:])


def embed_objects(o: ObjectInput, p: SharedParams) -> Tensor:
    """Projected ``[IMG]`` row followed by one row per object: ``(n+1, d)``."""
    x = embed_object_batch(p, collate_objects([o], p.config))
    return T.reshape(x, x.shape[1:])


# ---------------------------------------------------------------------------
# blocks


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    key_mask: np.ndarray,
    p: SharedParams,
    prefix: str,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``num_heads`` heads.

    ``queries`` is ``(B, Tq, d)``, ``keys_values`` is ``(B, Tk, d)`` and
    ``key_mask`` is a boolean ``(B, Tk)`` array of valid keys. Returns the
    output-projected result and the ``(B, heads, Tq, Tk)`` attention weights.
    """
    cfg = p.config
    h, dk = cfg.num_heads, cfg.head_dim
    b, tq, d = queries.shape
    tk = keys_values.shape[1]
    if keys_values.shape[0] != b or keys_values.shape[2] != d or d != cfg.hidden_dim:
        raise T.ShapeError(f"attention: queries {queries.shape} vs keys {keys_values.shape}")
    if not np.asarray(key_mask).reshape(b, tk).any(axis=1).all():
        raise T.AllKeysMaskedError("attention: an example has every key masked")

    def heads(x: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, n, h, dk)), (0, 2, 1, 3))

    q = heads(T.linear(queries, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]), tq)
    k = heads(T.linear(keys_values, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]), tk)
    v = heads(T.linear(keys_values, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]), tk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    probs = T.softmax(scores, np.asarray(key_mask, dtype=bool).reshape(b, 1, 1, tk))
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, tq, d))
    return T.linear(ctx, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"]), probs.data


def _residual_ln(x: Tensor, sub: Tensor, p: SharedParams, prefix: str, rng) -> Tensor:
    sub = T.dropout(sub, p.config.dropout_rate, rng)
    return T.layer_norm(x + sub, p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"], p.config.layer_norm_eps)


def self_attention_block(x, mask, p, layer, rng=None):
    out, probs = multi_head_attention(x, x, mask, p, f"layer{layer}.self")
    return _residual_ln(x, out, p, f"layer{layer}.self", rng), probs


def cross_attention_block(x, text_states, text_mask, p, layer, rng=None):
    prefix = f"layer{layer}.cross"
    if f"{prefix}.q.weight" not in p:
        raise KeyError(f"layer {layer} has no cross-attention (split layer {p.config.split_layer})")
    out, probs = multi_head_attention(x, text_states, text_mask, p, prefix)
    return _residual_ln(x, out, p, prefix, rng), probs


def feed_forward_block(x, p, layer, rng=None):
    pre = f"layer{layer}.ffn"
    hidden = T.gelu(T.linear(x, p[f"{pre}.in.weight"], p[f"{pre}.in.bias"]))
    return _residual_ln(x, T.linear(hidden, p[f"{pre}.out.weight"], p[f"{pre}.out.bias"]), p, pre, rng)


# ---------------------------------------------------------------------------
# encoding


@dataclass
class BatchEncoding:
    mode: str
    text: Tensor          # (B, Tt, d)
    objects: Tensor       # (B, N + 1, d)
    pooled: Tensor        # (B, d)
    text_mask: np.ndarray
    object_mask: np.ndarray
    attention: list[tuple[str, int, np.ndarray]] = field(default_factory=list)


def encode_batch(
    p: SharedParams,
    tb: TextBatch,
    ob: ObjectBatch,
    mode: str,
    record: bool = False,
    rng: np.random.Generator | None = None,
) -> BatchEncoding:
    """Encode a padded batch in ``single_stream`` or ``two_stream`` mode.

    ``attention`` (when ``record``) holds ``(kind, layer, weights)`` entries with
    kind in ``joint`` / ``text`` / ``image`` / ``cross`` and 1-based layers.
    """
    if len(tb.lengths) != len(ob.counts):
        raise InputError("text and object batches differ in size")
    cfg = p.config
    text_mask, obj_mask = tb.mask, ob.mask
    t_emb = embed_text_batch(p, tb)
    o_emb = embed_object_batch(p, ob)
    attn: list[tuple[str, int, np.ndarray]] = []
    if mode == SINGLE_STREAM:
        n_img = o_emb.shape[1]
        x = T.concat([o_emb, t_emb], axis=1)
        mask = np.concatenate([obj_mask, text_mask], axis=1)
        for l in range(1, cfg.num_layers + 1):
            x, probs = self_attention_block(x, mask, p, l, rng)
            x = feed_forward_block(x, p, l, rng)
            if record:
                attn.append(("joint", l, probs))
        objects = T.take(x, (slice(None), slice(0, n_img)))
        text = T.take(x, (slice(None), slice(n_img, None)))
        pooled = T.take(text, (slice(None), 0))
    elif mode == TWO_STREAM:
        text = t_emb
        for l in range(1, cfg.num_layers + 1):
            text, probs = self_attention_block(text, text_mask, p, l, rng)
            text = feed_forward_block(text, p, l, rng)
            if record:
                attn.append(("text", l, probs))
        objects = o_emb
        for l in range(1, cfg.num_layers + 1):
            objects, probs = self_attention_block(objects, obj_mask, p, l, rng)
            if record:
                attn.append(("image", l, probs))
            if l > cfg.split_layer:
                objects, probs = cross_attention_block(objects, text, text_mask, p, l, rng)
                if record:
                    attn.append(("cross", l, probs))
            objects = feed_forward_block(objects, p, l, rng)
        pooled = T.take(objects, (slice(None), 0))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BatchEncoding(mode, text, objects, pooled, text_mask, obj_mask, attn)


def encode_pairs(p: SharedParams, texts, objects, mode, record=False, rng=None) -> BatchEncoding:
    return encode_batch(p, collate_text(texts, p.config), collate_objects(objects, p.config), mode, record, rng)


@dataclass
class AttentionMap:
    mode: str
    layer: int
    head: int
    query_set: str
    key_set: str
    weights: np.ndarray


@dataclass
class EncodingOutput:
    H_L: Tensor
    O_L: Tensor
    pooled: Tensor
    attn_maps: list[AttentionMap]
    mode: str


_KIND_SETS = {
    "joint": ("joint", "joint"),
    "text": ("text", "text"),
    "image": ("image", "image"),
    "cross": ("image", "text"),
}


def _encode_one(t: TextInput, o: ObjectInput, p: SharedParams, mode: str) -> EncodingOutput:
    enc = encode_pairs(p, [t], [o], mode, record=True)
    maps = []
    for kind, layer, probs in enc.attention:
        q_set, k_set = _KIND_SETS[kind]
        for h in range(probs.shape[1]):
            maps.append(AttentionMap(mode, layer, h, q_set, k_set, probs[0, h].copy()))
    return EncodingOutput(
        H_L=T.reshape(enc.text, enc.text.shape[1:]),
        O_L=T.reshape(enc.objects, enc.objects.shape[1:]),
        pooled=T.reshape(enc.pooled, enc.pooled.shape[1:]),
        attn_maps=maps,
        mode=mode,
    )


def encode_single_stream(t: TextInput, o: ObjectInput, p: SharedParams) -> EncodingOutput:
    """Joint encoding of ``[IMG] objects [CLS] words [SEP]``; pooled is the [CLS] state."""
    return _encode_one(t, o, p, SINGLE_STREAM)


def encode_two_stream(t: TextInput, o: ObjectInput, p: SharedParams) -> EncodingOutput:
    """Separate streams, image cross-attending to final text above the split; pooled is [IMG]."""
    return _encode_one(t, o, p, TWO_STREAM)


def encode(t: TextInput, o: ObjectInput, p: SharedParams, mode: str) -> EncodingOutput:
    return _encode_one(t, o, p, mode)
