"""Whole-model gradient check: backward against central differences, per parameter group."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import MODES, EncoderConfig, ObjectInput, SharedParams, TextInput
from .pretrain import (
    ObjectTargets,
    PretrainBatch,
    PretrainExample,
    TokenTargets,
    compute_losses,
    ensure_pretrain_heads,
)

TOLERANCE = 1e-4
STEP = 1e-5
# tensors up to this size are checked at every coordinate
EXHAUSTIVE_SIZE = 64
SAMPLED_COORDS = 24
# Below this magnitude errors are measured absolutely. Central differences on a
# loss near 10 with h=1e-5 carry roundoff near 1e-10, and attention key biases
# have an identically zero gradient, so the floor must sit well above that noise.
DENOMINATOR_FLOOR = 1e-5


@dataclass
class GradcheckReport:
    tolerance: float
    step: float
    seconds: float = 0.0
    worst: dict[str, dict[str, float]] = field(default_factory=dict)   # mode -> group -> rel err
    worst_param: dict[str, dict[str, str]] = field(default_factory=dict)
    coordinates: dict[str, int] = field(default_factory=dict)   # mode -> coordinates compared

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for groups in self.worst.values() for v in groups.values())

    def failures(self) -> list[tuple[str, str, float]]:
        return [(m, g, v) for m, groups in self.worst.items() for g, v in groups.items() if not v < self.tolerance]

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "h": self.step,
                "seconds": round(self.seconds, 3), "worst_relative_error": self.worst,
                "worst_parameter": self.worst_param, "coordinates_checked": self.coordinates,
                "failures": [{"mode": m, "group": g, "error": v} for m, g, v in self.failures()]}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_indices(analytic: np.ndarray, rng: np.random.Generator, full: bool = False) -> np.ndarray:
    """Every coordinate of small tensors; a seeded sample plus the largest-gradient one otherwise."""
    n = analytic.size
    if full or n <= EXHAUSTIVE_SIZE:
        return np.arange(n)
    picked = rng.choice(n, size=SAMPLED_COORDS, replace=False)
    return np.unique(np.append(picked, int(np.abs(analytic).argmax())))


def central_differences(f, x: T.Tensor, indices: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` at the given flat coordinates of ``x``."""
    flat = x.data.reshape(-1)
    out = np.empty(len(indices))
    with T.no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out


def tiny_batch(cfg: EncoderConfig, seed: int = 0, num_labels: int = 4, num_answers: int = 4) -> PretrainBatch:
    """Two pairs with 2 objects and 4 words each; the first is matched and fully targeted."""
    rng = np.random.default_rng([seed, 5])
    examples = []
    for i in range(2):
        words = rng.integers(5, cfg.vocab_size, size=4)
        text = TextInput((1, *words.tolist(), 2))
        feats = rng.normal(size=(2, cfg.object_feature_dim))
        boxes = np.array([[10.0, 20.0, 40.0, 60.0], [50.0, 5.0, 90.0, 45.0]])
        labels = rng.integers(num_labels, size=2)
        matched = i == 0
        masked_feats = feats.copy()
        masked_feats[1] = 0.0
        examples.append(PretrainExample(
            pair_id=i, caption_source=i, text=text.replace_tokens([1, words[0], 3, *words[2:].tolist(), 2]),
            objects=ObjectInput(masked_feats, boxes, (100.0, 100.0), labels), matched=matched,
            mlm=TokenTargets((2,), (int(words[1]),)) if matched else None,
            obj=ObjectTargets((1,), feats[1:2].copy(), (int(labels[1]),)) if matched else None,
            qa_answer=int(rng.integers(num_answers)) if matched else None,
        ))
    return PretrainBatch(examples)


def run_gradcheck(cfg: EncoderConfig, seed: int = 0, h: float = STEP, tolerance: float = TOLERANCE,
                  modes=MODES, init_std: float = 0.3, full: bool = False) -> GradcheckReport:
    """Compare backward with central differences, parameter by parameter, in each mode.

    Large weight matrices are sampled (see ``check_indices``) unless ``full``.
    ``init_std`` widens the initialization so every path carries a gradient
    well above the error floor.
    """
    t0 = time.perf_counter()
    cfg = EncoderConfig(**{**cfg.to_dict(), "init_std": init_std, "dropout_rate": 0.0, "layer_norm_eps": 1e-5})
    params = SharedParams.initialize(cfg, seed)
    ensure_pretrain_heads(params, 4, 4)
    batch = tiny_batch(cfg, seed)
    report = GradcheckReport(tolerance, h)
    groups = params.groups()
    for mode in modes:
        params.zero_grad()
        loss, _ = compute_losses(params, batch, mode)
        T.backward(loss)
        analytic = {n: params[n].grad.copy() for n in params.names()}

        def f(_x, mode=mode):
            return compute_losses(params, batch, mode)[0]

        rng = np.random.default_rng([seed, 7])
        worst, worst_name, checked = {}, {}, 0
        for group, names in groups.items():
            worst[group] = 0.0
            for name in names:
                x = params[name]
                x.data = np.ascontiguousarray(x.data)
                idx = check_indices(analytic[name], rng, full)
                numeric = central_differences(f, x, idx, h)
                err = relative_error(analytic[name].reshape(-1)[idx], numeric)
                checked += len(idx)
                if err >= worst[group]:
                    worst[group], worst_name[group] = err, name
        report.worst[mode] = worst
        report.worst_param[mode] = worst_name
        report.coordinates[mode] = checked
    report.seconds = time.perf_counter() - t0
    return report
