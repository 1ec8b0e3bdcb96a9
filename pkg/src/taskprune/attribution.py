"""Neuron importance scores for every prunable target.

Supervised scores are gradient x activation of the summed label-token
probabilities, ``h_i * sum_j dP(y_j | x, y_<j) / dh_i``, teacher-forced on the
label and summed over the token positions of ``h``. A label's target tokens
end with EOS, as in training, so stopping is scored like any other token.
Dataset scores add per-example scores in dataset order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .model import Params, PrunableLayerId, forward, pad_batch, prunable_registry
from .tasks import BOS, EOS, VOCAB, DataError, Example, tokenize

ATTRIBUTION_FORMAT = "taskprune.attribution"
ATTRIBUTION_VERSION = 1
METHODS = ("supervised", "unsupervised", "fpp", "rap")


@dataclass
class AttributionMap:
    """Score vector per registry key, in registry order."""

    scores: dict[str, np.ndarray]
    method: str
    sample_count: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __add__(self, other: "AttributionMap") -> "AttributionMap":
        if list(self.scores) != list(other.scores):
            raise ValueError("attribution maps cover different targets")
        return AttributionMap(
            {k: self.scores[k] + other.scores[k] for k in self.scores},
            self.method,
            self.sample_count + other.sample_count,
            "",
        )

    def abs(self) -> "AttributionMap":
        return AttributionMap({k: np.abs(v) for k, v in self.scores.items()}, self.method, self.sample_count, self.fingerprint)

    def save(self, path: str | Path) -> None:
        doc = {
            "format": ATTRIBUTION_FORMAT,
            "version": ATTRIBUTION_VERSION,
            "metadata": {
                "method": self.method,
                "sample_count": self.sample_count,
                "fingerprint": self.fingerprint,
                **self.extra,
            },
            "scores": {k: [float(x) for x in v] for k, v in self.scores.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AttributionMap":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != ATTRIBUTION_FORMAT or doc.get("version") != ATTRIBUTION_VERSION:
            raise DataError(f"{path}: not a version-{ATTRIBUTION_VERSION} attribution file")
        meta = dict(doc["metadata"])
        method = meta.pop("method")
        count = meta.pop("sample_count")
        fp = meta.pop("fingerprint")
        scores = {k: np.asarray(v, dtype=np.float64) for k, v in doc["scores"].items()}
        return cls(scores, method, count, fp, meta)


def dataset_fingerprint(pairs: Iterable[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for x, y in pairs:
        h.update(x.encode("utf-8") + b"\x00" + y.encode("utf-8") + b"\x01")
    return h.hexdigest()[:16]


def _zero_map(registry: Sequence[PrunableLayerId], method: str) -> AttributionMap:
    return AttributionMap({e.key: np.zeros(e.size) for e in registry}, method)


def _per_example(registry, values: dict[str, np.ndarray], valid: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Collapse [B, L, ...] position-wise contributions to per-example [B, k] per target."""
    out = {}
    for entry in registry:
        c = values[entry.probe_name]
        m = valid[entry.probe_name]
        if entry.head is None:
            out[entry.key] = np.einsum("blk,bl->bk", c, m)
        else:
            out[entry.key] = np.einsum("blk,bl->bk", c[:, :, entry.head, :], m)
    return out


def label_target(text: str) -> list[int]:
    """Teacher-forced target ids for a label string: its tokens then EOS."""
    ids = tokenize(text)
    if not ids:
        raise DataError("attribution target must be a non-empty token sequence")
    return ids + [EOS]


def _check_targets(targets: Sequence[Sequence[int]], vocab_size: int) -> None:
    for y in targets:
        if len(y) == 0:
            raise DataError("attribution target must be a non-empty token sequence")
        if min(y) < 0 or max(y) >= vocab_size:
            raise DataError("attribution target contains an unknown token id")


def example_contributions(params: Params, inputs: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> dict[str, np.ndarray]:
    """Per-example supervised scores [B, k] for token-level (input, target) pairs.

    One forward/backward for the whole batch: examples do not interact, so the
    gradient of the summed probabilities splits exactly per example.
    """
    _check_targets(targets, params.config.vocab_size)
    registry = prunable_registry(params.config)
    src, src_valid = pad_batch(inputs)
    dec_in, dec_valid = pad_batch([[BOS] + list(y[:-1]) for y in targets])
    tgt, _ = pad_batch(targets)
    weights = dict(params.tensors)
    with ad.Tape() as tape:
        weights["embed"] = tape.leaf(params.tensors["embed"])
        logp, trace = forward(params, src, dec_in, src_valid, dec_valid, weights=weights)
        prob = ad.exp(ad.pick_last(logp, tgt))
        total = ad.sum_all(ad.mul(prob, dec_valid.astype(np.float64)))
    grads = tape.backward(total)
    values = {name: t.data * grads[t] for name, t in trace.values.items()}
    return _per_example(registry, values, trace.valid)


def _accumulate(acc: dict[str, np.ndarray], per_example: dict[str, np.ndarray]) -> None:
    # serial reduction in example order so any batch size gives the same sum order
    for k, v in per_example.items():
        total = acc[k]
        for row in v:
            total = total + row
        acc[k] = total


def _batches(items: Sequence, size: int):
    if size < 1:
        raise ValueError("batch size must be >= 1")
    for i in range(0, len(items), size):
        yield items[i : i + size]


def attribute_tokens(params: Params, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size: int = 32, method: str = "supervised") -> AttributionMap:
    if not pairs:
        raise DataError("cannot attribute an empty dataset")
    amap = _zero_map(prunable_registry(params.config), method)
    for batch in _batches(pairs, batch_size):
        _accumulate(amap.scores, example_contributions(params, [p[0] for p in batch], [p[1] for p in batch]))
    amap.sample_count = len(pairs)
    return amap


def attribute_example(params: Params, x: str, y: str) -> AttributionMap:
    return attribute_dataset(params, [Example(x, y)], batch_size=1)


def attribute_dataset(params: Params, dataset: Sequence[Example], batch_size: int = 32) -> AttributionMap:
    """Sum of per-example supervised scores over mini-batches in dataset order."""
    pairs = [(tokenize(ex.input), label_target(ex.label)) for ex in dataset]
    amap = attribute_tokens(params, pairs, batch_size)
    amap.fingerprint = dataset_fingerprint((ex.input, ex.label) for ex in dataset)
    return amap


def attribute_unsupervised(params: Params, inputs: Sequence[str], candidates: Sequence[str], batch_size: int = 32) -> AttributionMap:
    """Label-free scores: per example, sum over candidates of |supervised score|."""
    if not candidates:
        raise DataError("candidate label set is empty")
    if not inputs:
        raise DataError("cannot attribute an empty dataset")
    inputs = list(inputs)
    amap = _zero_map(prunable_registry(params.config), "unsupervised")
    cand_ids = [label_target(c) for c in candidates]
    for batch in _batches(inputs, batch_size):
        src = [tokenize(x) for x in batch]
        per: Optional[dict[str, np.ndarray]] = None
        for y in cand_ids:
            contrib = example_contributions(params, src, [y] * len(src))
            if per is None:
                per = {k: np.abs(v) for k, v in contrib.items()}
            else:
                for k, v in contrib.items():
                    per[k] = per[k] + np.abs(v)
        _accumulate(amap.scores, per)
    amap.sample_count = len(inputs)
    amap.fingerprint = dataset_fingerprint((x, "") for x in inputs)
    amap.extra = {"candidates": list(candidates)}
    return amap


def fpp_scores(params: Params, dataset: Sequence[Example], batch_size: int = 32) -> AttributionMap:
    """Forward-magnitude baseline: sum over examples and positions of ``|h_i|``.

    Decoder representations come from the same teacher-forced label prefix the
    supervised scores use.
    """
    if not dataset:
        raise DataError("cannot score an empty dataset")
    registry = prunable_registry(params.config)
    amap = _zero_map(registry, "fpp")
    for batch in _batches(list(dataset), batch_size):
        src, src_valid = pad_batch([tokenize(ex.input) for ex in batch])
        labels = [label_target(ex.label) for ex in batch]
        _check_targets(labels, params.config.vocab_size)
        dec_in, dec_valid = pad_batch([[BOS] + y[:-1] for y in labels])
        _, trace = forward(params, src, dec_in, src_valid, dec_valid)
        values = {name: np.abs(t.data) for name, t in trace.values.items()}
        _accumulate(amap.scores, _per_example(registry, values, trace.valid))
    amap.sample_count = len(dataset)
    amap.fingerprint = dataset_fingerprint((ex.input, ex.label) for ex in dataset)
    return amap


def non_label_tokens(labels: Iterable[str], vocab_size: int) -> list[int]:
    banned = {t for label in labels for t in tokenize(label)}
    return [t for t in VOCAB.char_ids() if t not in banned and t < vocab_size]


def draw_pseudo_targets(dataset: Sequence[Example], labels: Iterable[str], vocab_size: int, seed: int) -> list[list[int]]:
    """Per example, a same-length target drawn uniformly from non-label tokens."""
    pool = non_label_tokens(labels, vocab_size)
    if not pool:
        raise DataError("no non-label token available for random-target attribution")
    rng = np.random.default_rng(seed)
    return [[pool[i] for i in rng.integers(len(pool), size=len(tokenize(ex.label)))] for ex in dataset]


def rap_scores(params: Params, dataset: Sequence[Example], labels: Sequence[str], seed: int, batch_size: int = 32) -> AttributionMap:
    """Supervised scores against random non-label targets (seeded), each ending in EOS.

    ``labels`` is the task's candidate label set; no drawn token appears in
    any of them.
    """
    if not dataset:
        raise DataError("cannot score an empty dataset")
    labels = set(labels) | {ex.label for ex in dataset}
    targets = draw_pseudo_targets(dataset, labels, params.config.vocab_size, seed)
    pairs = [(tokenize(ex.input), y + [EOS]) for ex, y in zip(dataset, targets)]
    amap = attribute_tokens(params, pairs, batch_size, method="rap")
    amap.fingerprint = dataset_fingerprint((ex.input, ex.label) for ex in dataset)
    amap.extra = {"seed": seed}
    return amap
