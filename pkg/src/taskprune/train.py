"""Teacher-forced multi-task training and exact-match evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .model import Params, forward, greedy_decode, pad_batch
from .tasks import BOS, EOS, DataError, Example, detokenize, tokenize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 2500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    mixing: Optional[dict[str, float]] = None
    log_every: int = 250

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mixing is not None:
            if any(w <= 0 for w in self.mixing.values()):
                raise ValueError("mixing weights must be positive")
            if not math.isclose(sum(self.mixing.values()), 1.0, rel_tol=0, abs_tol=1e-9):
                raise ValueError("mixing weights must sum to 1")


def nll_loss(logp, targets, valid=None):
    """Sum over positions of ``-log p(target)``; ``valid`` masks padded positions."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = logp.data if isinstance(logp, ad.Tensor) else np.asarray(logp)
    if lp.shape[:-1] != targets.shape:
        raise ValueError(f"targets shape {targets.shape} does not match predictions {lp.shape[:-1]}")
    picked = ad.pick_last(logp, targets)
    if valid is not None:
        picked = ad.mul(picked, np.asarray(valid, dtype=np.float64))
    return ad.mul(ad.sum_all(picked), -1.0)


def encode_examples(examples: Sequence[Example]):
    """Tokenized, padded batch: (src, src_valid, dec_in, dec_out, dec_valid)."""
    src, src_valid = pad_batch([tokenize(ex.input) for ex in examples])
    labels = [tokenize(ex.label) for ex in examples]
    dec_in, dec_valid = pad_batch([[BOS] + y for y in labels])
    dec_out, _ = pad_batch([y + [EOS] for y in labels])
    return src, src_valid, dec_in, dec_out, dec_valid


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] = params[k] - c.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)


def loss_and_grads(params: Params, batch: Sequence[Example]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-example NLL and its gradient with respect to every parameter."""
    src, src_valid, dec_in, dec_out, dec_valid = encode_examples(batch)
    with ad.Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in params.tensors.items()}
        logp, _ = forward(params, src, dec_in, src_valid, dec_valid, weights=leaves)
        loss = ad.mul(nll_loss(logp, dec_out, dec_valid), 1.0 / len(batch))
    grads = tape.backward(loss)
    return float(loss.data), {k: grads[t] for k, t in leaves.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_multitask(
    params: Params,
    datasets: Mapping[str, Sequence[Example]],
    cfg: TrainConfig,
    dev: Optional[Mapping[str, Sequence[Example]]] = None,
    log_path: Optional[str | Path] = None,
) -> tuple[Params, list[float]]:
    """Adam on task-mixed teacher-forced batches; returns (new params, per-step losses).

    Each batch slot picks a task by the mixing weights, then a uniform example
    of that task. Everything is driven by ``cfg.seed``.
    """
    names = sorted(datasets)
    if not names:
        raise DataError("no datasets given")
    for name in names:
        if not datasets[name]:
            raise DataError(f"dataset {name!r} is empty")
    mixing = cfg.mixing or {n: 1.0 / len(names) for n in names}
    if set(mixing) != set(names):
        raise ValueError("mixing weights must cover exactly the training tasks")
    probs = np.array([mixing[n] for n in names])
    rng = np.random.default_rng(cfg.seed)

    current = params.copy()
    opt = Adam(current.tensors, cfg)
    losses: list[float] = []
    rows = []
    for step in range(1, cfg.steps + 1):
        task_idx = rng.choice(len(names), size=cfg.batch_size, p=probs)
        batch = []
        for ti in task_idx:
            data = datasets[names[ti]]
            batch.append(data[rng.integers(len(data))])
        loss, grads = loss_and_grads(current, batch)
        _clip(grads, cfg.clip_norm)
        opt.step(current.tensors, grads)
        losses.append(loss)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
            row = {"step": step, "loss": float(np.mean(losses[-cfg.log_every :]))}
            if dev:
                for name in sorted(dev):
                    row[f"dev_acc:{name}"] = eval_accuracy(current, dev[name])
            log.info("step %d %s", step, row)
            rows.append(row)
    if log_path is not None and rows:
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[-1]))
            writer.writeheader()
            writer.writerows(rows)
    return current, losses


def decode_texts(params: Params, inputs: Sequence[str], max_steps: int = 16, chunk: int = 256) -> list[str]:
    out: list[str] = []
    for i in range(0, len(inputs), chunk):
        ids = [tokenize(t) for t in inputs[i : i + chunk]]
        out.extend(detokenize(seq) for seq in greedy_decode(params, ids, max_steps))
    return out


def eval_accuracy(params: Params, dataset: Sequence[Example], max_steps: int = 16) -> float:
    """Fraction of examples whose greedy output string equals the gold label."""
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    preds = decode_texts(params, [ex.input for ex in dataset], max_steps)
    return sum(p == ex.label for p, ex in zip(preds, dataset)) / len(dataset)
