"""Kept-index masks, structural surgery and the SVD / random baselines.

Rate convention: a prune rate ``p`` is the fraction REMOVED. A target with
``k`` neurons keeps ``k - floor(k * p)`` of them, ranked by descending score
with ties going to the lower index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .attribution import AttributionMap
from .model import ModelConfig, Params, PrunableLayerId, prunable_matrices, prunable_registry
from .tasks import DataError

MASK_FORMAT = "taskprune.mask"
MASK_VERSION = 1


class MaskError(ValueError):
    pass


def _check_rate(p: float) -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise MaskError(f"prune rate must be in [0, 1], got {p}")
    return p


def removed_count(k: int, p: float) -> int:
    # round() absorbs binary representation error, e.g. 0.29 * 100 = 28.999999999999996
    return math.floor(round(k * _check_rate(p), 9))


def kept_count(k: int, p: float) -> int:
    return k - removed_count(k, p)


def argsort_ranks(scores) -> np.ndarray:
    """rank_i = #{j : s_i < s_j or (s_i == s_j and j < i)}; rank 0 is most important."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise MaskError("scores must be a non-empty vector")
    if np.isnan(s).any():
        raise MaskError("NaN score")
    order = np.lexsort((np.arange(s.size), -s))
    ranks = np.empty(s.size, dtype=np.int64)
    ranks[order] = np.arange(s.size)
    return ranks


def select_kept(scores, p: float) -> np.ndarray:
    """Increasing indices of the ``k - floor(k*p)`` best-ranked neurons."""
    ranks = argsort_ranks(scores)
    return np.flatnonzero(ranks < kept_count(ranks.size, p))


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class PlanRule:
    rate: float
    stack: Optional[str] = None
    group: Optional[str] = None
    band: Optional[str] = None


BANDS = ("low", "mid", "high")


def depth_band(layer: int, n_layers: int) -> str:
    """Split ``n_layers`` into three contiguous parts (sizes as ``np.array_split``)."""
    for band, layers in zip(BANDS, np.array_split(np.arange(n_layers), 3)):
        if layer in layers:
            return band
    raise ValueError(f"layer {layer} out of range for {n_layers} layers")


@dataclass(frozen=True)
class PrunePlan:
    """Prune rate per registry entry: the last matching rule wins, default 0."""

    rules: tuple[PlanRule, ...] = ()
    label: str = "none"

    def __post_init__(self):
        for r in self.rules:
            _check_rate(r.rate)

    def rate_for(self, entry: PrunableLayerId, config: ModelConfig) -> float:
        rate = 0.0
        n_layers = config.n_enc_layers if entry.stack == "encoder" else config.n_dec_layers
        for r in self.rules:
            if r.stack is not None and r.stack != entry.stack:
                continue
            if r.group is not None and r.group != entry.group:
                continue
            if r.band is not None and r.band != depth_band(entry.layer, n_layers):
                continue
            rate = r.rate
        return rate

    def stack_rates(self) -> tuple[float, float]:
        """Largest rate touching each stack, for reporting."""
        enc = max([r.rate for r in self.rules if r.stack in (None, "encoder")], default=0.0)
        dec = max([r.rate for r in self.rules if r.stack in (None, "decoder")], default=0.0)
        return enc, dec

    @classmethod
    def uniform(cls, p: float) -> "PrunePlan":
        return cls((PlanRule(p),), "uniform")

    @classmethod
    def module(cls, stack: str, p: float) -> "PrunePlan":
        if stack not in ("encoder", "decoder"):
            raise ValueError(f"unknown stack {stack!r}")
        return cls((PlanRule(p, stack=stack),), stack)

    @classmethod
    def integrated(cls, enc: float, dec: float) -> "PrunePlan":
        return cls((PlanRule(enc, stack="encoder"), PlanRule(dec, stack="decoder")), "both")

    @classmethod
    def layer_type(cls, stack: str, group: str, p: float) -> "PrunePlan":
        return cls((PlanRule(p, stack=stack, group=group),), f"{stack}:{group}")

    @classmethod
    def layer_depth(cls, stack: str, band: str, p: float) -> "PrunePlan":
        if band not in BANDS:
            raise ValueError(f"unknown depth band {band!r}")
        return cls((PlanRule(p, stack=stack, band=band),), f"{stack}:{band}")

    def to_json(self) -> dict:
        return {"label": self.label, "rules": [vars(r) for r in self.rules]}

    @classmethod
    def from_json(cls, d: dict) -> "PrunePlan":
        return cls(tuple(PlanRule(**r) for r in d["rules"]), d.get("label", "custom"))


# ---------------------------------------------------------------- masks


@dataclass
class PruneMask:
    kept: dict[str, np.ndarray]
    sizes: dict[str, int]
    plan: dict = field(default_factory=dict)
    source: str = ""
    seed: Optional[int] = None

    def kept_fraction(self) -> float:
        return sum(len(v) for v in self.kept.values()) / sum(self.sizes.values())

    def save(self, path: str | Path) -> None:
        doc = {
            "format": MASK_FORMAT,
            "version": MASK_VERSION,
            "source": self.source,
            "seed": self.seed,
            "plan": self.plan,
            "targets": {k: {"size": self.sizes[k], "kept": [int(i) for i in v]} for k, v in self.kept.items()},
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PruneMask":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != MASK_FORMAT or doc.get("version") != MASK_VERSION:
            raise DataError(f"{path}: not a version-{MASK_VERSION} mask file")
        kept = {k: np.asarray(t["kept"], dtype=np.int64) for k, t in doc["targets"].items()}
        sizes = {k: int(t["size"]) for k, t in doc["targets"].items()}
        return cls(kept, sizes, doc.get("plan", {}), doc.get("source", ""), doc.get("seed"))


def full_mask(config: ModelConfig) -> PruneMask:
    reg = prunable_registry(config)
    return PruneMask({e.key: np.arange(e.size) for e in reg}, {e.key: e.size for e in reg}, PrunePlan.uniform(0.0).to_json(), "identity")


def build_mask(attr: AttributionMap, plan: PrunePlan, config: ModelConfig) -> PruneMask:
    """Keep the best-scored neurons of every target at the plan's rate for it."""
    kept, sizes = {}, {}
    for entry in prunable_registry(config):
        if entry.key not in attr.scores:
            raise MaskError(f"attribution map has no scores for {entry.key}")
        scores = attr.scores[entry.key]
        if scores.shape != (entry.size,):
            raise MaskError(f"{entry.key}: expected {entry.size} scores, got {scores.shape}")
        kept[entry.key] = select_kept(scores, plan.rate_for(entry, config))
        sizes[entry.key] = entry.size
    return PruneMask(kept, sizes, plan.to_json(), attr.method)


def random_mask(config: ModelConfig, plan: PrunePlan, seed: int) -> PruneMask:
    """Uniformly random kept sets of the mandated size per target."""
    rng = np.random.default_rng(seed)
    kept, sizes = {}, {}
    for entry in prunable_registry(config):
        n = kept_count(entry.size, plan.rate_for(entry, config))
        kept[entry.key] = np.sort(rng.choice(entry.size, size=n, replace=False))
        sizes[entry.key] = entry.size
    return PruneMask(kept, sizes, plan.to_json(), "random", seed)


def mask_jaccard(m1: PruneMask, m2: PruneMask) -> tuple[dict[str, float], float]:
    if list(m1.kept) != list(m2.kept) or m1.sizes != m2.sizes:
        raise MaskError("masks cover different registries")
    per = {}
    for k in m1.kept:
        a, b = set(m1.kept[k].tolist()), set(m2.kept[k].tolist())
        union = a | b
        per[k] = 1.0 if not union else len(a & b) / len(union)
    return per, float(np.mean(list(per.values()))) if per else 1.0


# ---------------------------------------------------------------- surgery


def _head_columns(mask: PruneMask, prefix: str, n_heads: int, d_head: int) -> np.ndarray:
    kept = [mask.kept[f"{prefix}.h{h}"] for h in range(n_heads)]
    if len({len(k) for k in kept}) > 1:
        raise MaskError(f"{prefix}: heads keep different neuron counts {[len(k) for k in kept]}")
    return np.concatenate([h * d_head + np.asarray(k, dtype=np.int64) for h, k in enumerate(kept)])


def _validate_mask(params: Params, mask: PruneMask) -> None:
    reg = prunable_registry(params.config)
    if [e.key for e in reg] != list(mask.kept):
        raise MaskError("mask does not match the model's prunable registry")
    for e in reg:
        k = mask.kept[e.key]
        if mask.sizes[e.key] != e.size:
            raise MaskError(f"{e.key}: mask size {mask.sizes[e.key]} != {e.size}")
        if len(k) and (k.min() < 0 or k.max() >= e.size or np.any(np.diff(k) <= 0)):
            raise MaskError(f"{e.key}: kept indices must be strictly increasing within [0, {e.size})")
    for name in prunable_matrices(params.config):
        if name not in params.tensors:
            raise MaskError(f"{name} is factored or missing; surgery needs dense unpruned weights")
    cfg = params.config
    hd = cfg.n_heads * cfg.d_head
    for name in prunable_matrices(cfg):
        w = params.tensors[name]
        last = name.rsplit(".", 1)[1]
        expect = {"wq": (cfg.d_model, hd), "wk": (cfg.d_model, hd), "wv": (cfg.d_model, hd), "wo": (hd, cfg.d_model),
                  "w1": (cfg.d_model, cfg.d_ff), "w2": (cfg.d_ff, cfg.d_model)}[last]
        if w.shape != expect:
            raise MaskError(f"{name}: shape {w.shape} is not the unpruned {expect}")


def surgery(params: Params, mask: PruneMask) -> Params:
    """Return a new parameter set with pruned neurons physically removed.

    Q/K columns and V columns are cut per head, W^O rows follow V, and W1
    columns / b1 entries / W2 rows follow the FFN mask. ``params`` is left
    untouched; the attention scale stays at the config's ``d_head``.
    """
    _validate_mask(params, mask)
    cfg = params.config
    out = {k: v.copy() for k, v in params.tensors.items()}
    blocks = [(f"enc.{l}", ("self",)) for l in range(cfg.n_enc_layers)]
    blocks += [(f"dec.{l}", ("self", "cross")) for l in range(cfg.n_dec_layers)]
    for layer_prefix, attns in blocks:
        for a in attns:
            p = f"{layer_prefix}.{a}"
            qk = _head_columns(mask, f"{p}-qk", cfg.n_heads, cfg.d_head)
            v = _head_columns(mask, f"{p}-v", cfg.n_heads, cfg.d_head)
            out[f"{p}.wq"] = params.tensors[f"{p}.wq"][:, qk]
            out[f"{p}.wk"] = params.tensors[f"{p}.wk"][:, qk]
            out[f"{p}.wv"] = params.tensors[f"{p}.wv"][:, v]
            out[f"{p}.wo"] = params.tensors[f"{p}.wo"][v, :]
        f = f"{layer_prefix}.ffn"
        keep = np.asarray(mask.kept[f], dtype=np.int64)
        out[f"{f}.w1"] = params.tensors[f"{f}.w1"][:, keep]
        out[f"{f}.b1"] = params.tensors[f"{f}.b1"][keep]
        out[f"{f}.w2"] = params.tensors[f"{f}.w2"][keep, :]
    return Params(cfg, out)


def zeroing_masks(mask: PruneMask, config: ModelConfig) -> dict[str, np.ndarray]:
    """0/1 multipliers per probe name that simulate ``mask`` without removing anything."""
    out: dict[str, np.ndarray] = {}
    for e in prunable_registry(config):
        if e.head is None:
            m = np.zeros(e.size)
            m[mask.kept[e.key]] = 1.0
            out[e.probe_name] = m
        else:
            m = out.setdefault(e.probe_name, np.zeros((config.n_heads, config.d_head)))
            m[e.head, mask.kept[e.key]] = 1.0
    return out


# ---------------------------------------------------------------- SVD baseline


def svd_rank(d: int, k: int, p: float) -> int:
    """Rank whose factors (U: d*r, S: r, V: r*k) fit the kept budget ``d*k*(1-p)``."""
    budget = round(d * k * (1.0 - _check_rate(p)) / (d + k + 1), 9)
    return min(math.floor(budget), d, k)


def truncated_svd(w: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``r`` factors ``(U [d, r], S [r], V [r, k])`` of ``w``.

    Singular values are descending; each left vector is sign-flipped so its
    first non-negligible entry is positive (the right vector flips with it).
    """
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    u, s, vt = u[:, :r].copy(), s[:r].copy(), vt[:r].copy()
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-12)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] *= -1
            vt[j] *= -1
    return u, s, vt


def _matrix_target(name: str, config: ModelConfig) -> PrunableLayerId:
    for e in prunable_registry(config):
        if name in e.matrices:
            return e
    raise KeyError(name)


def svd_compress(params: Params, plan: PrunePlan | float) -> Params:
    """Replace each prunable matrix by rank-r SVD factors at its planned rate.

    Matrices whose rate is 0 stay dense and untouched.
    """
    if not isinstance(plan, PrunePlan):
        plan = PrunePlan.uniform(plan)
    cfg = params.config
    out = {k: v.copy() for k, v in params.tensors.items()}
    for name in prunable_matrices(cfg):
        rate = plan.rate_for(_matrix_target(name, cfg), cfg)
        if rate == 0.0:
            continue
        w = params.dense(name)
        u, s, v = truncated_svd(w, svd_rank(*w.shape, rate))
        del out[name]
        out[f"{name}.U"], out[f"{name}.S"], out[f"{name}.V"] = u, s, v
    return Params(cfg, out)


# ---------------------------------------------------------------- accounting


def prunable_parameter_count(params: Params) -> int:
    """Values stored for prunable matrices plus the FFN input biases."""
    cfg = params.config
    n = sum(params.matrix_size(m) for m in prunable_matrices(cfg))
    n += sum(params.tensors[f"{s}.{l}.ffn.b1"].size for s, L in (("enc", cfg.n_enc_layers), ("dec", cfg.n_dec_layers)) for l in range(L))
    return n


def dense_prunable_count(config: ModelConfig) -> int:
    hd = config.n_heads * config.d_head
    attn = 4 * config.d_model * hd
    ffn = 2 * config.d_model * config.d_ff + config.d_ff
    return config.n_enc_layers * (attn + ffn) + config.n_dec_layers * (2 * attn + ffn)


def kept_parameter_fraction(params: Params) -> float:
    return prunable_parameter_count(params) / dense_prunable_count(params.config)
