"""Miniature T5-style encoder-decoder with a registry of prunable targets.

Prunable targets are layer representations, each tied to weight matrices:

    kind        representation h                 pruned matrices
    self-qk     per-head query vector             W^Q, W^K columns (tied)
    self-v      per-head value vector             W^V columns, W^O rows
    cross-qk    per-head query vector (decoder)   W^Q, W^K columns (tied)
    cross-v     per-head value vector (encoder)   W^V columns, W^O rows
    ffn         relu(x W1 + b1)                   W1 columns, b1, W2 rows

Attention targets are enumerated per head so each head sorts its own scores.
Registry order: encoder layers ascending (self-qk heads, self-v heads, ffn),
then decoder layers ascending (self-qk, self-v, cross-qk, cross-v, ffn).
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tasks import BOS, EOS, PAD

NEG_INF = -1e9
ATTN_KINDS = ("self-qk", "self-v", "cross-qk", "cross-v")
ENC_KINDS = ("self-qk", "self-v", "ffn")
DEC_KINDS = ("self-qk", "self-v", "cross-qk", "cross-v", "ffn")
STACK_PREFIX = {"encoder": "enc", "decoder": "dec"}


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_head", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class PrunableLayerId:
    stack: str
    layer: int
    kind: str
    head: Optional[int]
    size: int = field(compare=False)

    @property
    def key(self) -> str:
        base = f"{STACK_PREFIX[self.stack]}.{self.layer}.{self.kind}"
        return base if self.head is None else f"{base}.h{self.head}"

    @property
    def probe_name(self) -> str:
        return f"{STACK_PREFIX[self.stack]}.{self.layer}.{self.kind}"

    @property
    def block(self) -> str:
        """Parameter-name prefix of the sublayer this target lives in."""
        sub = "ffn" if self.kind == "ffn" else self.kind.split("-")[0]
        return f"{STACK_PREFIX[self.stack]}.{self.layer}.{sub}"

    @property
    def group(self) -> str:
        """Layer type: ``self-attn``, ``cross-attn`` or ``ffn``."""
        return "ffn" if self.kind == "ffn" else self.kind.split("-")[0] + "-attn"

    @property
    def matrices(self) -> tuple[str, ...]:
        b = self.block
        if self.kind == "ffn":
            return (f"{b}.w1", f"{b}.w2")
        if self.kind.endswith("qk"):
            return (f"{b}.wq", f"{b}.wk")
        return (f"{b}.wv", f"{b}.wo")


def prunable_registry(config: ModelConfig) -> list[PrunableLayerId]:
    out = []
    for stack, n_layers, kinds in (
        ("encoder", config.n_enc_layers, ENC_KINDS),
        ("decoder", config.n_dec_layers, DEC_KINDS),
    ):
        for layer in range(n_layers):
            for kind in kinds:
                if kind == "ffn":
                    out.append(PrunableLayerId(stack, layer, kind, None, config.d_ff))
                else:
                    out.extend(PrunableLayerId(stack, layer, kind, h, config.d_head) for h in range(config.n_heads))
    return out


def prunable_matrices(config: ModelConfig) -> list[str]:
    """Names of all prunable weight matrices (6 per encoder layer, 10 per decoder layer)."""
    names = []
    for entry in prunable_registry(config):
        for m in entry.matrices:
            if m not in names:
                names.append(m)
    return names


# ---------------------------------------------------------------- parameters


@dataclass
class Params:
    """Named float64 arrays plus the config they were built for.

    A matrix may be stored densely under its name, or as rank-r factors under
    ``name.U`` / ``name.S`` / ``name.V`` (see :func:`taskprune.pruner.svd_compress`).
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def matrix_size(self, name: str) -> int:
        if name in self.tensors:
            return self.tensors[name].size
        return sum(self.tensors[f"{name}.{p}"].size for p in "USV")

    def is_factored(self, name: str) -> bool:
        return name not in self.tensors and f"{name}.U" in self.tensors

    def dense(self, name: str) -> np.ndarray:
        if name in self.tensors:
            return self.tensors[name]
        t = self.tensors
        return (t[f"{name}.U"] * t[f"{name}.S"]) @ t[f"{name}.V"]


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{m}" for m in ("wq", "wk", "wv", "wo")]


def init_params(config: ModelConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    D, F, HD, V = config.d_model, config.d_ff, config.n_heads * config.d_head, config.vocab_size

    def normal(shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    t: dict[str, np.ndarray] = {"embed": rng.standard_normal((V, D))}

    def attn(prefix):
        t[f"{prefix}.wq"] = normal((D, HD), D)
        t[f"{prefix}.wk"] = normal((D, HD), D)
        t[f"{prefix}.wv"] = normal((D, HD), D)
        t[f"{prefix}.wo"] = normal((HD, D), HD)

    def ffn(prefix):
        t[f"{prefix}.w1"] = normal((D, F), D)
        t[f"{prefix}.b1"] = np.zeros(F)
        t[f"{prefix}.w2"] = normal((F, D), F)
        t[f"{prefix}.b2"] = np.zeros(D)

    for layer in range(config.n_enc_layers):
        p = f"enc.{layer}"
        t[f"{p}.ln_self"] = np.ones(D)
        attn(f"{p}.self")
        t[f"{p}.ln_ffn"] = np.ones(D)
        ffn(f"{p}.ffn")
    t["enc.ln_final"] = np.ones(D)
    for layer in range(config.n_dec_layers):
        p = f"dec.{layer}"
        t[f"{p}.ln_self"] = np.ones(D)
        attn(f"{p}.self")
        t[f"{p}.ln_cross"] = np.ones(D)
        attn(f"{p}.cross")
        t[f"{p}.ln_ffn"] = np.ones(D)
        ffn(f"{p}.ffn")
    t["dec.ln_final"] = np.ones(D)
    t["lm_head"] = normal((D, V), D)
    return Params(config, t)


@functools.lru_cache(maxsize=None)
def sinusoid_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


# ---------------------------------------------------------------- forward


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (ids [B, L], valid mask [B, L])."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


@dataclass
class ForwardTrace:
    """Probed representations of one pass, keyed by probe name.

    ``values[name]`` has shape [B, L, n_heads, d] for attention kinds and
    [B, L, d_ff] for ffn; ``valid[name]`` marks the real (non-pad) positions.
    """

    values: dict[str, Tensor]
    valid: dict[str, np.ndarray]


def _check_ids(ids: np.ndarray, valid: np.ndarray, config: ModelConfig, what: str) -> None:
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"{what}: expected a non-empty [batch, length] id array")
    if ids.shape[1] > config.max_len:
        raise InputError(f"{what}: length {ids.shape[1]} exceeds max_len {config.max_len}")
    if not valid[:, 0].all():
        raise InputError(f"{what}: empty sequence in batch")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"{what}: token id out of range [0, {config.vocab_size})")


class _Ctx:
    """Per-pass state: weights lookup, probes and edits."""

    def __init__(self, params: Params, weights: Optional[Mapping[str, Tensor]], edits, zero_masks):
        self.params = params
        self.config = params.config
        self.w = weights if weights is not None else params.tensors
        self.edits = edits or {}
        self.zero_masks = zero_masks or {}
        self.trace = ForwardTrace({}, {})

    def linear(self, x, name):
        if name in self.w:
            return ad.matmul(x, self.w[name])
        u, s, v = (self.w[f"{name}.{p}"] for p in "USV")
        return ad.matmul(ad.mul(ad.matmul(x, u), s), v)

    def capture(self, name, h, valid):
        if name in self.zero_masks:
            h = ad.mul(h, self.zero_masks[name])
        if name in self.edits:
            h = self.edits[name](h)
        ad.probe(name, h)
        self.trace.values[name] = h
        self.trace.valid[name] = valid
        return h


def _split_heads(x, n_heads):
    b, length, width = x.shape
    return ad.reshape(x, (b, length, n_heads, width // n_heads))


def _attention(ctx: _Ctx, prefix: str, x_q, x_kv, bias, q_valid, kv_valid):
    cfg = ctx.config
    H = cfg.n_heads
    q = ctx.capture(f"{prefix}-qk", _split_heads(ctx.linear(x_q, f"{prefix}.wq"), H), q_valid)
    k = _split_heads(ctx.linear(x_kv, f"{prefix}.wk"), H)
    v = ctx.capture(f"{prefix}-v", _split_heads(ctx.linear(x_kv, f"{prefix}.wv"), H), kv_valid)
    # scale frozen at the unpruned head width so removal == zeroing
    logits = ad.matmul(ad.transpose(q, (0, 2, 1, 3)), ad.transpose(k, (0, 2, 3, 1)))
    logits = ad.add(ad.mul(logits, 1.0 / np.sqrt(cfg.d_head)), bias)
    weights = ad.softmax(logits, axis=-1)
    heads = ad.matmul(weights, ad.transpose(v, (0, 2, 1, 3)))
    b, _, lq, dv = heads.shape
    merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, lq, H * dv))
    return ctx.linear(merged, f"{prefix}.wo")


def _ffn(ctx: _Ctx, prefix: str, x, valid):
    hidden = ad.relu(ad.add(ctx.linear(x, f"{prefix}.w1"), ctx.w[f"{prefix}.b1"]))
    hidden = ctx.capture(prefix, hidden, valid)
    return ad.add(ctx.linear(hidden, f"{prefix}.w2"), ctx.w[f"{prefix}.b2"])


def _embed(ctx: _Ctx, ids):
    x = ad.take_rows(ctx.w["embed"], ids)
    return ad.add(x, sinusoid_positions(ids.shape[1], ctx.config.d_model))


def _encode(ctx: _Ctx, src, src_valid):
    key_bias = np.where(src_valid, 0.0, NEG_INF)[:, None, None, :]
    x = _embed(ctx, src)
    w = ctx.w
    for layer in range(ctx.config.n_enc_layers):
        p = f"enc.{layer}"
        xn = ad.rms_norm(x, w[f"{p}.ln_self"])
        x = ad.add(x, _attention(ctx, f"{p}.self", xn, xn, key_bias, src_valid, src_valid))
        x = ad.add(x, _ffn(ctx, f"{p}.ffn", ad.rms_norm(x, w[f"{p}.ln_ffn"]), src_valid))
    return ad.rms_norm(x, w["enc.ln_final"])


def _decode(ctx: _Ctx, memory, src_valid, tgt, tgt_valid):
    T = tgt.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_bias = np.where(causal[None, None] & tgt_valid[:, None, None, :], 0.0, NEG_INF)
    cross_bias = np.where(src_valid, 0.0, NEG_INF)[:, None, None, :]
    x = _embed(ctx, tgt)
    w = ctx.w
    for layer in range(ctx.config.n_dec_layers):
        p = f"dec.{layer}"
        xn = ad.rms_norm(x, w[f"{p}.ln_self"])
        x = ad.add(x, _attention(ctx, f"{p}.self", xn, xn, self_bias, tgt_valid, tgt_valid))
        xn = ad.rms_norm(x, w[f"{p}.ln_cross"])
        x = ad.add(x, _attention(ctx, f"{p}.cross", xn, memory, cross_bias, tgt_valid, src_valid))
        x = ad.add(x, _ffn(ctx, f"{p}.ffn", ad.rms_norm(x, w[f"{p}.ln_ffn"]), tgt_valid))
    x = ad.rms_norm(x, w["dec.ln_final"])
    return ad.log_softmax(ctx.linear(x, "lm_head"), axis=-1)


def forward(
    params: Params,
    src,
    tgt,
    src_valid=None,
    tgt_valid=None,
    *,
    weights: Optional[Mapping[str, Tensor]] = None,
    edits=None,
    zero_masks=None,
) -> tuple[Tensor, ForwardTrace]:
    """Teacher-forced pass; returns log-probabilities [B, T, vocab] and the trace.

    ``src``/``tgt`` are id arrays [B, L] (or a single 1-d sequence). ``weights``
    overrides parameter lookup (e.g. tape leaves for training). ``edits`` maps
    probe names to callables applied to the representation before it is used
    downstream; ``zero_masks`` maps probe names to 0/1 multipliers.
    """
    src = np.asarray(src, dtype=np.int64)
    tgt = np.asarray(tgt, dtype=np.int64)
    if src.ndim == 1:
        src, tgt = src[None], tgt[None]
    src_valid = np.ones(src.shape, dtype=bool) if src_valid is None else np.asarray(src_valid, dtype=bool)
    tgt_valid = np.ones(tgt.shape, dtype=bool) if tgt_valid is None else np.asarray(tgt_valid, dtype=bool)
    _check_ids(src, src_valid, params.config, "input")
    _check_ids(tgt, tgt_valid, params.config, "decoder prefix")
    ctx = _Ctx(params, weights, edits, zero_masks)
    memory = _encode(ctx, src, src_valid)
    logp = _decode(ctx, memory, src_valid, tgt, tgt_valid)
    return logp, ctx.trace


def greedy_decode(params: Params, inputs: Sequence[Sequence[int]], max_steps: int = 16) -> list[list[int]]:
    """Argmax decoding from ``BOS``; each sequence stops at ``EOS`` (excluded) or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if not inputs:
        return []
    src, src_valid = pad_batch(inputs)
    _check_ids(src, src_valid, params.config, "input")
    ctx = _Ctx(params, None, None, None)
    memory = _encode(ctx, src, src_valid)
    B = len(inputs)
    tgt = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    steps = min(max_steps, params.config.max_len - 1)
    for _ in range(steps):
        ctx = _Ctx(params, None, None, None)
        logp = _decode(ctx, memory, src_valid, tgt, np.ones(tgt.shape, dtype=bool))
        nxt = logp.data[:, -1].argmax(axis=-1)
        for i in range(B):
            if not done[i]:
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        tgt = np.concatenate([tgt, np.where(done, PAD, nxt)[:, None]], axis=1)
    return out


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"TPCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: Params, path: str | Path) -> None:
    """Write ``params`` in the binary checkpoint layout.

    Layout: 8-byte magic, uint32 LE version, uint32 LE header length, UTF-8
    JSON header ``{"config": {...}, "tensors": [{"name", "shape", "offset"}]}``,
    then every tensor as little-endian float64 in C order, concatenated in
    header order; ``offset`` counts bytes from the start of the data section.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": params.config.to_json(), "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Params:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return Params(ModelConfig(**header["config"]), tensors)
