"""Experiment runners: rate sweeps, low-resource, unsupervised, unseen-domain, on-demand inference.

Every runner returns result rows and writes them as CSV under the config's
output directory. Rows follow grid order, so files are reproducible byte for
byte from (checkpoint, data, config).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .attribution import (
    AttributionMap,
    attribute_dataset,
    attribute_unsupervised,
    fpp_scores,
    rap_scores,
)
from .model import Params, greedy_decode, load_checkpoint
from .pruner import (
    BANDS,
    PrunePlan,
    PruneMask,
    build_mask,
    kept_parameter_fraction,
    mask_jaccard,
    random_mask,
    surgery,
    svd_compress,
)
from .tasks import DataError, Example, TaskData, detokenize, load_suite, sample_balanced, tokenize

log = logging.getLogger(__name__)

KINDS = (
    "module-specific",
    "module-integrated",
    "layer-type",
    "layer-depth",
    "low-resource",
    "unsupervised",
    "unseen-domain",
)
METHODS = ("AP", "FPP", "SVD", "RAP", "RP")
STOCHASTIC = ("RAP", "RP")
DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(11))
RESULT_HEADER = ("kind", "method", "task", "enc_rate", "dec_rate", "group", "seed", "accuracy", "kept_fraction")
SUMMARY_HEADER = ("kind", "method", "task", "enc_rate", "dec_rate", "group", "n", "mean", "std")
JACCARD_HEADER = ("kind", "task", "group", "rate", "seed", "kept_fraction", "jaccard", "random_baseline")


@dataclass
class ExperimentConfig:
    kind: str = "module-specific"
    methods: tuple[str, ...] = METHODS
    rates: tuple[float, ...] = DEFAULT_RATES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    checkpoint: str = ""
    data_dir: str = ""
    tasks: tuple[str, ...] = ()
    out_dir: str = "results"
    stacks: tuple[str, ...] = ("encoder", "decoder")
    attr_samples: Optional[int] = None
    attr_seed: int = 0
    batch_size: int = 32
    sample_sizes: tuple[int, ...] = (10, 100, 1000)
    unseen_target: str = "inference-a"
    unseen_related: str = "inference-b"
    unseen_unrelated: str = "polarity"

    def __post_init__(self):
        for name in ("methods", "rates", "seeds", "tasks", "stacks", "sample_sizes"):
            setattr(self, name, tuple(getattr(self, name)))
        self.rates = tuple(float(r) for r in self.rates)
        if self.kind not in KINDS:
            raise DataError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise DataError(f"unknown methods {bad}; expected a subset of {', '.join(METHODS)}")
        if not self.rates or any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise DataError("rate grid must be a non-empty subset of [0, 1]")
        if not self.seeds and any(m in STOCHASTIC for m in self.methods):
            raise DataError("stochastic methods need at least one seed")
        if any(s not in ("encoder", "decoder") for s in self.stacks) or not self.stacks:
            raise DataError("stacks must be a non-empty subset of encoder, decoder")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e.msg})") from None
        if not isinstance(d, dict):
            raise DataError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultRow:
    kind: str
    method: str
    task: str
    enc_rate: float
    dec_rate: float
    group: str
    seed: Optional[int]
    accuracy: float
    kept_fraction: float

    def as_csv(self) -> list[str]:
        return [
            self.kind,
            self.method,
            self.task,
            _fmt_rate(self.enc_rate),
            _fmt_rate(self.dec_rate),
            self.group,
            "" if self.seed is None else str(self.seed),
            repr(float(self.accuracy)),
            repr(float(self.kept_fraction)),
        ]


def _fmt_rate(r: float) -> str:
    return repr(round(float(r), 6))


# ---------------------------------------------------------------- evaluation


def _decode_limit(labels: Iterable[str]) -> int:
    # one step past the longest label settles exact match: anything longer is wrong anyway
    return max(len(tokenize(label)) for label in labels) + 1


def evaluate(params: Params, dataset: Sequence[Example], max_steps: int, chunk: int = 256) -> float:
    """Exact-match accuracy of greedy outputs, decoded at most ``max_steps`` tokens."""
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    correct = 0
    for i in range(0, len(dataset), chunk):
        part = dataset[i : i + chunk]
        outs = greedy_decode(params, [tokenize(ex.input) for ex in part], max_steps)
        correct += sum(detokenize(o) == ex.label for o, ex in zip(outs, part))
    return correct / len(dataset)


# ---------------------------------------------------------------- context


class Context:
    """Loaded checkpoint and suite plus a per-run cache of score maps."""

    def __init__(self, cfg: ExperimentConfig, params: Optional[Params] = None, suite: Optional[dict[str, TaskData]] = None):
        self.cfg = cfg
        if params is None:
            if not cfg.checkpoint or not Path(cfg.checkpoint).is_file():
                raise DataError(f"checkpoint not found: {cfg.checkpoint!r}")
            params = load_checkpoint(cfg.checkpoint)
        if suite is None:
            if not cfg.data_dir or not Path(cfg.data_dir).is_dir():
                raise DataError(f"data directory not found: {cfg.data_dir!r}")
            suite = load_suite(cfg.data_dir)
        self.params = params
        self.suite = suite
        self.tasks = list(cfg.tasks) if cfg.tasks else sorted(suite)
        for t in self.tasks:
            if t not in suite:
                raise DataError(f"unknown task {t!r}; available: {', '.join(sorted(suite))}")
        self._scores: dict[tuple, AttributionMap] = {}

    def attr_data(self, task: str) -> list[Example]:
        train = self.suite[task].train
        if self.cfg.attr_samples is None or self.cfg.attr_samples >= len(train):
            return train
        return sample_balanced(train, self.cfg.attr_samples, self.cfg.attr_seed)

    def scores(self, method: str, task: str, seed: Optional[int] = None) -> AttributionMap:
        key = (method, task, seed)
        if key not in self._scores:
            data = self.attr_data(task)
            b = self.cfg.batch_size
            if method == "AP":
                amap = attribute_dataset(self.params, data, b)
            elif method == "FPP":
                amap = fpp_scores(self.params, data, b)
            elif method == "RAP":
                amap = rap_scores(self.params, data, self.suite[task].spec.labels, seed, b)
            elif method == "UAP":
                amap = attribute_unsupervised(self.params, [ex.input for ex in data], self.suite[task].spec.labels, b)
            else:
                raise ValueError(method)
            self._scores[key] = amap
        return self._scores[key]

    def eval_task(self, params: Params, task: str) -> float:
        data = self.suite[task]
        return evaluate(params, data.test, _decode_limit(data.spec.labels))


def _method_seeds(method: str, seeds: Sequence[int]) -> list[Optional[int]]:
    return list(seeds) if method in STOCHASTIC else [None]


def _compress(ctx: Context, method: str, task: str, seed: Optional[int], plan: PrunePlan) -> Params:
    if method == "SVD":
        return svd_compress(ctx.params, plan)
    if method == "RP":
        mask = random_mask(ctx.params.config, plan, seed)
    else:
        mask = build_mask(ctx.scores(method, task, seed), plan, ctx.params.config)
    return surgery(ctx.params, mask)


def _cells(cfg: ExperimentConfig) -> list[tuple[str, float, float, PrunePlan]]:
    """(group, enc_rate, dec_rate, plan) in grid order for the sweep kinds."""
    out = []
    if cfg.kind == "module-specific":
        for stack in cfg.stacks:
            for r in cfg.rates:
                enc, dec = (r, 0.0) if stack == "encoder" else (0.0, r)
                out.append((stack, enc, dec, PrunePlan.module(stack, r)))
    elif cfg.kind == "module-integrated":
        for e in cfg.rates:
            for d in cfg.rates:
                out.append(("both", e, d, PrunePlan.integrated(e, d)))
    elif cfg.kind == "layer-type":
        for stack in cfg.stacks:
            groups = ("self-attn", "ffn") if stack == "encoder" else ("self-attn", "cross-attn", "ffn")
            for g in groups:
                for r in cfg.rates:
                    enc, dec = (r, 0.0) if stack == "encoder" else (0.0, r)
                    out.append((f"{stack}:{g}", enc, dec, PrunePlan.layer_type(stack, g, r)))
    elif cfg.kind == "layer-depth":
        for stack in cfg.stacks:
            for band in BANDS:
                for r in cfg.rates:
                    enc, dec = (r, 0.0) if stack == "encoder" else (0.0, r)
                    out.append((f"{stack}:{band}", enc, dec, PrunePlan.layer_depth(stack, band, r)))
    else:
        raise DataError(f"{cfg.kind!r} is not a sweep kind")
    return out


def _module_cells(cfg: ExperimentConfig) -> list[tuple[str, float, float, PrunePlan]]:
    return _cells(ExperimentConfig(**{**cfg.to_dict(), "kind": "module-specific"}))


# ---------------------------------------------------------------- runners


def run_sweep(cfg: ExperimentConfig, ctx: Optional[Context] = None, write: bool = True) -> list[ResultRow]:
    """Accuracy over the rate grid for every (task, method, seed)."""
    ctx = ctx or Context(cfg)
    rows = []
    for task in ctx.tasks:
        for method in cfg.methods:
            for seed in _method_seeds(method, cfg.seeds):
                for group, enc, dec, plan in _cells(cfg):
                    pruned = _compress(ctx, method, task, seed, plan)
                    acc = ctx.eval_task(pruned, task)
                    rows.append(ResultRow(cfg.kind, method, task, enc, dec, group, seed, acc, kept_parameter_fraction(pruned)))
                log.info("%s %s %s seed=%s done", cfg.kind, task, method, seed)
    if write:
        write_results(cfg, rows)
    return rows


def run_unsupervised(cfg: ExperimentConfig, ctx: Optional[Context] = None, write: bool = True) -> list[ResultRow]:
    """Supervised AP and label-free UAP rows side by side on the module-specific grid."""
    cfg = ExperimentConfig(**{**cfg.to_dict(), "kind": "unsupervised"})
    ctx = ctx or Context(cfg)
    rows = []
    for task in ctx.tasks:
        for method in ("AP", "UAP"):
            for group, enc, dec, plan in _module_cells(cfg):
                pruned = surgery(ctx.params, build_mask(ctx.scores(method, task), plan, ctx.params.config))
                acc = ctx.eval_task(pruned, task)
                rows.append(ResultRow(cfg.kind, method, task, enc, dec, group, None, acc, kept_parameter_fraction(pruned)))
    if write:
        write_results(cfg, rows)
    return rows


@dataclass
class JaccardRow:
    kind: str
    task: str
    group: str
    rate: float
    seed: Optional[int]
    kept_fraction: float
    jaccard: float

    def as_csv(self) -> list[str]:
        q = self.kept_fraction
        baseline = q / (2 - q)
        return [self.kind, self.task, self.group, _fmt_rate(self.rate), "" if self.seed is None else str(self.seed),
                repr(float(q)), repr(float(self.jaccard)), repr(float(baseline))]


def _pruned_jaccard(a: PruneMask, b: PruneMask) -> float:
    """Mean Jaccard over targets the plan actually prunes (full targets would read as 1)."""
    per, _ = mask_jaccard(a, b)
    keys = [k for k in a.kept if len(a.kept[k]) < a.sizes[k]]
    if not keys:
        return 1.0
    return float(np.mean([per[k] for k in keys]))


def _jaccard_plans(cfg: ExperimentConfig) -> list[tuple[str, PrunePlan]]:
    out = [("all", PrunePlan.uniform(r)) for r in cfg.rates]
    for stack in cfg.stacks:
        out += [(stack, PrunePlan.module(stack, r)) for r in cfg.rates]
    return out


def _plan_rate(plan: PrunePlan) -> float:
    return max(plan.stack_rates())


def run_low_resource(cfg: ExperimentConfig, ctx: Optional[Context] = None, write: bool = True) -> tuple[list[ResultRow], list[JaccardRow]]:
    """AP from balanced subsamples of the training split, one per sampling seed.

    ``group`` encodes stack and sample size, e.g. ``decoder:n=10``; the
    full-data reference rows use ``n=all``. Jaccard rows compare each
    subsample mask with the full-data mask.
    """
    cfg = ExperimentConfig(**{**cfg.to_dict(), "kind": "low-resource"})
    ctx = ctx or Context(cfg)
    config = ctx.params.config
    rows: list[ResultRow] = []
    jrows: list[JaccardRow] = []
    for task in ctx.tasks:
        train = ctx.suite[task].train
        full = attribute_dataset(ctx.params, train, cfg.batch_size)
        for group, enc, dec, plan in _module_cells(cfg):
            pruned = surgery(ctx.params, build_mask(full, plan, config))
            rows.append(ResultRow(cfg.kind, "AP", task, enc, dec, f"{group}:n=all", None, ctx.eval_task(pruned, task), kept_parameter_fraction(pruned)))
        for n in cfg.sample_sizes:
            for seed in cfg.seeds:
                sub = sample_balanced(train, n, seed)
                amap = attribute_dataset(ctx.params, sub, cfg.batch_size)
                for group, enc, dec, plan in _module_cells(cfg):
                    pruned = surgery(ctx.params, build_mask(amap, plan, config))
                    rows.append(ResultRow(cfg.kind, "AP", task, enc, dec, f"{group}:n={n}", seed, ctx.eval_task(pruned, task), kept_parameter_fraction(pruned)))
                for group, plan in _jaccard_plans(cfg):
                    m_sub = build_mask(amap, plan, config)
                    m_full = build_mask(full, plan, config)
                    q = _pruned_kept_fraction(m_full)
                    jrows.append(JaccardRow(cfg.kind, task, f"{group}:n={n}", _plan_rate(plan), seed, q, _pruned_jaccard(m_sub, m_full)))
    if write:
        write_results(cfg, rows)
        write_jaccard(cfg, jrows)
    return rows, jrows


def _pruned_kept_fraction(mask: PruneMask) -> float:
    keys = [k for k in mask.kept if len(mask.kept[k]) < mask.sizes[k]]
    if not keys:
        return 1.0
    return sum(len(mask.kept[k]) for k in keys) / sum(mask.sizes[k] for k in keys)


def run_unseen_domain(cfg: ExperimentConfig, ctx: Optional[Context] = None, write: bool = True) -> tuple[list[ResultRow], list[JaccardRow]]:
    """Masks from original, related and unrelated source tasks, all evaluated on the target task."""
    cfg = ExperimentConfig(**{**cfg.to_dict(), "kind": "unseen-domain"})
    ctx = ctx or Context(cfg)
    for t in (cfg.unseen_target, cfg.unseen_related, cfg.unseen_unrelated):
        if t not in ctx.suite:
            raise DataError(f"unknown task {t!r}")
    config = ctx.params.config
    sources = (("original", cfg.unseen_target), ("related", cfg.unseen_related), ("unrelated", cfg.unseen_unrelated))
    rows: list[ResultRow] = []
    jrows: list[JaccardRow] = []
    for role, source in sources:
        amap = ctx.scores("AP", source)
        for group, enc, dec, plan in _module_cells(cfg):
            pruned = surgery(ctx.params, build_mask(amap, plan, config))
            acc = ctx.eval_task(pruned, cfg.unseen_target)
            rows.append(ResultRow(cfg.kind, "AP", cfg.unseen_target, enc, dec, f"{group}:{role}", None, acc, kept_parameter_fraction(pruned)))
    original = ctx.scores("AP", cfg.unseen_target)
    for role, source in sources[1:]:
        amap = ctx.scores("AP", source)
        for group, plan in _jaccard_plans(cfg):
            m_src = build_mask(amap, plan, config)
            m_orig = build_mask(original, plan, config)
            jrows.append(JaccardRow(cfg.kind, cfg.unseen_target, f"{group}:{role}", _plan_rate(plan), None, _pruned_kept_fraction(m_orig), _pruned_jaccard(m_src, m_orig)))
    if write:
        write_results(cfg, rows)
        write_jaccard(cfg, jrows)
    return rows, jrows


RUNNERS: dict[str, Callable] = {
    "module-specific": run_sweep,
    "module-integrated": run_sweep,
    "layer-type": run_sweep,
    "layer-depth": run_sweep,
    "low-resource": run_low_resource,
    "unsupervised": run_unsupervised,
    "unseen-domain": run_unseen_domain,
}


# ---------------------------------------------------------------- CSV output


def summarize(rows: Sequence[ResultRow]) -> list[list[str]]:
    """Mean and population std of accuracy per cell (all columns except seed)."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r.kind, r.method, r.task, _fmt_rate(r.enc_rate), _fmt_rate(r.dec_rate), r.group)
        cells.setdefault(key, []).append(r.accuracy)
    out = []
    for key, accs in cells.items():
        a = np.asarray(accs)
        out.append([*key, str(len(a)), repr(float(a.mean())), repr(float(a.std()))])
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_results(cfg: ExperimentConfig, rows: Sequence[ResultRow]) -> tuple[Path, Path]:
    out = Path(cfg.out_dir)
    results = out / f"{cfg.kind}.csv"
    summary = out / f"{cfg.kind}_summary.csv"
    _write_csv(results, RESULT_HEADER, (r.as_csv() for r in rows))
    _write_csv(summary, SUMMARY_HEADER, summarize(rows))
    return results, summary


def write_jaccard(cfg: ExperimentConfig, rows: Sequence[JaccardRow]) -> Path:
    path = Path(cfg.out_dir) / f"{cfg.kind}_jaccard.csv"
    _write_csv(path, JACCARD_HEADER, (r.as_csv() for r in rows))
    return path


# ---------------------------------------------------------------- on-demand inference


class MaskStore:
    """Directory of per-task masks, one ``<task>.json`` each."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, task: str) -> Path:
        return self.root / f"{task}.json"

    def save(self, task: str, mask: PruneMask) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(task)
        mask.save(p)
        return p

    def load(self, task: str) -> PruneMask:
        p = self.path(task)
        if not p.is_file():
            raise DataError(f"no mask for task {task!r} in {self.root}")
        return PruneMask.load(p)


class OnDemandServer:
    """Holds one loaded checkpoint and serves any task by pruning a fresh copy per request."""

    def __init__(self, params: Params, store: MaskStore, max_steps: int = 16):
        self.params = params
        self.store = store
        self.max_steps = max_steps

    def serve(self, task: str, texts: Sequence[str]) -> list[str]:
        pruned = surgery(self.params, self.store.load(task))
        outs = greedy_decode(pruned, [tokenize(t) for t in texts], self.max_steps) if texts else []
        return [detokenize(o) for o in outs]


def infer_on_demand(task: str, texts: Sequence[str], store: MaskStore | str | Path, checkpoint: Params | str | Path, max_steps: int = 16) -> list[str]:
    if not isinstance(store, MaskStore):
        store = MaskStore(store)
    params = checkpoint if isinstance(checkpoint, Params) else load_checkpoint(checkpoint)
    return OnDemandServer(params, store, max_steps).serve(task, texts)
