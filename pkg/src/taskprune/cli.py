"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .attribution import AttributionMap, attribute_dataset, attribute_unsupervised, fpp_scores, rap_scores
from .harness import (
    KINDS,
    METHODS,
    RUNNERS,
    ExperimentConfig,
    MaskStore,
    OnDemandServer,
    evaluate,
)
from .model import InputError, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .plots import render_plots
from .pruner import MaskError, PrunePlan, PruneMask, build_mask, random_mask, surgery, svd_compress
from .tasks import DataError, generate_suite, load_suite, sample_balanced, save_suite
from .train import TrainConfig, train_multitask

log = logging.getLogger("taskprune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(d, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return d


def _task(suite, name):
    if name not in suite:
        raise DataError(f"unknown task {name!r}; available: {', '.join(sorted(suite))}")
    return suite[name]


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args) -> int:
    suite = generate_suite(seed=args.seed, sizes=tuple(args.sizes))
    save_suite(suite, args.out)
    for name, data in suite.items():
        print(f"{name}: {len(data.train)}/{len(data.dev)}/{len(data.test)} -> {Path(args.out) / name}")
    return 0


def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    unknown = sorted(set(cfg) - {"model", "train"})
    if unknown:
        raise DataError(f"unknown config sections: {', '.join(unknown)}")
    model_kw = dict(cfg.get("model", {}))
    train_kw = dict(cfg.get("train", {}))
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            train_kw[key] = getattr(args, flag)
    if args.seed is not None:
        model_kw["seed"] = args.seed
        train_kw["seed"] = args.seed
    try:
        mconf = ModelConfig(**model_kw)
        tconf = TrainConfig(**train_kw)
    except TypeError as e:
        raise DataError(f"bad config: {e}") from None
    suite = load_suite(args.data, args.tasks or None)
    params, losses = train_multitask(
        init_params(mconf),
        {n: d.train for n, d in suite.items()},
        tconf,
        dev={n: d.dev for n, d in suite.items()},
        log_path=args.log,
    )
    save_checkpoint(params, args.out)
    if losses:
        print(f"trained {len(losses)} steps, final loss {losses[-1]:.4f} -> {args.out}")
    else:
        print(f"no training steps; wrote initial weights -> {args.out}")
    return 0


def cmd_attribute(args) -> int:
    params = load_checkpoint(args.checkpoint)
    data = _task(load_suite(args.data), args.task)
    examples = data.split(args.split)
    if args.samples is not None:
        examples = sample_balanced(examples, args.samples, args.seed)
    if args.method == "supervised":
        amap = attribute_dataset(params, examples, args.batch_size)
    elif args.method == "unsupervised":
        amap = attribute_unsupervised(params, [ex.input for ex in examples], data.spec.labels, args.batch_size)
    elif args.method == "fpp":
        amap = fpp_scores(params, examples, args.batch_size)
    else:
        amap = rap_scores(params, examples, data.spec.labels, args.seed, args.batch_size)
    amap.extra["task"] = args.task
    amap.save(args.out)
    print(f"{args.method} scores over {amap.sample_count} examples -> {args.out}")
    return 0


def _plan(args) -> PrunePlan:
    if args.group and args.band:
        raise UsageError("--group and --band are exclusive")
    if args.enc_rate is not None or args.dec_rate is not None:
        return PrunePlan.integrated(args.enc_rate or 0.0, args.dec_rate or 0.0)
    if args.rate is None:
        raise UsageError("give --rate, or --enc-rate/--dec-rate")
    if args.group:
        if not args.stack:
            raise UsageError("--group needs --stack")
        return PrunePlan.layer_type(args.stack, args.group, args.rate)
    if args.band:
        if not args.stack:
            raise UsageError("--band needs --stack")
        return PrunePlan.layer_depth(args.stack, args.band, args.rate)
    if args.stack:
        return PrunePlan.module(args.stack, args.rate)
    return PrunePlan.uniform(args.rate)


def cmd_prune(args) -> int:
    plan = _plan(args)
    if args.random:
        if args.attribution:
            raise UsageError("--random and --attribution are exclusive")
        mask = random_mask(load_checkpoint(args.checkpoint).config, plan, args.seed)
    else:
        if not args.attribution:
            raise UsageError("give --attribution FILE or --random")
        mask = build_mask(AttributionMap.load(args.attribution), plan, load_checkpoint(args.checkpoint).config)
    if args.store:
        if not args.task:
            raise UsageError("--store needs --task")
        out = MaskStore(args.store).save(args.task, mask)
    elif args.out:
        mask.save(args.out)
        out = args.out
    else:
        raise UsageError("give --out FILE or --store DIR --task NAME")
    print(f"kept {mask.kept_fraction():.4f} of prunable neurons -> {out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if args.mask and args.svd is not None:
        raise UsageError("--mask and --svd are exclusive")
    if args.mask:
        params = surgery(params, PruneMask.load(args.mask))
    elif args.svd is not None:
        params = svd_compress(params, args.svd)
    data = _task(load_suite(args.data), args.task)
    acc = evaluate(params, data.split(args.split), args.max_steps)
    print(f"{args.task} {args.split} accuracy {acc:.4f}")
    return 0


def _experiment_config(args, kind: Optional[str]) -> ExperimentConfig:
    d = _read_json(args.config)
    if kind is not None:
        d["kind"] = kind
    elif args.kind is not None:
        d["kind"] = args.kind
    for flag, key in (
        ("checkpoint", "checkpoint"),
        ("data", "data_dir"),
        ("out", "out_dir"),
        ("tasks", "tasks"),
        ("methods", "methods"),
        ("rates", "rates"),
        ("seeds", "seeds"),
        ("stacks", "stacks"),
        ("attr_samples", "attr_samples"),
        ("sample_sizes", "sample_sizes"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    if args.seed is not None:
        # shift the whole seed list so every stochastic draw follows --seed
        n = len(d.get("seeds", ExperimentConfig().seeds))
        if args.seeds is None:
            d["seeds"] = list(range(args.seed, args.seed + n))
        d["attr_seed"] = args.seed
    return ExperimentConfig.from_dict(d)


def _run_experiment(kind: Optional[str]):
    def run(args) -> int:
        cfg = _experiment_config(args, kind)
        RUNNERS[cfg.kind](cfg)
        print(f"{cfg.kind} results -> {Path(cfg.out_dir) / (cfg.kind + '.csv')}")
        return 0

    return run


def cmd_infer(args) -> int:
    if bool(args.requests) == bool(args.task):
        raise UsageError("give either --requests FILE or --task NAME with --text")
    if args.task:
        if not args.text:
            raise UsageError("--task needs at least one --text")
        requests = [(args.task, t) for t in args.text]
    else:
        requests = []
        for lineno, line in enumerate(Path(args.requests).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                requests.append((str(obj["task"]), str(obj["input"])))
            except (json.JSONDecodeError, KeyError, TypeError):
                raise DataError(f"{args.requests}:{lineno}: expected an object with 'task' and 'input'") from None
    server = OnDemandServer(load_checkpoint(args.checkpoint), MaskStore(args.masks), args.max_steps)
    # consecutive requests for one task share a single surgery
    i = 0
    while i < len(requests):
        task = requests[i][0]
        j = i
        while j < len(requests) and requests[j][0] == task:
            j += 1
        texts = [t for _, t in requests[i:j]]
        for text, out in zip(texts, server.serve(task, texts)):
            sys.stdout.write(json.dumps({"task": task, "input": text, "output": out}, ensure_ascii=False) + "\n")
        i = j
    return 0


def cmd_plot(args) -> int:
    written = render_plots(args.csv, args.out)
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------- parser


def _add_experiment_flags(p: argparse.ArgumentParser, with_kind: bool) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its keys")
    if with_kind:
        p.add_argument("--kind", choices=KINDS[:4], help="sweep kind (default module-specific)")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="suite directory written by gen-data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--tasks", nargs="+")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--rates", nargs="+", type=float)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--stacks", nargs="+", choices=("encoder", "decoder"))
    p.add_argument("--attr-samples", type=int, help="balanced training subsample used for scoring")
    p.add_argument("--seed", type=int, help="base seed: seed list becomes seed..seed+n-1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskprune", description="Task-specific attribution pruning on a toy encoder-decoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic task suite")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", nargs=3, type=int, default=[2000, 200, 200], metavar=("TRAIN", "DEV", "TEST"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="multi-task training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help='JSON with optional "model" and "train" sections')
    p.add_argument("--tasks", nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="training log CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="score neurons for one task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--method", choices=("supervised", "unsupervised", "fpp", "rap"), default="supervised")
    p.add_argument("--split", choices=("train", "dev", "test"), default="train")
    p.add_argument("--samples", type=int, help="balanced subsample size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("prune", help="build a kept-index mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attribution")
    p.add_argument("--random", action="store_true", help="random mask instead of scores")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float)
    p.add_argument("--enc-rate", type=float)
    p.add_argument("--dec-rate", type=float)
    p.add_argument("--stack", choices=("encoder", "decoder"))
    p.add_argument("--group", choices=("self-attn", "cross-attn", "ffn"))
    p.add_argument("--band", choices=("low", "mid", "high"))
    p.add_argument("--out")
    p.add_argument("--store", help="mask store directory")
    p.add_argument("--task")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="exact-match accuracy, optionally pruned")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--mask")
    p.add_argument("--svd", type=float, metavar="RATE")
    p.add_argument("--max-steps", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rate sweep (module-specific, integrated, layer-type, layer-depth)")
    _add_experiment_flags(p, with_kind=True)
    p.set_defaults(func=_run_experiment(None))

    for verb, kind in (("low-resource", "low-resource"), ("unsupervised", "unsupervised"), ("unseen", "unseen-domain")):
        p = sub.add_parser(verb, help=f"{kind} experiment")
        _add_experiment_flags(p, with_kind=False)
        if verb == "low-resource":
            p.add_argument("--sample-sizes", nargs="+", type=int)
        p.set_defaults(func=_run_experiment(kind))

    p = sub.add_parser("infer", help="prune per task on demand and decode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", required=True, help="mask store directory (<task>.json)")
    p.add_argument("--task")
    p.add_argument("--text", action="append")
    p.add_argument("--requests", help='JSONL of {"task", "input"} served in order')
    p.add_argument("--max-steps", type=int, default=16)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="SVG charts from result CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"taskprune: error: {e}", file=sys.stderr)
        return 1
    except (DataError, MaskError, InputError, ValueError, OSError) as e:
        print(f"taskprune: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
