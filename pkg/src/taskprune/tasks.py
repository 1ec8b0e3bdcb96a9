"""Synthetic text-to-text task suite, character vocabulary and JSONL IO."""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
UNK_PLACEHOLDER = "�"


class DataError(ValueError):
    pass


class Vocab:
    """Printable-ASCII character table after four special ids.

    Unsupported characters encode to ``UNK`` and decode to ``UNK_PLACEHOLDER``;
    pad/begin/end decode to the empty string.
    """

    def __init__(self, alphabet: str | None = None):
        self.alphabet = alphabet if alphabet is not None else "".join(map(chr, range(32, 127)))
        self.char_to_id = {c: i + len(SPECIALS) for i, c in enumerate(self.alphabet)}
        self.id_to_char = {i: c for c, i in self.char_to_id.items()}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        return [self.char_to_id.get(c, UNK) for c in text]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == UNK:
                out.append(UNK_PLACEHOLDER)
            elif i in self.id_to_char:
                out.append(self.id_to_char[i])
            elif i >= len(SPECIALS):
                out.append(UNK_PLACEHOLDER)
        return "".join(out)

    def char_ids(self) -> list[int]:
        return sorted(self.id_to_char)


VOCAB = Vocab()


def tokenize(text: str) -> list[int]:
    return VOCAB.encode(text)


def detokenize(ids: Iterable[int]) -> str:
    return VOCAB.decode(ids)


@dataclass(frozen=True)
class Example:
    input: str
    label: str


@dataclass(frozen=True)
class TaskSpec:
    name: str
    prefix: str
    labels: tuple[str, ...]
    domain: str
    generator: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise DataError(f"task {self.name}: duplicate labels {self.labels}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(d["name"], d["prefix"], tuple(d["labels"]), d["domain"], dict(d.get("generator", {})))


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[Example]
    dev: list[Example]
    test: list[Example]

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "dev", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------- lexicons

POSITIVE = ("good", "great", "fine", "superb", "lovely", "bright", "warm", "fun", "neat", "sweet", "happy", "nice")
NEGATIVE = ("bad", "awful", "poor", "dull", "drab", "ugly", "cold", "sad", "weak", "rude", "boring", "dreary")
NOUNS = ("film", "meal", "book", "song", "show", "play", "trip", "game", "cafe", "hotel", "story", "class", "talk", "park", "team")
INTENSIFIERS = ("", "very ", "so ", "truly ", "quite ")
POLARITY_TEMPLATES = (
    "the {noun} was {adv}{adj}",
    "a {adv}{adj} {noun}",
    "this {noun} is {adv}{adj}",
    "what a {adv}{adj} {noun}",
    "i found the {noun} {adv}{adj}",
    "my {noun} felt {adv}{adj}",
)

NAMES = ("ann", "bob", "cy", "dan", "eve", "fay", "gus", "hal", "ivy", "jo", "kim", "lee", "max", "ned")
ITEMS = ("cup", "hat", "key", "pen", "box", "map", "jar", "bag", "toy", "bell", "coin", "lamp")
PLACES = ("car", "den", "hall", "yard", "shed", "room", "van", "barn", "shop", "attic")
COLORS = ("red", "blue", "green", "pink", "gray", "gold", "tan", "teal", "lime", "navy")
SIZES = ("big", "small", "tiny", "huge", "tall", "short")

PARITY_ALPHABET = "abcdefgh"
PARITY_MARKER = "x"


def _polarity_pool(label: str, params: dict) -> list[str]:
    adjs = POSITIVE if label == params.get("positive", "glad") else NEGATIVE
    return [
        t.format(noun=n, adv=a, adj=j)
        for t, n, a, j in itertools.product(POLARITY_TEMPLATES, NOUNS, INTENSIFIERS, adjs)
    ]


def _parity_pool(label: str, params: dict, rng: random.Random, need: int) -> list[str]:
    length = params.get("length", 10)
    want_even = label == "even"
    seen: set[str] = set()
    out: list[str] = []
    tries = 0
    while len(out) < need and tries < need * 200:
        tries += 1
        count = rng.randrange(0, params.get("max_count", 6) + 1)
        if (count % 2 == 0) != want_even:
            continue
        chars = [rng.choice(PARITY_ALPHABET) for _ in range(length - count)] + [PARITY_MARKER] * count
        rng.shuffle(chars)
        s = "".join(chars)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _inference_a_pool(label: str, params: dict) -> list[str]:
    out = []
    for name, item, place in itertools.product(NAMES, ITEMS, PLACES):
        if label == "yes":
            out.append(f"{name} put {item} in {place}; {item} in {place}?")
        else:
            other = ITEMS[(ITEMS.index(item) + 1 + len(name)) % len(ITEMS)]
            out.append(f"{name} put {item} in {place}; {other} in {place}?")
    return out


def _inference_b_pool(label: str, params: dict) -> list[str]:
    out = []
    for name, size, item, color in itertools.product(NAMES, SIZES, ITEMS, COLORS):
        if label == "yes":
            out.append(f"{name}'s {size} {item} is {color}. {item} is {color}?")
        else:
            other = COLORS[(COLORS.index(color) + 1 + len(size)) % len(COLORS)]
            out.append(f"{name}'s {size} {item} is {color}. {item} is {other}?")
    return out


DEFAULT_TASKS = (
    TaskSpec("polarity", "polarity: ", ("glad", "grim"), "sentiment", {"positive": "glad"}),
    TaskSpec("parity", "parity: ", ("even", "odd"), "counting", {"length": 10, "max_count": 6}),
    TaskSpec("inference-a", "nli a: ", ("yes", "no"), "inference"),
    TaskSpec("inference-b", "nli b: ", ("yes", "no"), "inference"),
)

_POOLS: dict[str, Callable] = {
    "polarity": _polarity_pool,
    "inference-a": _inference_a_pool,
    "inference-b": _inference_b_pool,
}


def _generate_task(spec: TaskSpec, rng: random.Random, sizes: Sequence[int]) -> TaskData:
    per_class = [n // len(spec.labels) for n in sizes]
    for n in sizes:
        if n % len(spec.labels):
            raise DataError(f"split size {n} not divisible by {len(spec.labels)} classes")
    need = sum(per_class)
    splits: list[list[Example]] = [[] for _ in sizes]
    for label in spec.labels:
        if spec.name == "parity":
            pool = _parity_pool(label, spec.generator, rng, need)
        else:
            pool = _POOLS[spec.name](label, spec.generator)
            pool = sorted(set(pool))
            rng.shuffle(pool)
        if len(pool) < need:
            raise DataError(f"task {spec.name}: only {len(pool)} distinct {label!r} inputs, need {need}")
        start = 0
        for split, n in zip(splits, per_class):
            split.extend(Example(spec.prefix + body, label) for body in pool[start : start + n])
            start += n
    for split in splits:
        rng.shuffle(split)
    return TaskData(spec, *splits)


def generate_suite(seed: int = 0, sizes: Sequence[int] = (2000, 200, 200), tasks: Sequence[TaskSpec] = DEFAULT_TASKS) -> dict[str, TaskData]:
    """Build the four-task suite; each split is class-balanced and splits are disjoint."""
    prefixes = [t.prefix for t in tasks]
    if len(set(prefixes)) != len(prefixes):
        raise DataError("task prefixes must be unique")
    suite = {}
    for i, spec in enumerate(tasks):
        rng = random.Random(f"{seed}:{spec.name}:{i}")
        suite[spec.name] = _generate_task(spec, rng, sizes)
    return suite


def class_counts(examples: Sequence[Example]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for ex in examples:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return counts


def sample_balanced(dataset: Sequence[Example], n: int, seed: int) -> list[Example]:
    """Draw ``n`` examples, ``n / n_classes`` from each class, without replacement.

    Classes are those present in ``dataset``. Output keeps dataset order.
    """
    by_class: dict[str, list[int]] = {}
    for i, ex in enumerate(dataset):
        by_class.setdefault(ex.label, []).append(i)
    n_classes = len(by_class)
    if n_classes == 0 or n % n_classes:
        raise DataError(f"n={n} is not divisible by the {n_classes} classes present")
    per = n // n_classes
    rng = random.Random(seed)
    chosen: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < per:
            raise DataError(f"class {label!r} has {len(idx)} examples, need {per}")
        chosen.extend(rng.sample(idx, per))
    return [dataset[i] for i in sorted(chosen)]


def save_jsonl(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"input": ex.input, "label": ex.label}, ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[Example]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("input"), str) or not isinstance(obj.get("label"), str):
                raise DataError(f"{path}:{lineno}: expected string fields 'input' and 'label'")
            out.append(Example(obj["input"], obj["label"]))
    return out


def save_suite(suite: dict[str, TaskData], out_dir: str | Path) -> None:
    """Write ``<task>/{train,dev,test}.jsonl`` plus ``<task>/task.json``."""
    out_dir = Path(out_dir)
    for name, data in suite.items():
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "task.json").write_text(json.dumps(data.spec.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for split in ("train", "dev", "test"):
            save_jsonl(d / f"{split}.jsonl", data.split(split))


def load_suite(data_dir: str | Path, names: Sequence[str] | None = None) -> dict[str, TaskData]:
    data_dir = Path(data_dir)
    if names is None:
        names = sorted(p.parent.name for p in data_dir.glob("*/task.json"))
    suite = {}
    for name in names:
        d = data_dir / name
        if not (d / "task.json").exists():
            raise DataError(f"unknown task {name!r} under {data_dir}")
        spec = TaskSpec.from_json(json.loads((d / "task.json").read_text(encoding="utf-8")))
        suite[name] = TaskData(spec, *(load_jsonl(d / f"{s}.jsonl") for s in ("train", "dev", "test")))
    return suite
