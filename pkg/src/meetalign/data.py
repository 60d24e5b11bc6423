"""Preference data: synthetic tasks with an exact reward, and JSONL ingestion."""

from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .diffcore import SeededRng
from .model import Tokenizer

DEFAULT_MAX_INPUT_LEN = 256
VALIDATION_FRACTION = 0.1


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceExample:
    """Pairwise ``(prompt, chosen, rejected)`` or pointwise ``(prompt, response, score)``.

    ``level`` is filled in by score quantization for pointwise records.
    """

    prompt: str
    chosen: str | None = None
    rejected: str | None = None
    response: str | None = None
    score: float | None = None
    level: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.pairwise:
            if not self.chosen or not self.rejected:
                raise ValueError("chosen and rejected must be nonempty")
            if self.chosen == self.rejected:
                raise ValueError("chosen and rejected must differ")
        else:
            if not self.response or self.score is None:
                raise ValueError("pointwise example needs a nonempty response and a score")

    @property
    def pairwise(self) -> bool:
        return self.response is None

    # the x / y_w / y_l view
    @property
    def x(self) -> str:
        return self.prompt

    @property
    def y_w(self) -> str:
        return self.chosen

    @property
    def y_l(self) -> str:
        return self.rejected


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticTask:
    """SORT: respond with the prompt's letters sorted.  UPPER: respond with the prompt uppercased."""

    name: str
    alphabet: str = string.ascii_lowercase
    min_len: int = 3
    max_len: int = 8

    def __post_init__(self):
        if self.name not in ("sort", "upper"):
            raise ValueError(f"unknown synthetic task {self.name!r}")
        if self.max_len < self.min_len or self.min_len < 1:
            raise ValueError(f"degenerate length range [{self.min_len}, {self.max_len}]")
        if not self.alphabet or not set(self.alphabet) <= set(string.ascii_lowercase):
            raise ValueError("alphabet must be nonempty lowercase letters")
        if self.name == "sort" and self.max_len < 2:
            raise ValueError("sort needs prompts of at least two letters")

    def best(self, prompt: str) -> str:
        return "".join(sorted(prompt)) if self.name == "sort" else prompt.upper()

    def reward(self, prompt: str, response: str) -> float:
        if self.name == "sort":
            letters = [c for c in prompt if c.isalpha()]
            if Counter(response) != Counter(letters):
                return 0.0
            if len(response) < 2:
                return 1.0
            ordered = sum(a <= b for a, b in zip(response, response[1:]))
            return ordered / (len(response) - 1)
        if len(response) != len(prompt) or not prompt:
            return 0.0
        return sum(r == p.upper() for r, p in zip(response, prompt)) / len(prompt)

    def draw_prompt(self, rng: SeededRng) -> str:
        n = rng.integers(self.min_len, self.max_len + 1)
        letters = [self.alphabet[i] for i in rng.integers(0, len(self.alphabet), n)]
        if self.name == "sort" and len(set(letters)) == 1:
            # a constant string has no non-sorted permutation
            letters[-1] = self.alphabet[(self.alphabet.index(letters[0]) + 1) % len(self.alphabet)]
            if len(set(letters)) == 1:
                raise ValueError("sort needs an alphabet of at least two letters")
        return "".join(letters)

    def draw_rejected(self, prompt: str, rng: SeededRng) -> str:
        best = self.best(prompt)
        if self.name == "sort":
            letters = list(prompt)
            while True:
                cand = "".join(letters[i] for i in rng.permutation(len(letters)))
                if cand != best:
                    return cand
        # flip the case of a nonempty random subset back to lowercase
        while True:
            flips = rng.integers(0, 2, len(best))
            if flips.any():
                return "".join(c.lower() if f else c for c, f in zip(best, flips))


TASKS = {"sort": SyntheticTask("sort"), "upper": SyntheticTask("upper")}


def get_task(task: str | SyntheticTask) -> SyntheticTask:
    if isinstance(task, SyntheticTask):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown synthetic task {task!r}") from None


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    train: list[PreferenceExample]
    validation: list[PreferenceExample]
    kind: str
    provenance: str
    seed: int | None = None
    task: str | None = None
    dropped: int = 0
    deduplicated: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("pairwise", "pointwise"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        overlap = {e.prompt for e in self.train} & {e.prompt for e in self.validation}
        if overlap:
            raise ValueError(f"prompts shared between splits, e.g. {sorted(overlap)[0]!r}")

    @property
    def examples(self) -> list[PreferenceExample]:
        return self.train + self.validation

    def __len__(self) -> int:
        return len(self.train) + len(self.validation)

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "counts": {"train": len(self.train), "validation": len(self.validation)},
            "dropped": self.dropped,
            "deduplicated": self.deduplicated,
            "seed": self.seed,
            "task": self.task,
            "provenance": self.provenance,
            "hash": self.content_hash(),
        }

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for split, rows in (("train", self.train), ("validation", self.validation)):
            for e in rows:
                h.update(json.dumps([split, _record(e)], sort_keys=True).encode())
        return h.hexdigest()[:16]

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2) + "\n")


def gen_synthetic(task: str | SyntheticTask, n: int, seed: int, pointwise: bool = False) -> Dataset:
    """``n`` examples with distinct prompts; the last 10% form the validation split."""
    task = get_task(task)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = SeededRng(seed, f"data/{task.name}")
    seen, rows = set(), []
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise ValueError("prompt space too small for the requested number of distinct prompts")
        x = task.draw_prompt(rng)
        if x in seen:
            continue
        seen.add(x)
        rows.append((x, task.best(x), task.draw_rejected(x, rng)))
    n_val = int(round(n * VALIDATION_FRACTION)) if n > 1 else 0
    cut = n - n_val

    def make(items):
        if not pointwise:
            return [PreferenceExample(x, chosen=w, rejected=l) for x, w, l in items]
        out = []
        for x, w, l in items:
            out.append(PreferenceExample(x, response=w, score=task.reward(x, w)))
            out.append(PreferenceExample(x, response=l, score=task.reward(x, l)))
        return out

    return Dataset(make(rows[:cut]), make(rows[cut:]), "pointwise" if pointwise else "pairwise",
                   provenance=f"synthetic:{task.name}", seed=seed, task=task.name)


# --------------------------------------------------------------------- jsonl

PAIRWISE_FIELDS = {"prompt": str, "chosen": str, "rejected": str}
POINTWISE_FIELDS = {"prompt": str, "response": str, "score": (int, float)}


def _record(e: PreferenceExample) -> dict:
    if e.pairwise:
        return {"prompt": e.prompt, "chosen": e.chosen, "rejected": e.rejected}
    rec = {"prompt": e.prompt, "response": e.response, "score": e.score}
    if e.level is not None:
        rec["level"] = e.level
    return rec


def token_length(e: PreferenceExample, tokenizer: Tokenizer) -> int:
    """Prompt + longest response, in model positions."""
    responses = [e.chosen, e.rejected] if e.pairwise else [e.response]
    return len(tokenizer.prompt_ids(e.prompt)) + max(len(tokenizer.response_ids(r)) for r in responses)


def load_jsonl(path: str | Path, kind: str = "pairwise", max_input_len: int = DEFAULT_MAX_INPUT_LEN,
               split: str = "train", tokenizer: Tokenizer | None = None) -> Dataset:
    """Read one JSON object per line.

    Over-length examples are dropped and duplicates removed, both counted
    on the returned dataset.  Every example lands in ``split``.
    """
    if kind not in ("pairwise", "pointwise"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    if split not in ("train", "validation"):
        raise ValueError(f"unknown split {split!r}")
    tokenizer = tokenizer or Tokenizer()
    schema = PAIRWISE_FIELDS if kind == "pairwise" else POINTWISE_FIELDS
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    examples, seen = [], set()
    dropped = dedup = 0
    errors = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(obj, dict):
            errors.append(f"line {lineno}: expected an object")
            continue
        bad = [k for k, t in schema.items() if k not in obj or not isinstance(obj[k], t) or isinstance(obj[k], bool)]
        if bad:
            errors.append(f"line {lineno}: missing or mistyped field(s) {bad}")
            continue
        try:
            if kind == "pairwise":
                e = PreferenceExample(obj["prompt"], chosen=obj["chosen"], rejected=obj["rejected"])
            else:
                e = PreferenceExample(obj["prompt"], response=obj["response"], score=float(obj["score"]))
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
            continue
        key = tuple(_record(e).values())
        if key in seen:
            dedup += 1
            continue
        seen.add(key)
        if token_length(e, tokenizer) > max_input_len:
            dropped += 1
            continue
        examples.append(e)
    if errors:
        raise SchemaError(f"{path}: " + "; ".join(errors))
    if not examples and not dropped and not dedup:
        raise SchemaError(f"{path}: no examples")
    train, val = (examples, []) if split == "train" else ([], examples)
    return Dataset(train, val, kind, provenance=str(path), dropped=dropped, deduplicated=dedup)


def split_validation(ds: Dataset, fraction: float = VALIDATION_FRACTION) -> Dataset:
    """Move the last ``fraction`` of distinct prompts into the validation split."""
    prompts = list(dict.fromkeys(e.prompt for e in ds.examples))
    n_val = int(round(len(prompts) * fraction))
    val_prompts = set(prompts[len(prompts) - n_val:]) if n_val else set()
    train = [e for e in ds.examples if e.prompt not in val_prompts]
    val = [e for e in ds.examples if e.prompt in val_prompts]
    return replace(ds, train=train, validation=val)


def write_jsonl(examples: Iterable[PreferenceExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(_record(e), ensure_ascii=False) + "\n")
