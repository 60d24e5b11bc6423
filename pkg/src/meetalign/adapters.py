"""Control tokens: hand-crafted prefixes, soft prompts and LoRA weight sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Parameter, SeededRng
from .model import ModelState, Tokenizer

LORA_TARGETS = ("attn.wq", "attn.wv")
LORA_INIT_STD = 0.02

HANDCRAFTED_TEXTS = {
    "dialogue": ("A good conversation is", "A bad conversation is"),
    "summary": ("A good summary is", "A bad summary is"),
    "synthetic": ("A good response is", "A bad response is"),
}


class HandcraftedPrefix:
    kind = "handcrafted"

    def __init__(self, text: str, tokenizer: Tokenizer):
        self.text = text
        self.token_ids = tuple(tokenizer.encode(text))
        if not self.token_ids:
            raise ValueError("hand-crafted prefix must be nonempty")

    def parameters(self) -> list[Parameter]:
        return []

    def n_trainable(self) -> int:
        return 0

    def meta(self) -> dict:
        return {"kind": self.kind, "text": self.text}

    def __repr__(self) -> str:
        return f"HandcraftedPrefix({self.text!r})"


class SoftPrompt:
    """L x hidden_dim matrix of virtual token embeddings prepended to the input."""

    kind = "soft_prompt"

    def __init__(self, name: str, rows: np.ndarray, init_word: str | None = None):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError(f"soft prompt needs shape (L >= 1, hidden_dim), got {rows.shape}")
        self.name = name
        self.rows = Parameter(f"{name}.rows", rows)
        self.init_word = init_word

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.rows]

    def n_trainable(self) -> int:
        return self.rows.size

    def meta(self) -> dict:
        return {"kind": self.kind, "length": self.length, "init_word": self.init_word}

    def __repr__(self) -> str:
        return f"SoftPrompt({self.name!r}, L={self.length})"


@dataclass
class LoRAAdapter:
    """Per-target (A: r x d_in, B: d_out x r) pairs; delta is (alpha / r) B A."""

    name: str
    rank: int
    alpha: float
    pairs: dict[str, tuple[Parameter, Parameter]] = field(default_factory=dict)
    kind: str = "lora"

    @property
    def factor(self) -> float:
        return self.alpha / self.rank

    def entries(self) -> dict[str, tuple[Parameter, Parameter, float]]:
        return {t: (a, b, self.factor) for t, (a, b) in self.pairs.items()}

    def parameters(self) -> list[Parameter]:
        return [m for pair in self.pairs.values() for m in pair]

    def n_trainable(self) -> int:
        return sum(p.size for p in self.parameters())

    def delta(self, target: str) -> np.ndarray:
        a, b = self.pairs[target]
        return self.factor * (b.data @ a.data)

    def meta(self) -> dict:
        return {"kind": self.kind, "rank": self.rank, "alpha": self.alpha, "targets": sorted(self.pairs)}


ControlAdapter = HandcraftedPrefix | SoftPrompt | LoRAAdapter


@dataclass
class ControlTokenSet:
    """``good`` conditions preferred responses, ``bad`` dispreferred ones.

    ``levels`` holds K adapters for quantized pointwise scores; level K-1
    plays the ``good`` role.
    """

    good: ControlAdapter
    bad: ControlAdapter
    levels: list = field(default_factory=list)

    def __post_init__(self):
        if self.good is self.bad:
            raise ValueError("good and bad control tokens must be distinct")
        if self.good.kind != self.bad.kind:
            raise ValueError("good and bad control tokens must be the same kind")
        if self.good.n_trainable() != self.bad.n_trainable():
            raise ValueError("good and bad control tokens must have equal capacity")
        ids = [id(p) for a in self.all() for p in a.parameters()]
        if len(ids) != len(set(ids)):
            raise ValueError("control tokens may not share parameters")

    @property
    def kind(self) -> str:
        return self.good.kind

    def all(self) -> list:
        seen, out = set(), []
        for a in [self.good, self.bad, *self.levels]:
            if id(a) not in seen:
                seen.add(id(a))
                out.append(a)
        return out

    def parameters(self) -> list[Parameter]:
        return [p for a in self.all() for p in a.parameters()]

    def named(self) -> dict[str, ControlAdapter]:
        out = {"good": self.good, "bad": self.bad}
        out.update({f"level{k}": a for k, a in enumerate(self.levels)})
        return out

    def select(self, choice: str) -> ControlAdapter:
        try:
            return self.named()[choice]
        except KeyError:
            raise ValueError(f"unknown adapter choice {choice!r}; have {sorted(self.named())}") from None


# --------------------------------------------------------------- constructors


def init_soft_prompt(word: str, length: int, embeddings: np.ndarray, tokenizer: Tokenizer,
                     name: str | None = None) -> SoftPrompt:
    """Rows are copies of the word's token embeddings, tiled cyclically to ``length``."""
    if length < 1:
        raise ValueError("soft prompt length must be at least 1")
    ids = tokenizer.encode(word)
    if not ids:
        raise ValueError(f"word {word!r} tokenizes to nothing")
    table = np.asarray(getattr(embeddings, "data", embeddings))
    tiled = [ids[i % len(ids)] for i in range(length)]
    return SoftPrompt(name or f"soft.{word}", table[tiled].copy(), init_word=word)


def init_lora(state: ModelState, rank: int, rng: SeededRng, alpha: float | None = None,
              targets=LORA_TARGETS, name: str = "lora") -> LoRAAdapter:
    """A ~ N(0, 0.02^2), B = 0 for every target suffix in every layer.

    ``targets`` are suffixes (``attn.wq``) or full parameter names.
    """
    if rank < 1:
        raise ValueError("rank must be at least 1")
    alpha = float(rank if alpha is None else alpha)
    names = []
    for t in targets:
        if t in state.params:
            names.append(t)
            continue
        hits = [n for n in state.params if n.endswith("." + t)]
        if not hits:
            raise ValueError(f"LoRA target {t!r} not found in model")
        names.extend(hits)
    adapter = LoRAAdapter(name, rank, alpha)
    for target in names:
        w = state.params[target]
        if w.data.ndim != 2:
            raise ValueError(f"LoRA target {target!r} is not a matrix")
        d_out, d_in = w.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} too large for target {target!r} of shape {w.shape}")
        a = Parameter(f"{name}.{target}.A", rng.normal((rank, d_in), LORA_INIT_STD))
        b = Parameter(f"{name}.{target}.B", np.zeros((d_out, rank)))
        adapter.pairs[target] = (a, b)
    return adapter


def lora_effective_forward(w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, x: np.ndarray) -> np.ndarray:
    """W x + (alpha / r) B (A x) without forming the merged matrix."""
    w, a, b, x = (np.asarray(m, dtype=np.float64) for m in (w, a, b, x))
    r = a.shape[0]
    if b.shape[1] != r or a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ValueError(f"shape mismatch: W {w.shape}, A {a.shape}, B {b.shape}")
    return w @ x + (alpha / r) * (b @ (a @ x))


def merge_lora(state: ModelState, adapter: LoRAAdapter) -> ModelState:
    """New state with W + (alpha / r) B A folded in; ``state`` is untouched.

    Merging adds the delta again each time, so merging the same adapter
    twice is refused.
    """
    for target in adapter.pairs:
        if target not in state.params:
            raise ValueError(f"LoRA target {target!r} not in model")
    tag = f"{adapter.name}@{id(adapter)}"
    if tag in state.merged_adapters:
        raise ValueError(f"adapter {adapter.name!r} is already merged into this state")
    merged = state.copy()
    for target in adapter.pairs:
        merged.params[target].data = state.params[target].data + adapter.delta(target)
    merged.merged_adapters.append(tag)
    return merged


def make_handcrafted_set(dataset_kind: str, tokenizer: Tokenizer | None = None) -> ControlTokenSet:
    if dataset_kind not in HANDCRAFTED_TEXTS:
        raise ValueError(f"unknown dataset kind {dataset_kind!r}; expected one of {sorted(HANDCRAFTED_TEXTS)}")
    tokenizer = tokenizer or Tokenizer()
    good, bad = HANDCRAFTED_TEXTS[dataset_kind]
    return ControlTokenSet(HandcraftedPrefix(good, tokenizer), HandcraftedPrefix(bad, tokenizer))


def make_soft_prompt_set(state: ModelState, length: int, levels: int = 0) -> ControlTokenSet:
    tok = Tokenizer(state.config.vocab_size)
    emb = state.params["tok_emb"].data
    good = init_soft_prompt("good", length, emb, tok, name="soft.good")
    bad = init_soft_prompt("bad", length, emb, tok, name="soft.bad")
    lv = [init_soft_prompt(f"level{k}", length, emb, tok, name=f"soft.level{k}") for k in range(levels)]
    return ControlTokenSet(good, bad, lv)


def make_lora_set(state: ModelState, rank: int, rng: SeededRng, alpha: float | None = None,
                  targets=LORA_TARGETS) -> ControlTokenSet:
    return ControlTokenSet(
        init_lora(state, rank, rng.fork("lora.good"), alpha, targets, name="lora.good"),
        init_lora(state, rank, rng.fork("lora.bad"), alpha, targets, name="lora.bad"),
    )
