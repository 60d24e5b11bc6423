"""A small GPT-style decoder with adapter hooks, response-only loss and sampling."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, SeededRng, Tensor

DEFAULT_MAX_LEN = 128


class Tokenizer:
    """Byte-level vocabulary.

    ids 0-255 are raw bytes; then BOS (opens a prompt), EOS, PAD and SEP
    (separates prompt from response).  Ids from ``CONTROL_START`` up to
    ``vocab_size`` are reserved for control tokens.
    """

    BOS, EOS, PAD, SEP = 256, 257, 258, 259
    CONTROL_START = 260
    SPECIAL = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD, "<sep>": SEP}

    def __init__(self, vocab_size: int = 260):
        if vocab_size < self.CONTROL_START:
            raise ValueError(f"vocab_size must be at least {self.CONTROL_START}")
        self.vocab_size = vocab_size

    @property
    def control_ids(self) -> range:
        return range(self.CONTROL_START, self.vocab_size)

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        return bytes(i for i in ids if i < 256)

    def decode(self, ids: Sequence[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def prompt_ids(self, x: str) -> list[int]:
        return [self.BOS, *self.encode(x), self.SEP]

    def response_ids(self, y: str) -> list[int]:
        return [*self.encode(y), self.EOS]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    context_length: int = 256
    n_layers: int = 2
    n_heads: int = 4
    hidden_dim: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "context_length", "n_layers", "n_heads", "hidden_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio
    shapes = {"tok_emb": (cfg.vocab_size, h), "pos_emb": (cfg.context_length, h)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (h,), p + "ln1.b": (h,),
            p + "attn.wq": (h, h), p + "attn.bq": (h,),
            p + "attn.wk": (h, h), p + "attn.bk": (h,),
            p + "attn.wv": (h, h), p + "attn.bv": (h,),
            p + "attn.wo": (h, h), p + "attn.bo": (h,),
            p + "ln2.g": (h,), p + "ln2.b": (h,),
            p + "mlp.w1": (f, h), p + "mlp.b1": (f,),
            p + "mlp.w2": (h, f), p + "mlp.b2": (h,),
        })
    shapes.update({"ln_f.g": (h,), "ln_f.b": (h,), "head": (cfg.vocab_size, h)})
    return shapes


class ModelState:
    """Config plus named parameters.  Weight matrices are stored (d_out, d_in)."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.merged_adapters: list[str] = []

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng) -> "ModelState":
        params = {}
        out_std = 0.02 / np.sqrt(2 * config.n_layers)
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".g"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            elif name.endswith(("attn.wo", "mlp.w2")):
                data = rng.normal(shape, out_std)
            else:
                data = rng.normal(shape, 0.02)
            params[name] = Parameter(name, data)
        return cls(config, params)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag

    def copy(self) -> "ModelState":
        new = ModelState(self.config, {n: Parameter(n, p.data, p.trainable) for n, p in self.params.items()})
        new.merged_adapters = list(self.merged_adapters)
        return new

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def __deepcopy__(self, memo):
        return self.copy()


# --------------------------------------------------------------- forward pass


def _linear(x: Tensor, w: Parameter, b: Parameter | None, lora=None) -> Tensor:
    out = dc.matmul(x, dc.transpose(w, (1, 0)))
    if b is not None:
        out = dc.add(out, b)
    if lora is not None:
        a_mat, b_mat, factor = lora
        delta = dc.matmul(dc.matmul(x, dc.transpose(a_mat, (1, 0))), dc.transpose(b_mat, (1, 0)))
        out = dc.add(out, dc.scale(delta, factor))
    return out


def _prefix(adapter, tokenizer: Tokenizer) -> tuple[list[int], Tensor | None, dict]:
    """(prefix token ids, prefix embedding rows, lora entries) for an adapter."""
    if adapter is None:
        return [], None, {}
    kind = getattr(adapter, "kind", None)
    if kind == "handcrafted":
        return list(adapter.token_ids), None, {}
    if kind == "soft_prompt":
        return [], adapter.rows, {}
    if kind == "lora":
        return [], None, adapter.entries()
    raise ValueError(f"unknown adapter kind {kind!r}")


def prefix_length(adapter) -> int:
    if adapter is None:
        return 0
    if adapter.kind == "handcrafted":
        return len(adapter.token_ids)
    if adapter.kind == "soft_prompt":
        return adapter.rows.shape[0]
    return 0


def hidden_batch(state: ModelState, ids: np.ndarray, adapter=None) -> Tensor:
    """Final normalized hidden states (B, P + T, hidden_dim) for right-padded ids (B, T).

    P is the adapter's prefix length (hand-crafted ids or soft-prompt rows).
    """
    cfg = state.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"ids must be (batch, time), got shape {ids.shape}")
    tok = Tokenizer(cfg.vocab_size)
    prefix_ids, rows, lora = _prefix(adapter, tok)
    if prefix_ids:
        ids = np.concatenate([np.tile(np.asarray(prefix_ids), (ids.shape[0], 1)), ids], axis=1)
    batch, t = ids.shape
    total_len = t + (rows.shape[0] if rows is not None else 0)
    if total_len > cfg.context_length:
        raise ValueError(f"sequence of {total_len} positions (prefix included) exceeds "
                         f"context_length {cfg.context_length}")
    p = state.params
    x = dc.embedding(p["tok_emb"], ids)
    if rows is not None:
        if rows.shape[1] != cfg.hidden_dim:
            raise ValueError(f"soft prompt width {rows.shape[1]} != hidden_dim {cfg.hidden_dim}")
        tiled = dc.add(Tensor(np.zeros((batch,) + rows.shape)), rows)
        x = dc.concatenate([tiled, x], axis=1)
    x = dc.add(x, dc.take_rows(p["pos_emb"], 0, total_len, axis=0))

    nh, hd = cfg.n_heads, cfg.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)

    def heads(z):
        return dc.transpose(dc.reshape(z, (batch, total_len, nh, hd)), (0, 2, 1, 3))

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = dc.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _linear(h, p[pre + "attn.wq"], p[pre + "attn.bq"], lora.get(pre + "attn.wq"))
        k = _linear(h, p[pre + "attn.wk"], p[pre + "attn.bk"], lora.get(pre + "attn.wk"))
        v = _linear(h, p[pre + "attn.wv"], p[pre + "attn.bv"], lora.get(pre + "attn.wv"))
        scores = dc.scale(dc.matmul(heads(q), dc.transpose(heads(k), (0, 1, 3, 2))), inv_sqrt)
        att = dc.softmax(dc.causal_mask_fill(scores))
        ctx = dc.reshape(dc.transpose(dc.matmul(att, heads(v)), (0, 2, 1, 3)), (batch, total_len, cfg.hidden_dim))
        x = dc.add(x, _linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"], lora.get(pre + "attn.wo")))
        h = dc.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = dc.gelu(_linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"], lora.get(pre + "mlp.w1")))
        x = dc.add(x, _linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"], lora.get(pre + "mlp.w2")))
    return dc.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def forward_batch(state: ModelState, ids: np.ndarray, adapter=None) -> Tensor:
    """Logits of shape (B, P + T, vocab) for right-padded ids of shape (B, T)."""
    return _linear(hidden_batch(state, ids, adapter), state.params["head"], None)


def forward_logits(state: ModelState, tokens: Sequence[int], adapter=None) -> np.ndarray:
    """Logits (P + n, vocab) for a single token sequence."""
    return forward_batch(state, np.asarray([list(tokens)]), adapter).data[0]


# ---------------------------------------------------------------------- loss


@dataclass
class EncodedBatch:
    ids: np.ndarray        # (B, T) prompt + response, right-padded with PAD
    positions: np.ndarray  # (B, R) logit row predicting each response token
    targets: np.ndarray    # (B, R) response token ids (PAD where masked)
    mask: np.ndarray       # (B, R) 1.0 on real response tokens


def encode_pairs(tok: Tokenizer, xs: Sequence[str], ys: Sequence[str], offset: int = 0,
                 prefixes: Sequence[Sequence[int]] | None = None) -> EncodedBatch:
    """Tokenize (prompt, response) pairs.

    ``offset`` is the adapter's prefix length.  ``prefixes`` optionally
    prepends raw context ids per example (used for base-model warm starts).
    """
    if len(xs) != len(ys) or not xs:
        raise ValueError("need equally many, and at least one, prompts and responses")
    prefixes = prefixes or [()] * len(xs)
    prompts, responses = [], []
    for x, y, pre in zip(xs, ys, prefixes):
        if not x or not y:
            raise ValueError("prompt and response must be nonempty")
        r = tok.response_ids(y)
        if tok.PAD in r[:-1]:
            raise ValueError("response contains PAD")
        prompts.append(list(pre) + tok.prompt_ids(x))
        responses.append(r)
    seqs = [pr + r[:-1] for pr, r in zip(prompts, responses)]
    t = max(map(len, seqs))
    rmax = max(map(len, responses))
    ids = np.full((len(seqs), t), tok.PAD, dtype=np.int64)
    positions = np.zeros((len(seqs), rmax), dtype=np.int64)
    targets = np.full((len(seqs), rmax), tok.PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), rmax))
    for b, (pr, r, s) in enumerate(zip(prompts, responses, seqs)):
        ids[b, :len(s)] = s
        n = len(r)
        positions[b, :n] = offset + len(pr) - 1 + np.arange(n)
        targets[b, :n] = r
        mask[b, :n] = 1.0
    return EncodedBatch(ids, positions, targets, mask)


def response_logprobs(state: ModelState, xs: Sequence[str], ys: Sequence[str], adapter=None,
                      prefixes=None) -> tuple[Tensor, EncodedBatch]:
    """Per-token log-probabilities of each response, shape (B, R), plus the encoding."""
    tok = Tokenizer(state.config.vocab_size)
    enc = encode_pairs(tok, xs, ys, offset=prefix_length(adapter), prefixes=prefixes)
    hidden = hidden_batch(state, enc.ids, adapter)
    # only rows that predict response tokens go through the output head
    b = np.arange(enc.ids.shape[0])[:, None]
    flat_pos = (b * hidden.shape[1] + enc.positions).reshape(-1)
    rows = dc.embedding(dc.reshape(hidden, (-1, hidden.shape[-1])), flat_pos)
    logp = dc.log_softmax(_linear(rows, state.params["head"], None))
    picks = dc.gather(logp, enc.targets.reshape(-1))
    return dc.reshape(picks, enc.positions.shape), enc


def batch_nll(state: ModelState, xs: Sequence[str], ys: Sequence[str], adapter=None, prefixes=None) -> Tensor:
    """Mean over the batch of each response's mean token NLL; prompt and prefix carry no loss."""
    picks, enc = response_logprobs(state, xs, ys, adapter, prefixes)
    weights = -enc.mask / enc.mask.sum(axis=1, keepdims=True) / len(xs)
    return dc.total(dc.mul(picks, Tensor(weights)))


def sequence_logprob(state: ModelState, xs: Sequence[str], ys: Sequence[str], adapter=None) -> Tensor:
    """Summed response log-likelihood per example, shape (B,)."""
    picks, enc = response_logprobs(state, xs, ys, adapter)
    summed = dc.matmul(dc.mul(picks, Tensor(enc.mask)), Tensor(np.ones((enc.mask.shape[1], 1))))
    return dc.reshape(summed, (len(xs),))


def lm_loss(state: ModelState, x: str, y: str, adapter=None) -> Tensor:
    """Mean negative log-likelihood of ``y`` (plus EOS) given the adapter and ``x``."""
    return batch_nll(state, [x], [y], adapter)


# ------------------------------------------------------------------ sampling


def sample_batch(state: ModelState, prompts: Sequence[str], adapter=None, temperature: float = 0.0,
                 max_len: int = DEFAULT_MAX_LEN, rngs: Sequence[SeededRng] | None = None) -> list[list[int]]:
    """Generate a response id sequence (EOS excluded) for each prompt.

    Temperature 0 is greedy with ties to the lowest id; otherwise each row
    draws from softmax(logits / temperature) with its own rng.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if temperature > 0 and (rngs is None or len(rngs) != len(prompts)):
        raise ValueError("sampling at temperature > 0 needs one rng per prompt")
    cfg = state.config
    tok = Tokenizer(cfg.vocab_size)
    offset = prefix_length(adapter)
    encoded = [tok.prompt_ids(x) for x in prompts]
    budget = cfg.context_length - offset
    width = min(max(map(len, encoded)) + max_len, budget)
    ids = np.full((len(encoded), width), tok.PAD, dtype=np.int64)
    cursor = np.array([len(e) for e in encoded])
    if cursor.max() > budget:
        raise ValueError(f"prompt of {cursor.max()} tokens plus prefix {offset} exceeds context_length")
    for b, e in enumerate(encoded):
        ids[b, :len(e)] = e
    out: list[list[int]] = [[] for _ in encoded]
    live = np.ones(len(encoded), dtype=bool)
    state_rows = np.arange(len(encoded))
    while live.any():
        rows = state_rows[live]
        t = int(cursor[rows].max())
        hidden = hidden_batch(state, ids[rows, :t], adapter).data
        last = hidden[np.arange(len(rows)), offset + cursor[rows] - 1] @ state.params["head"].data.T
        for j, b in enumerate(rows):
            if temperature == 0:
                nxt = int(np.argmax(last[j]))
            else:
                z = last[j] / temperature
                z = np.exp(z - z.max())
                nxt = rngs[b].categorical(z / z.sum())
            if nxt == tok.EOS:
                live[b] = False
                continue
            out[b].append(nxt)
            ids[b, cursor[b]] = nxt
            cursor[b] += 1
            if len(out[b]) >= max_len or cursor[b] >= width:
                live[b] = False
    return out


def sample(state: ModelState, x: str, adapter=None, temperature: float = 0.0,
           max_len: int = DEFAULT_MAX_LEN, rng: SeededRng | None = None) -> list[int]:
    return sample_batch(state, [x], adapter, temperature, max_len, None if rng is None else [rng])[0]


def generate_text(state: ModelState, prompts: Sequence[str], adapter=None, temperature: float = 0.0,
                  max_len: int = DEFAULT_MAX_LEN, seed: int = 0) -> list[str]:
    rngs = [SeededRng(seed, f"sample/{i}") for i in range(len(prompts))] if temperature > 0 else None
    tok = Tokenizer(state.config.vocab_size)
    return [tok.decode(ids) for ids in sample_batch(state, prompts, adapter, temperature, max_len, rngs)]


def clone(state: ModelState) -> ModelState:
    return copy.deepcopy(state)
