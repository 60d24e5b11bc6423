"""Training orchestration: stage plans, Adam, the run variants and eval dumps.

Run kinds and their stages:

=============  =======================================================
meet           parameter-efficient stage (adapters only), then joint
first_only     parameter-efficient stage only
second_only    joint stage, adapters starting from their initialization
coh            joint stage with hand-crafted prefixes
dpo            DPO stage from a supervised warm start
=============  =======================================================

Every variant starts from the same *base model*: the micro transformer
warm-started by plain language modelling on a mixture of preferred and
dispreferred responses, so it can produce both behaviours but is not told
which one is wanted.  Base models are cached on disk by content hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .adapters import ControlTokenSet, make_handcrafted_set, make_lora_set, make_soft_prompt_set
from .config import RunConfig
from .data import Dataset, PreferenceExample, gen_synthetic, get_task, load_jsonl, split_validation
from .diffcore import SeededRng
from .model import ModelState, Tokenizer, batch_nll, generate_text
from .objectives import (DPOConfig, TrainableMask, apply_mask, build_mask, loss_cg, loss_dpo, loss_levels,
                         loss_pet, quantize_scores, sft_loss)

log = logging.getLogger(__name__)

RUN_KINDS = ("meet", "first_only", "second_only", "coh", "dpo")
FILLER_WORDS = ("a", "an", "the", "good", "bad", "response", "summary", "conversation", "is", "was",
                "this", "that", "answer", "and", "of", "to", "very", "not")


class TrainingAborted(RuntimeError):
    pass


class Adam:
    """Adam with bias correction (0.9, 0.999, eps 1e-8) over a fixed parameter list."""

    def __init__(self, params: Sequence[dc.Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name] = self.b1 * self.m[p.name] + (1.0 - self.b1) * g
            v = self.v[p.name] = self.b2 * self.v[p.name] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def moment_norm(self) -> float:
        return float(sum(np.abs(m).sum() + np.abs(v).sum() for m, v in zip(self.m.values(), self.v.values())))


@dataclass
class StagePlan:
    objective: str          # pet | cg | dpo | sft
    learning_rate: float
    epochs: int
    batch_size: int
    clip_grad: float = 0.0

    def __post_init__(self):
        if self.objective not in ("pet", "cg", "dpo", "sft"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def mask_stage(self) -> str:
        return {"pet": "pet", "cg": "joint", "dpo": "base", "sft": "base"}[self.objective]


@dataclass
class TrainPlan:
    kind: str
    stages: list[StagePlan]
    seed: int

    def __post_init__(self):
        expected = {"meet": ["pet", "cg"], "first_only": ["pet"], "second_only": ["cg"], "coh": ["cg"], "dpo": ["dpo"]}
        if self.kind not in expected:
            raise ValueError(f"unknown run kind {self.kind!r}")
        if [s.objective for s in self.stages] != expected[self.kind]:
            raise ValueError(f"{self.kind} needs stages {expected[self.kind]}")


def make_plan(kind: str, cfg: RunConfig) -> TrainPlan:
    t = cfg.train
    pet = StagePlan("pet", t.pet_lr, t.epochs, t.batch_size, t.clip_grad)
    cg = StagePlan("cg", t.cg_lr, t.epochs, t.batch_size, t.clip_grad)
    stages = {
        "meet": [pet, cg],
        "first_only": [pet],
        "second_only": [cg],
        "coh": [cg],
        "dpo": [StagePlan("dpo", t.dpo_lr, t.epochs, t.batch_size, t.clip_grad)],
    }
    if kind not in stages:
        raise ValueError(f"unknown run kind {kind!r}; expected one of {RUN_KINDS}")
    return TrainPlan(kind, stages[kind], cfg.seed)


# ---------------------------------------------------------------- optimize


def _objective(plan: StagePlan, state: ModelState, token_set, ref_state, beta: float) -> Callable:
    if plan.objective == "pet":
        return lambda batch: (loss_pet(state, token_set, batch) if batch[0].pairwise
                              else loss_levels(state, token_set, batch))
    if plan.objective == "cg":
        return lambda batch: (loss_cg(state, token_set, batch) if batch[0].pairwise
                              else loss_levels(state, token_set, batch))
    if plan.objective == "dpo":
        config = DPOConfig(beta, ref_state)
        return lambda batch: loss_dpo(state, ref_state, config, batch)
    return lambda batch: sft_loss(state, batch)


def optimize(state: ModelState, token_set: ControlTokenSet | None, plan: StagePlan,
             examples: Sequence[PreferenceExample], rng: SeededRng, ref_state: ModelState | None = None,
             beta: float = 0.1, on_start: Callable[[Adam], None] | None = None) -> list[float]:
    """Train the parameters selected by the stage's mask; returns the per-batch loss trace.

    A fresh optimizer is built per call, so Adam moments never carry over
    between stages.  ``state`` and ``token_set`` are updated in place.
    """
    if not examples:
        raise ValueError("empty dataset")
    if plan.objective == "dpo" and not all(e.pairwise for e in examples):
        raise ValueError("dpo needs pairwise data")
    if plan.objective == "dpo" and ref_state is None:
        raise ValueError("DPO needs a reference state")
    mask = build_mask(plan.mask_stage, state, token_set)
    trainable = apply_mask(mask, state, token_set)
    opt = Adam(trainable, plan.learning_rate)
    if on_start is not None:
        on_start(opt)
    loss_fn = _objective(plan, state, token_set, ref_state, beta)
    trace = []
    n = len(examples)
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        for start in range(0, n, plan.batch_size):
            batch = [examples[i] for i in order[start:start + plan.batch_size]]
            loss, grads = dc.value_and_grad(lambda: loss_fn(batch), trainable)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {start // plan.batch_size}")
            if plan.clip_grad > 0:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > plan.clip_grad:
                    grads = {k: g * (plan.clip_grad / norm) for k, g in grads.items()}
            opt.step(grads)
            trace.append(loss)
    return trace


def freeze_all(state: ModelState, token_set: ControlTokenSet | None = None) -> None:
    apply_mask(TrainableMask("frozen", frozenset()), state, token_set)


# ---------------------------------------------------------------- base model


def _base_key(cfg: RunConfig, dataset: Dataset) -> str:
    payload = {"model": asdict(cfg.model), "data": dataset.content_hash(), "steps": cfg.train.base_steps,
               "lr": cfg.train.base_lr, "batch": cfg.train.base_batch_size, "seed": cfg.train.base_seed,
               "version": 1}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def cache_dir() -> Path:
    return Path(os.environ.get("MEETALIGN_CACHE", Path.home() / ".cache" / "meetalign"))


def base_corpus(dataset: Dataset, n: int, seed: int) -> list[tuple[str, str]]:
    """Prompt/response pairs for the warm start, preferred and dispreferred mixed 50/50.

    Synthetic tasks draw fresh prompts (never validation prompts); file
    datasets reuse their training split.
    """
    rng = SeededRng(seed, "base/corpus")
    if dataset.task is not None:
        task = get_task(dataset.task)
        held_out = {e.prompt for e in dataset.validation}
        out = []
        while len(out) < n:
            x = task.draw_prompt(rng)
            if x in held_out:
                continue
            y = task.best(x) if rng.uniform() < 0.5 else task.draw_rejected(x, rng)
            out.append((x, y))
        return out
    pool = []
    for e in dataset.train:
        pool.extend([(e.prompt, e.chosen), (e.prompt, e.rejected)] if e.pairwise else [(e.prompt, e.response)])
    return [pool[i] for i in rng.integers(0, len(pool), n)]


def _filler(rng: SeededRng, tok: Tokenizer) -> list[int]:
    # random word context so the base model tolerates any prefix before BOS
    if rng.uniform() < 0.5:
        return []
    words = [rng.choice(FILLER_WORDS) for _ in range(rng.integers(1, 5))]
    return tok.encode(" ".join(words).capitalize())


def pretrain_base(cfg: RunConfig, dataset: Dataset, progress: bool = False) -> ModelState:
    """Warm-start the micro model by language modelling on a response mixture (cosine lr, Adam)."""
    t = cfg.train
    state = ModelState.init(cfg.model.build(), SeededRng(t.base_seed, "base/init"))
    tok = Tokenizer(state.config.vocab_size)
    corpus = base_corpus(dataset, t.base_steps * t.base_batch_size, t.base_seed)
    rng = SeededRng(t.base_seed, "base/filler")
    params = state.parameters()
    opt = Adam(params, t.base_lr)
    warmup = max(1, t.base_steps // 20)
    for step in range(t.base_steps):
        rows = corpus[step * t.base_batch_size:(step + 1) * t.base_batch_size]
        prefixes = [_filler(rng, tok) for _ in rows]
        lr = t.base_lr * min(1.0, (step + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * step / t.base_steps))
        loss, grads = dc.value_and_grad(
            lambda: batch_nll(state, [x for x, _ in rows], [y for _, y in rows], None, prefixes), params)
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss in base warm start at step {step}")
        opt.step(grads, lr)
        if progress and step % 250 == 0:
            log.info("base step %d loss %.4f", step, loss)
    freeze_all(state)
    return state


def load_or_pretrain_base(cfg: RunConfig, dataset: Dataset, progress: bool = False) -> ModelState:
    path = cache_dir() / f"base-{_base_key(cfg, dataset)}.ckpt"
    if path.exists():
        state, _, _ = ckpt.load_checkpoint(path)
        freeze_all(state)
        return state
    state = pretrain_base(cfg, dataset, progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    ckpt.save_checkpoint(tmp, state, extra={"role": "base"})
    os.replace(tmp, path)
    return state


# -------------------------------------------------------------------- runs


@dataclass
class RunRecord:
    kind: str
    seed: int
    config_hash: str
    state: ModelState
    token_set: ControlTokenSet | None
    loss_trace: list[tuple[str, int, int, float]] = field(default_factory=list)
    stage_checkpoints: list[bytes] = field(default_factory=list)
    stage_start_moments: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    dataset_manifest: dict = field(default_factory=dict)
    checkpoint_path: str | None = None

    def checkpoint_bytes(self) -> bytes:
        return ckpt.to_bytes(self.state, self.token_set, extra={"kind": self.kind, "seed": self.seed,
                                                                 "config_hash": self.config_hash})

    def epoch_means(self, stage_index: int = -1) -> list[float]:
        stages = list(dict.fromkeys(s for s, *_ in self.loss_trace))
        stage = stages[stage_index]
        by_epoch: dict[int, list[float]] = {}
        for s, epoch, _, loss in self.loss_trace:
            if s == stage:
                by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path:
        ds = load_jsonl(d.path, d.kind, d.max_input_len)
        return split_validation(ds)
    return gen_synthetic(d.task, d.n, d.seed, pointwise=d.kind == "pointwise")


def make_token_set(kind: str, cfg: RunConfig, state: ModelState, dataset: Dataset) -> ControlTokenSet | None:
    if kind == "dpo":
        return None
    if kind == "coh":
        return make_handcrafted_set(_handcrafted_kind(dataset), Tokenizer(state.config.vocab_size))
    a = cfg.adapter
    if a.kind == "handcrafted":
        if kind in ("meet", "first_only"):
            raise ValueError(f"{kind} needs trainable control tokens; hand-crafted prefixes have none")
        return make_handcrafted_set(_handcrafted_kind(dataset), Tokenizer(state.config.vocab_size))
    if a.kind == "soft_prompt":
        return make_soft_prompt_set(state, a.prompt_length, levels=a.levels)
    if a.kind == "lora":
        if a.levels:
            raise ValueError("quantized control levels are soft prompts; set adapter.kind = soft_prompt")
        return make_lora_set(state, a.rank, SeededRng(cfg.seed, "adapters"), a.alpha or None)
    raise ValueError(f"unknown adapter kind {a.kind!r}")


def _handcrafted_kind(dataset: Dataset) -> str:
    return dataset.extra.get("handcrafted", "synthetic" if dataset.task else "dialogue")


def _training_examples(dataset: Dataset, token_set: ControlTokenSet | None) -> list[PreferenceExample]:
    if dataset.kind == "pairwise":
        return dataset.train
    if token_set is None or not token_set.levels:
        raise ValueError("pointwise data needs quantized control levels (adapter.levels > 0)")
    tagged, counts = quantize_scores(dataset.train, len(token_set.levels))
    if 0 in counts:
        log.warning("empty quantization bins: %s", counts)
    return tagged


def run_variant(kind: str, dataset: Dataset, cfg: RunConfig, base: ModelState | None = None,
                out_dir: str | Path | None = None) -> RunRecord:
    """Train one variant from the base model; optionally persist checkpoint, manifest and loss trace."""
    t0 = time.time()
    plan = make_plan(kind, cfg)
    base = base if base is not None else load_or_pretrain_base(cfg, dataset)
    state = base.copy()
    token_set = make_token_set(kind, cfg, state, dataset)
    examples = _training_examples(dataset, token_set)
    rec = RunRecord(kind, cfg.seed, cfg.hash(), state, token_set, dataset_manifest=dataset.manifest())
    ref_state = None
    if kind == "dpo":
        sft = StagePlan("sft", cfg.train.cg_lr, cfg.train.sft_epochs, cfg.train.batch_size)
        optimize(state, None, sft, examples, SeededRng(cfg.seed, "stage/sft"))
        ref_state = state.copy()
        freeze_all(ref_state)
    for i, stage in enumerate(plan.stages):
        trace = optimize(state, token_set, stage, examples, SeededRng(cfg.seed, f"stage/{i}/{stage.objective}"),
                         ref_state=ref_state, beta=cfg.train.dpo_beta,
                         on_start=lambda opt: rec.stage_start_moments.append(opt.moment_norm() + opt.t))
        per_epoch = math.ceil(len(examples) / stage.batch_size)
        rec.loss_trace.extend((f"{i}:{stage.objective}", j // per_epoch, j % per_epoch, loss)
                              for j, loss in enumerate(trace))
        rec.stage_checkpoints.append(ckpt.to_bytes(state, token_set))
    freeze_all(state, token_set)
    rec.wall_time = time.time() - t0
    if out_dir is not None:
        persist_run(rec, plan, out_dir)
    return rec


def persist_run(rec: RunRecord, plan: TrainPlan, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoint.bin"
    ck.write_bytes(rec.checkpoint_bytes())
    trace_path = out / "loss_trace.csv"
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "batch", "loss"])
        w.writerows(rec.loss_trace)
    manifest = {
        "kind": rec.kind,
        "seed": rec.seed,
        "config_hash": rec.config_hash,
        "stage_plans": [asdict(s) for s in plan.stages],
        "dataset_manifest_hash": hashlib.sha256(json.dumps(rec.dataset_manifest, sort_keys=True).encode()).hexdigest()[:16],
        "dataset": rec.dataset_manifest,
        "checkpoint_path": str(ck),
        "checkpoint_sha256": hashlib.sha256(ck.read_bytes()).hexdigest(),
        "loss_trace_path": str(trace_path),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    rec.checkpoint_path = str(ck)
    return manifest


def load_run(path: str | Path) -> RunRecord:
    """Rebuild a RunRecord (state, adapters, identity) from a checkpoint file or run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.bin"
    state, token_set, extra = ckpt.load_checkpoint(path)
    freeze_all(state, token_set)
    return RunRecord(extra.get("kind", "unknown"), extra.get("seed", 0), extra.get("config_hash", ""),
                     state, token_set, checkpoint_path=str(path))


def generate_eval_dump(record: RunRecord, prompts: Sequence[str], adapter_choice: str = "good",
                       temperature: float = 0.0, path: str | Path | None = None, max_len: int = 32,
                       seed: int = 0) -> list[dict]:
    """One response per prompt under the chosen control token, as JSONL rows."""
    if adapter_choice == "none":
        adapter = None
    elif record.token_set is None:
        raise ValueError(f"run {record.kind!r} has no control tokens; use adapter choice 'none'")
    else:
        adapter = record.token_set.select(adapter_choice)
    outs = generate_text(record.state, list(prompts), adapter, temperature, max_len, seed)
    rows = [{"prompt": p, "response": r, "adapter": adapter_choice, "temperature": temperature}
            for p, r in zip(prompts, outs)]
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return rows


def read_dump(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "prompt" not in row or "response" not in row:
                raise ValueError(f"{path}: line {lineno} lacks prompt/response")
            rows.append(row)
    return rows


def default_choice(record: RunRecord) -> str:
    return "none" if record.token_set is None else "good"
