"""Training objectives and trainable-parameter masks.

``loss_cg`` and ``loss_pet`` evaluate the same expression: the sum of the
``bad``-conditioned NLL of the rejected response and the ``good``-conditioned
NLL of the chosen one, averaged over the batch (token-mean inside each
response).  They differ only in which parameters may carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .adapters import ControlTokenSet
from .data import PreferenceExample
from .diffcore import Tensor
from .model import ModelState, batch_nll, sequence_logprob

DPO_BETA = 0.1


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class TrainableMask:
    stage: str
    names: frozenset[str]

    def count(self, state: ModelState, token_set: ControlTokenSet | None = None) -> int:
        sizes = {p.name: p.size for p in state.parameters()}
        if token_set is not None:
            sizes.update({p.name: p.size for p in token_set.parameters()})
        return sum(sizes[n] for n in self.names)


def build_mask(stage: str, state: ModelState, token_set: ControlTokenSet | None = None) -> TrainableMask:
    """``pet``: adapter parameters only.  ``joint``: model and adapters.  ``base``: model only."""
    adapter_names = frozenset(p.name for p in token_set.parameters()) if token_set is not None else frozenset()
    base = frozenset(state.params)
    if stage == "pet":
        if token_set is None or token_set.kind == "handcrafted":
            raise MaskError("hand-crafted control tokens are not trainable; there is no parameter-efficient stage")
        return TrainableMask("pet", adapter_names)
    if stage == "joint":
        return TrainableMask("joint", base | adapter_names)
    if stage == "base":
        return TrainableMask("base", base)
    raise ValueError(f"unknown stage {stage!r}")


def apply_mask(mask: TrainableMask, state: ModelState, token_set: ControlTokenSet | None = None) -> list:
    """Set trainable flags from ``mask``; returns the trainable parameters."""
    params = state.parameters() + (token_set.parameters() if token_set is not None else [])
    for p in params:
        p.trainable = p.name in mask.names
    return [p for p in params if p.trainable]


def _check_pairwise(batch: Sequence[PreferenceExample]) -> None:
    if not batch:
        raise ValueError("empty batch")
    if not all(e.pairwise for e in batch):
        raise ValueError("pairwise batch required; quantize pointwise scores and use loss_levels")


def loss_cg(state: ModelState, token_set: ControlTokenSet, batch: Sequence[PreferenceExample]) -> Tensor:
    _check_pairwise(batch)
    xs = [e.prompt for e in batch]
    bad = batch_nll(state, xs, [e.rejected for e in batch], token_set.bad)
    good = batch_nll(state, xs, [e.chosen for e in batch], token_set.good)
    return dc.add(bad, good)


def loss_pet(state: ModelState, token_set: ControlTokenSet, batch: Sequence[PreferenceExample]) -> Tensor:
    """Same value as :func:`loss_cg`; refuses to run while any base parameter is trainable."""
    leaking = [p.name for p in state.parameters() if p.trainable]
    if leaking:
        raise MaskError(f"base parameters trainable under the parameter-efficient loss: {leaking[:3]}...")
    return loss_cg(state, token_set, batch)


def loss_levels(state: ModelState, token_set: ControlTokenSet, batch: Sequence[PreferenceExample]) -> Tensor:
    """Pointwise analogue: each response conditioned on its quantized level's control token."""
    if not batch or any(e.pairwise or e.level is None for e in batch):
        raise ValueError("batch must be pointwise with quantized levels")
    total = None
    for level in sorted({e.level for e in batch}):
        group = [e for e in batch if e.level == level]
        term = dc.scale(batch_nll(state, [e.prompt for e in group], [e.response for e in group],
                                  token_set.levels[level]), len(group) / len(batch))
        total = term if total is None else dc.add(total, term)
    return total


def sft_loss(state: ModelState, batch: Sequence[PreferenceExample], adapter=None) -> Tensor:
    """Plain NLL of the chosen responses (or the pointwise response)."""
    ys = [e.chosen if e.pairwise else e.response for e in batch]
    return batch_nll(state, [e.prompt for e in batch], ys, adapter)


@dataclass
class DPOConfig:
    beta: float = DPO_BETA
    ref_state: ModelState | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def dpo_from_logps(pol_w: Tensor, pol_l: Tensor, ref_w: np.ndarray, ref_l: np.ndarray, beta: float) -> Tensor:
    """mean of -log sigmoid(beta * ((pol_w - ref_w) - (pol_l - ref_l))) over the batch."""
    n = pol_w.shape[0]
    margin = dc.add(dc.add(pol_w, dc.scale(pol_l, -1.0)), Tensor(-(np.asarray(ref_w) - np.asarray(ref_l))))
    z = dc.reshape(dc.scale(margin, beta), (n, 1))
    # log sigmoid(z) = log_softmax([0, z])[1]
    pair = dc.concatenate([Tensor(np.zeros((n, 1))), z], axis=1)
    logsig = dc.gather(dc.log_softmax(pair), np.ones(n, dtype=np.int64))
    return dc.scale(dc.total(logsig), -1.0 / n)


def loss_dpo(state: ModelState, ref_state: ModelState | None, config: DPOConfig,
             batch: Sequence[PreferenceExample]) -> Tensor:
    """DPO baseline on summed response log-likelihoods; the reference is only read."""
    ref_state = ref_state if ref_state is not None else config.ref_state
    if ref_state is None:
        raise ValueError("DPO needs a reference state")
    _check_pairwise(batch)
    xs = [e.prompt for e in batch]
    yw = [e.chosen for e in batch]
    yl = [e.rejected for e in batch]
    ref_w = sequence_logprob(ref_state, xs, yw).data
    ref_l = sequence_logprob(ref_state, xs, yl).data
    return dpo_from_logps(sequence_logprob(state, xs, yw), sequence_logprob(state, xs, yl), ref_w, ref_l,
                          config.beta)


def quantize_scores(batch: Sequence[PreferenceExample], k: int) -> tuple[list[PreferenceExample], list[int]]:
    """Tag each pointwise example with a quantile-bin level in ``[0, k)``.

    Bin edges are the k-quantiles of the batch's scores; a score equal to
    an edge falls in the lower bin.  Returns the tagged batch and per-level
    counts (empty bins show up as zeros).
    """
    from dataclasses import replace

    if k < 1:
        raise ValueError("k must be at least 1")
    if not batch or any(e.pairwise for e in batch):
        raise ValueError("quantization needs a nonempty pointwise batch")
    scores = np.array([e.score for e in batch], dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    edges = np.quantile(scores, np.arange(1, k) / k) if k > 1 else np.array([])
    levels = np.searchsorted(edges, scores, side="left")
    tagged = [replace(e, level=int(lv)) for e, lv in zip(batch, levels)]
    counts = np.bincount(levels, minlength=k).tolist()
    return tagged, counts
