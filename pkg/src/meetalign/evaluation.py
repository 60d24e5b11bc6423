"""Win/lose/tie evaluation, Rouge, judge aggregation and temperature sweeps."""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .data import SyntheticTask, get_task

TIE_LOW, TIE_HIGH = 0.45, 0.55
# absorbs last-ulp rounding of sigmoid at the band edges
_BAND_SLACK = 1e-12

DEFAULT_TEMPERATURES = (0.0, 0.25, 0.5, 0.75, 1.0)


class Verdict(str, enum.Enum):
    WIN = "win"
    LOSE = "lose"
    TIE = "tie"


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def oracle_reward(task: str | SyntheticTask, prompt: str, response: str) -> float:
    return get_task(task).reward(prompt, response)


def rewarder_for(task: str | SyntheticTask) -> Callable[[str, str], float]:
    t = get_task(task)
    return t.reward


def compare(r1: float, r2: float) -> Verdict:
    """Verdict for candidate A (reward ``r1``) against baseline B (``r2``)."""
    if not (math.isfinite(r1) and math.isfinite(r2)):
        raise ValueError("rewards must be finite")
    s = sigmoid(r1 - r2)
    if s > TIE_HIGH + _BAND_SLACK:
        return Verdict.WIN
    if s < TIE_LOW - _BAND_SLACK:
        return Verdict.LOSE
    return Verdict.TIE


@dataclass
class WinRateReport:
    win_pct: float
    lose_pct: float
    tie_pct: float
    delta: float
    n: int
    evaluator: str = "oracle"
    baseline: str = "baseline"
    candidate: str = "candidate"
    unjudged: int = 0

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[Verdict], **labels) -> "WinRateReport":
        n = len(verdicts)
        if n == 0:
            raise ValueError("no verdicts to aggregate")
        c = Counter(verdicts)
        win = 100.0 * c[Verdict.WIN] / n
        lose = 100.0 * c[Verdict.LOSE] / n
        tie = 100.0 * c[Verdict.TIE] / n
        return cls(win, lose, tie, win - lose, n, **labels)

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_COLUMNS = ["evaluator", "baseline", "n", "win_pct", "lose_pct", "tie_pct", "delta"]


def write_reports(reports: Sequence[WinRateReport], json_path: str | Path | None = None,
                  csv_path: str | Path | None = None, extra: Mapping | None = None) -> None:
    if json_path:
        payload = {"reports": [r.to_dict() for r in reports]}
        if extra:
            payload.update(extra)
        Path(json_path).write_text(json.dumps(payload, indent=2) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["candidate", *REPORT_COLUMNS])
            for r in reports:
                w.writerow([r.candidate] + [getattr(r, c) for c in REPORT_COLUMNS])


def _pairs(outputs) -> list[tuple[str, str]]:
    out = []
    for o in outputs:
        if isinstance(o, Mapping):
            out.append((o["prompt"], o["response"]))
        else:
            p, r = o
            out.append((p, r))
    return out


def winrate(model_a_outputs, model_b_outputs, rewarder: Callable[[str, str], float], **labels) -> WinRateReport:
    """Per-prompt reward comparison of A against B.

    Outputs are (prompt, response) pairs or dicts with those keys, aligned
    by position on identical prompts.
    """
    a, b = _pairs(model_a_outputs), _pairs(model_b_outputs)
    if len(a) != len(b):
        raise ValueError(f"output counts differ: {len(a)} vs {len(b)}")
    for i, ((pa, _), (pb, _)) in enumerate(zip(a, b)):
        if pa != pb:
            raise ValueError(f"prompt mismatch at index {i}: {pa!r} vs {pb!r}")
    verdicts = [compare(rewarder(p, ra), rewarder(p, rb)) for (p, ra), (_, rb) in zip(a, b)]
    return WinRateReport.from_verdicts(verdicts, **labels)


# --------------------------------------------------------------------- rouge


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _prf(overlap: int, n_cand: int, n_ref: int) -> dict[str, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f}


def rouge_l(candidate: str, reference: str) -> dict[str, float]:
    c, r = _tokens(candidate), _tokens(reference)
    return _prf(lcs_length(c, r), len(c), len(r))


def rouge_n(candidate: str, reference: str, n: int = 1) -> dict[str, float]:
    c, r = _tokens(candidate), _tokens(reference)
    cg = Counter(tuple(c[i:i + n]) for i in range(len(c) - n + 1))
    rg = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
    return _prf(sum((cg & rg).values()), sum(cg.values()), sum(rg.values()))


def rouge_avg(candidate: str, reference: str) -> float:
    """Mean of Rouge-1, Rouge-2 and Rouge-L F1."""
    return (rouge_n(candidate, reference, 1)["f1"] + rouge_n(candidate, reference, 2)["f1"]
            + rouge_l(candidate, reference)["f1"]) / 3.0


def corpus_rouge(candidates: Sequence[str], references: Sequence[str]) -> dict[str, float]:
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need equally many, and at least one, candidates and references")
    n = len(candidates)
    return {
        "rouge_l": sum(rouge_l(c, r)["f1"] for c, r in zip(candidates, references)) / n,
        "rouge_avg": sum(rouge_avg(c, r) for c, r in zip(candidates, references)) / n,
    }


# ------------------------------------------------------------ judge verdicts


def aggregate_two_orders(verdict_ab: Verdict, verdict_ba: Verdict) -> Verdict:
    """Combine the two presentation orders: a win plus a draw is a win, a win plus a loss a tie."""
    score = {Verdict.WIN: 1, Verdict.TIE: 0, Verdict.LOSE: -1}
    total = score[Verdict(verdict_ab)] + score[Verdict(verdict_ba)]
    if total > 0:
        return Verdict.WIN
    if total < 0:
        return Verdict.LOSE
    return Verdict.TIE


# -------------------------------------------------------- temperature sweep


def temperature_sweep(state, adapter, prompts: Sequence[str], temps: Sequence[float],
                      rewarder: Callable[[str, str], float], baseline_outputs,
                      seed: int = 0, max_len: int = 128) -> list[tuple[float, float]]:
    """Delta of the adapter-conditioned model against fixed baseline outputs, per temperature."""
    from .model import generate_text

    if not temps:
        raise ValueError("temps must be nonempty")
    if any(t < 0 for t in temps):
        raise ValueError("temperatures must be non-negative")
    rows = []
    for i, t in enumerate(temps):
        outs = generate_text(state, prompts, adapter, temperature=t, max_len=max_len, seed=seed + i)
        report = winrate(list(zip(prompts, outs)), baseline_outputs, rewarder)
        rows.append((float(t), report.delta))
    return rows


def write_sweep_csv(rows: Sequence[tuple[float, float]], path: str | Path, header=("temperature", "delta")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
