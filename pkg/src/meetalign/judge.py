"""Client for an HTTP pairwise judge.

Request (POST, JSON)::

    {"prompt": <filled template>, "answer_a": ..., "answer_b": ..., "template_id": "summary"|"dialogue"}

Response::

    {"verdict": "A"|"B"|"C", "explanation": ...}

Each example is judged in both presentation orders and the pair of
verdicts folded with :func:`aggregate_two_orders`.  Transport failures and
unparseable replies leave the example unjudged; they are counted, never
scored as ties.
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .evaluation import Verdict, WinRateReport, aggregate_two_orders

log = logging.getLogger(__name__)

SUMMARY_TEMPLATE = """\
Which of the following summaries does a better job of summarizing the most \
important points in the given forum post, without including unimportant or \
irrelevant details? A good summary is both precise and concise.

Post:
{question}

Summary A:
{answer_a}

Summary B:
{answer_b}

FIRST provide a one-sentence comparison of the two summaries, explaining which \
you prefer and why. SECOND, on a new line, state only "A" or "B" to indicate \
your choice. Your response should use the format:
Comparison: <one-sentence comparison and explanation>
Preferred: <"A" or "B">
"""

DIALOGUE_SYSTEM = """\
Please act as an impartial judge and evaluate the quality of the responses \
provided by two AI assistants to the user question displayed below. You should \
choose the assistant that follows the user's instructions and answers the \
user's question better. Your evaluation should consider factors such as the \
helpfulness, relevance, accuracy, depth, creativity, and level of detail of \
their responses. Begin your evaluation by comparing the two responses and \
provide a short explanation. Avoid any positional biases and ensure that the \
order in which the responses were presented does not influence your decision. \
Do not allow the length of the responses to influence your evaluation. Do not \
favor certain names of the assistants. Be as objective as possible. After \
providing your explanation, output your final verdict by strictly following \
this format: "[[A]]" if assistant A is better, "[[B]]" if assistant B is \
better, and "[[C]]" for a tie.
"""

DIALOGUE_TEMPLATE = DIALOGUE_SYSTEM + """
[User Question]
{question}
[The Start of Assistant A's Answer]
{answer_a}
[The End of Assistant A's Answer]
[The Start of Assistant B's Answer]
{answer_b}
[The End of Assistant B's Answer]
"""

TEMPLATES = {"summary": SUMMARY_TEMPLATE, "dialogue": DIALOGUE_TEMPLATE}


class JudgeError(RuntimeError):
    pass


def fill_template(template_id: str, question: str, answer_a: str, answer_b: str) -> str:
    try:
        tpl = TEMPLATES[template_id]
    except KeyError:
        raise ValueError(f"unknown template {template_id!r}") from None
    return tpl.format(question=question, answer_a=answer_a, answer_b=answer_b)


def parse_verdict(payload: dict) -> str:
    v = payload.get("verdict") if isinstance(payload, dict) else None
    if isinstance(v, str):
        v = v.strip().strip("[]").strip().upper()
    if v not in ("A", "B", "C"):
        raise JudgeError(f"unparseable verdict: {payload!r}")
    return v


def remote_judge(endpoint: str, prompt: str, answer_a: str, answer_b: str,
                 template_id: str = "dialogue", timeout: float = 30.0) -> Verdict:
    """One query; the verdict is from ``answer_a``'s perspective."""
    body = json.dumps({
        "prompt": fill_template(template_id, prompt, answer_a, answer_b),
        "answer_a": answer_a,
        "answer_b": answer_b,
        "template_id": template_id,
    }).encode("utf-8")
    req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise JudgeError(f"judge request failed: {exc}") from exc
    return {"A": Verdict.WIN, "B": Verdict.LOSE, "C": Verdict.TIE}[parse_verdict(payload)]


@dataclass
class JudgeResult:
    verdicts: list[Verdict | None]
    unjudged: int = 0
    errors: list[str] = field(default_factory=list)

    def report(self, **labels) -> WinRateReport:
        judged = [v for v in self.verdicts if v is not None]
        rep = WinRateReport.from_verdicts(judged, **labels)
        rep.unjudged = self.unjudged
        return rep


@dataclass
class JudgeClient:
    endpoint: str
    template_id: str = "dialogue"
    timeout: float = 30.0
    max_concurrency: int = 4

    def judge_pair(self, prompt: str, candidate: str, baseline: str) -> Verdict:
        """Query both orders and aggregate, from the candidate's side."""
        ab = remote_judge(self.endpoint, prompt, candidate, baseline, self.template_id, self.timeout)
        ba = remote_judge(self.endpoint, prompt, baseline, candidate, self.template_id, self.timeout)
        flipped = {Verdict.WIN: Verdict.LOSE, Verdict.LOSE: Verdict.WIN, Verdict.TIE: Verdict.TIE}[ba]
        return aggregate_two_orders(ab, flipped)

    def judge_many(self, prompts: Sequence[str], candidates: Sequence[str], baselines: Sequence[str]) -> JudgeResult:
        if not (len(prompts) == len(candidates) == len(baselines)):
            raise ValueError("prompts, candidates and baselines must align")

        def one(args):
            try:
                return self.judge_pair(*args), None
            except JudgeError as exc:
                return None, str(exc)

        with ThreadPoolExecutor(max_workers=max(1, self.max_concurrency)) as pool:
            results = list(pool.map(one, zip(prompts, candidates, baselines)))
        verdicts = [v for v, _ in results]
        errors = [e for _, e in results if e]
        if errors:
            log.warning("%d of %d examples unjudged", len(errors), len(results))
        return JudgeResult(verdicts, unjudged=len(errors), errors=errors)
