"""Optional trace collector: builds replay corpora from two chat-completion
HTTP endpoints.

Each question is run for T rounds: the base endpoint produces an answer
(deterministic decoding on the first round, sampling afterwards), then the
guide endpoint judges it with a fixed evaluation prompt and supplies a
corrected answer. Free-text answers map to vocabulary ids by exact match
after normalization, with a reserved escape id for novel strings.

Credentials come from environment variables and are never written to logs
or trace files.
"""

from __future__ import annotations

import os
import re
import string
import time
from dataclasses import dataclass, field

from .traces import RoundRecord, Trace

GUIDE_PROMPT_TEMPLATE = (
    "Evaluate the answer.\n"
    '- If correct, reply "Yes".\n'
    '- If incorrect, reply "No [correct answer]" (only the correct answer, nothing else).\n'
    "Q: {question}\n"
    "A: {answer}\n"
    "Your response:"
)

BASE_PROMPT_FRAMING = (
    "Answer the question. Think step by step, then give your final answer "
    "on its own last line in the form 'Answer: <answer>'."
)

_ARTICLES = ("a", "an", "the")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    words = text.lower().translate(_PUNCT_TABLE).split()
    return " ".join(w for w in words if w not in _ARTICLES)


class AnswerVocab:
    """Fixed vocabulary of normalized answers plus an escape id for novel strings."""

    def __init__(self, known_answers):
        self._ids: dict[str, int] = {}
        for ans in known_answers:
            norm = normalize_answer(ans)
            if norm not in self._ids:
                self._ids[norm] = len(self._ids)
        self.escape_id = len(self._ids)

    @property
    def size(self) -> int:
        return self.escape_id + 1

    def lookup(self, text: str) -> int:
        return self._ids.get(normalize_answer(text), self.escape_id)


@dataclass(frozen=True)
class CollectorConfig:
    base_url: str
    base_model: str
    guide_url: str
    guide_model: str
    base_api_key_env: str = "BASE_API_KEY"
    guide_api_key_env: str = "GUIDE_API_KEY"
    timeout: float = 30.0
    retries: int = 2
    retry_backoff: float = 1.0
    horizon: int = 4
    max_answer_tokens: int = 256
    uncertainty_estimator: str = "logprob"  # or "agreement"

    def validate(self) -> None:
        for name in ("base_url", "guide_url"):
            url = getattr(self, name)
            if not re.match(r"^https?://", url):
                raise ValueError(f"{name} is not a well-formed http(s) URL: {url!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.uncertainty_estimator not in ("logprob", "agreement"):
            raise ValueError(f"unknown uncertainty estimator {self.uncertainty_estimator!r}")


class CollectError(RuntimeError):
    """A question could not be collected; the trace is skipped."""


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


def _headers(key_env: str) -> dict:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _call_with_retries(transport, url, headers, payload, config: CollectorConfig):
    last = None
    for attempt in range(config.retries + 1):
        try:
            return transport(url, headers, payload, config.timeout)
        except Exception as exc:  # transport errors and HTTP failures alike
            last = exc
            if attempt < config.retries and config.retry_backoff > 0:
                time.sleep(config.retry_backoff * (2**attempt))
    raise CollectError(f"endpoint call failed after {config.retries + 1} attempts: {last}")


def _completion(response: dict) -> tuple[str, int, int, object]:
    try:
        choice = response["choices"][0]
        text = choice["message"]["content"]
        usage = response.get("usage", {})
        tokens_in = int(usage.get("prompt_tokens", 0))
        tokens_out = int(usage.get("completion_tokens", 0))
        return text, tokens_in, tokens_out, choice.get("logprobs")
    except (KeyError, IndexError, TypeError) as exc:
        raise CollectError(f"malformed completion response: {exc}") from exc


def parse_base_answer(text: str) -> str:
    """Final answer from a base reply: the last 'Answer:' line, else the last line."""
    answer = None
    for line in text.strip().splitlines():
        m = re.match(r"\s*answer\s*:\s*(.+)", line, flags=re.IGNORECASE)
        if m:
            answer = m.group(1).strip()
    if answer is None:
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            raise CollectError("base reply contained no answer")
        answer = lines[-1]
    return answer


def parse_guide_reply(text: str) -> tuple[int, str | None]:
    """Judgment and corrected answer from a guide reply.

    'Yes' agrees with the base answer; 'No <answer>' supplies the correction.
    """
    stripped = text.strip()
    if re.match(r"^yes\b", stripped, flags=re.IGNORECASE):
        return 1, None
    m = re.match(r"^no\b[\s:,.-]*(.*)$", stripped, flags=re.IGNORECASE | re.DOTALL)
    if m:
        corrected = m.group(1).strip()
        if not corrected:
            raise CollectError("guide disagreed but gave no corrected answer")
        return 0, corrected
    raise CollectError(f"unparseable guide reply: {stripped[:80]!r}")


def _judgment_uncertainty(logprobs, agrees: int, estimator: str) -> float:
    """One minus the judgment token's confidence when log-probabilities are
    exposed; otherwise an agreement-based heuristic."""
    if estimator == "logprob" and logprobs:
        try:
            lp = float(logprobs["content"][0]["logprob"])
            import math

            return float(min(1.0, max(0.0, 1.0 - math.exp(lp))))
        except (KeyError, IndexError, TypeError, ValueError):
            pass
    return 0.2 if agrees else 0.8


def collect_trace(
    question: str,
    gold_answer: str,
    config: CollectorConfig,
    vocab: AnswerVocab,
    question_id: str = "q0",
    transport=None,
) -> Trace:
    """Run the T-round orchestration against live endpoints and record it."""
    config.validate()
    transport = transport or _requests_transport
    base_headers = _headers(config.base_api_key_env)
    guide_headers = _headers(config.guide_api_key_env)

    history: list[str] = []
    rounds: list[RoundRecord] = []
    for t in range(1, config.horizon + 1):
        user_lines = [f"Question: {question}"]
        if history:
            user_lines.append("Previous rounds:")
            user_lines.extend(history)
        base_payload = {
            "model": config.base_model,
            "messages": [
                {"role": "system", "content": BASE_PROMPT_FRAMING},
                {"role": "user", "content": "\n".join(user_lines)},
            ],
            "temperature": 0.0 if t == 1 else 1.0,
            "max_tokens": config.max_answer_tokens,
        }
        base_resp = _call_with_retries(transport, config.base_url, base_headers, base_payload, config)
        base_text, base_in, base_out, _ = _completion(base_resp)
        base_answer_text = parse_base_answer(base_text)

        guide_payload = {
            "model": config.guide_model,
            "messages": [
                {
                    "role": "user",
                    "content": GUIDE_PROMPT_TEMPLATE.format(question=question, answer=base_answer_text),
                }
            ],
            "temperature": 0.0,
            "max_tokens": 32,
            "logprobs": True,
        }
        guide_resp = _call_with_retries(transport, config.guide_url, guide_headers, guide_payload, config)
        guide_text, guide_in, guide_out, guide_logprobs = _completion(guide_resp)
        agrees, corrected = parse_guide_reply(guide_text)
        guide_answer_text = base_answer_text if agrees else corrected
        uncertainty = _judgment_uncertainty(guide_logprobs, agrees, config.uncertainty_estimator)

        rounds.append(
            RoundRecord(
                base_answer=vocab.lookup(base_answer_text),
                guide_agrees=agrees,
                guide_answer=vocab.lookup(guide_answer_text),
                guide_uncertainty=uncertainty,
                base_tokens_in=base_in,
                base_tokens_out=base_out,
                guide_tokens_in=guide_in,
                guide_tokens_out=guide_out,
            )
        )
        history.append(f"Round {t} answer: {base_answer_text}")
        history.append(f"Round {t} evaluation: {guide_text.strip()}")

    return Trace(
        question_id=question_id,
        true_answer=vocab.lookup(gold_answer),
        rounds=tuple(rounds),
        solvable_hint=None,
    )


def collect_corpus(questions, config: CollectorConfig, transport=None, log=None):
    """Collect traces for (question, answer) pairs; invalid ones are skipped.

    Returns (traces, skipped) where skipped is a list of (question_id, reason).
    """
    vocab = AnswerVocab([gold for _, gold in questions])
    traces: list[Trace] = []
    skipped: list[tuple[str, str]] = []
    for i, (question, gold) in enumerate(questions):
        qid = f"collected-{i:06d}"
        try:
            traces.append(collect_trace(question, gold, config, vocab, qid, transport))
        except CollectError as exc:
            skipped.append((qid, str(exc)))
            if log is not None:
                log(f"skipping {qid}: {exc}")
    return traces, skipped, vocab
