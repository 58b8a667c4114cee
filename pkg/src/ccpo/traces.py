"""Replayable interaction traces: data model, file IO, synthetic corpora, pricing.

Every question is stored as a fully materialized trace: for each of the T
rounds, the base agent's answer, the guide agent's judgment / corrected
answer / uncertainty score, and the token counts of both calls. Training
and evaluation never touch a live model; they replay traces, which makes
runs deterministic and lets branch enumeration inspect answers on paths
the sampled rollout never took.

Answers are integer ids over a finite vocabulary, so coverage checks are
exact equality.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class TraceFormatError(ValueError):
    """A trace file line could not be parsed."""


class TraceValidationError(ValueError):
    """A trace violates a structural invariant; the message names the field."""


@dataclass(frozen=True)
class RoundRecord:
    """One round's pre-materialized outputs from the base and guide agents."""

    base_answer: int
    guide_agrees: int
    guide_answer: int
    guide_uncertainty: float
    base_tokens_in: int
    base_tokens_out: int
    guide_tokens_in: int
    guide_tokens_out: int


@dataclass(frozen=True)
class Trace:
    """A question's full interaction record over all T rounds.

    ``solvable_hint`` is diagnostic only and must never be shown to a policy.
    """

    question_id: str
    true_answer: int
    rounds: tuple[RoundRecord, ...]
    solvable_hint: bool | None = None


@dataclass(frozen=True)
class PriceTable:
    """Per-model token prices in currency cents per token.

    Base prices default to zero (a locally hosted model); all entries are
    configurable because whether local compute is priced is a deployment
    decision.
    """

    base_in: float = 0.0
    base_out: float = 0.0
    guide_in: float = 0.0
    guide_out: float = 0.0

    def validate(self) -> None:
        for name in ("base_in", "base_out", "guide_in", "guide_out"):
            if getattr(self, name) < 0:
                raise TraceValidationError(f"price {name} must be >= 0")


@dataclass(frozen=True)
class CallSet:
    """Which agent calls were made in one step of an episode."""

    base: bool = True
    guide: bool = True


_ROUND_FIELDS = (
    "base_answer",
    "guide_agrees",
    "guide_answer",
    "guide_uncertainty",
    "base_tokens_in",
    "base_tokens_out",
    "guide_tokens_in",
    "guide_tokens_out",
)

_TOKEN_FIELDS = (
    "base_tokens_in",
    "base_tokens_out",
    "guide_tokens_in",
    "guide_tokens_out",
)


def validate_trace(trace: Trace, horizon: int, vocab_size: int) -> None:
    """Check every structural invariant; raise TraceValidationError naming the field."""
    if len(trace.rounds) != horizon:
        raise TraceValidationError(
            f"rounds: expected {horizon} entries, got {len(trace.rounds)} "
            f"(question_id={trace.question_id})"
        )
    if not (0 <= trace.true_answer < vocab_size):
        raise TraceValidationError(
            f"true_answer: {trace.true_answer} outside vocabulary [0, {vocab_size})"
        )
    for i, rec in enumerate(trace.rounds):
        if rec.guide_agrees not in (0, 1):
            raise TraceValidationError(f"guide_agrees: round {i + 1} value {rec.guide_agrees}")
        for name in ("base_answer", "guide_answer"):
            val = getattr(rec, name)
            if not (0 <= val < vocab_size):
                raise TraceValidationError(
                    f"{name}: round {i + 1} value {val} outside vocabulary [0, {vocab_size})"
                )
        u = rec.guide_uncertainty
        if not (0.0 <= u <= 1.0) or not math.isfinite(u):
            raise TraceValidationError(f"guide_uncertainty: round {i + 1} value {u} not in [0, 1]")
        for name in _TOKEN_FIELDS:
            val = getattr(rec, name)
            if not isinstance(val, (int, np.integer)) or val < 0:
                raise TraceValidationError(f"{name}: round {i + 1} value {val!r} must be a non-negative integer")
        if rec.guide_agrees == 1 and rec.guide_answer != rec.base_answer:
            raise TraceValidationError(
                f"guide_answer: round {i + 1} disagrees with base_answer despite guide_agrees=1"
            )


def step_cost(record: RoundRecord, calls: CallSet, prices: PriceTable) -> float:
    """API cost of one step, in cents: token counts times the matching prices."""
    cost = 0.0
    if calls.base:
        cost += record.base_tokens_in * prices.base_in
        cost += record.base_tokens_out * prices.base_out
    if calls.guide:
        cost += record.guide_tokens_in * prices.guide_in
        cost += record.guide_tokens_out * prices.guide_out
    return cost


# ---------------------------------------------------------------------------
# File format: newline-delimited JSON, one header line then one trace per line.
# ---------------------------------------------------------------------------

FILE_VERSION = 1


@dataclass(frozen=True)
class TraceFile:
    horizon: int
    answer_vocab_size: int
    traces: tuple[Trace, ...]
    extras: dict = field(default_factory=dict)


def _round_to_dict(rec: RoundRecord) -> dict:
    return {name: getattr(rec, name) for name in _ROUND_FIELDS}


def _trace_to_dict(trace: Trace) -> dict:
    return {
        "question_id": trace.question_id,
        "true_answer": trace.true_answer,
        "rounds": [_round_to_dict(r) for r in trace.rounds],
        "solvable_hint": trace.solvable_hint,
    }


def save_traces(path, traces, horizon: int, answer_vocab_size: int, extras: dict | None = None) -> None:
    """Write a corpus as one header record plus one record per trace."""
    header = {
        "kind": "header",
        "version": FILE_VERSION,
        "horizon": horizon,
        "answer_vocab_size": answer_vocab_size,
    }
    if extras:
        header.update(extras)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for trace in traces:
            fh.write(json.dumps(_trace_to_dict(trace), separators=(",", ":")) + "\n")


def _parse_round(obj: dict, lineno: int) -> RoundRecord:
    try:
        return RoundRecord(
            base_answer=int(obj["base_answer"]),
            guide_agrees=int(obj["guide_agrees"]),
            guide_answer=int(obj["guide_answer"]),
            guide_uncertainty=float(obj["guide_uncertainty"]),
            base_tokens_in=int(obj["base_tokens_in"]),
            base_tokens_out=int(obj["base_tokens_out"]),
            guide_tokens_in=int(obj["guide_tokens_in"]),
            guide_tokens_out=int(obj["guide_tokens_out"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"line {lineno}: malformed round record: {exc}") from exc


def read_trace_file(path) -> TraceFile:
    """Parse a trace file, validating every record against the header."""
    traces: list[Trace] = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise TraceFormatError("line 1: missing header record")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line 1: invalid header: {exc}") from exc
        if header.get("kind") != "header":
            raise TraceFormatError("line 1: first record must be the header")
        horizon = int(header["horizon"])
        vocab_size = int(header["answer_vocab_size"])
        extras = {
            k: v
            for k, v in header.items()
            if k not in ("kind", "version", "horizon", "answer_vocab_size")
        }
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: invalid record: {exc}") from exc
            try:
                trace = Trace(
                    question_id=str(obj["question_id"]),
                    true_answer=int(obj["true_answer"]),
                    rounds=tuple(_parse_round(r, lineno) for r in obj["rounds"]),
                    solvable_hint=obj.get("solvable_hint"),
                )
            except (KeyError, TypeError) as exc:
                raise TraceFormatError(f"line {lineno}: malformed trace record: {exc}") from exc
            validate_trace(trace, horizon, vocab_size)
            traces.append(trace)
    return TraceFile(horizon=horizon, answer_vocab_size=vocab_size, traces=tuple(traces), extras=extras)


def load_traces(path) -> list[Trace]:
    """Load the traces from a corpus file, in file order."""
    return list(read_trace_file(path).traces)


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic trace generator.

    Per-trace difficulty is drawn from Beta(difficulty_alpha, difficulty_beta).
    The base agent is correct at round t with probability
    ``clip(base_correct_start + base_correct_gain * (t - 1)) * (1 - difficulty)``,
    which is nondecreasing in t for a nonnegative gain. The guide's own answer
    is correct with probability
    ``clip(guide_correct * (1 - guide_correct_difficulty_drop * difficulty))``.
    With probability ``unsolvable_fraction`` a trace is forced unsolvable:
    no recorded answer matches the true one. Otherwise at least one round is
    patched to contain the true answer, so solvability is exact by
    construction.

    Uncertainty scores center at ``uncertainty_center_right`` when the guide's
    recorded answer is correct and ``uncertainty_center_wrong`` when it is not,
    with Gaussian noise of scale ``uncertainty_noise``; the score is therefore
    negatively correlated with guide correctness.
    """

    num_traces: int
    horizon: int = 4
    answer_vocab_size: int = 50
    difficulty_alpha: float = 2.0
    difficulty_beta: float = 2.0
    base_correct_start: float = 0.35
    base_correct_gain: float = 0.10
    guide_correct: float = 0.80
    guide_correct_difficulty_drop: float = 0.35
    judgment_accuracy: float = 0.85
    uncertainty_center_right: float = 0.30
    uncertainty_center_wrong: float = 0.70
    uncertainty_noise: float = 0.15
    unsolvable_fraction: float = 0.15
    wrong_answer_repeat: float = 0.5
    mean_base_tokens_in: float = 200.0
    mean_base_tokens_out: float = 80.0
    mean_guide_tokens_in: float = 400.0
    mean_guide_tokens_out: float = 8.0
    token_round_growth: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_traces < 0:
            raise TraceValidationError("num_traces must be >= 0")
        if self.horizon < 1:
            raise TraceValidationError("horizon must be >= 1")
        if self.answer_vocab_size < 2:
            raise TraceValidationError("answer_vocab_size must be >= 2")
        probs = {
            "base_correct_start": self.base_correct_start,
            "guide_correct": self.guide_correct,
            "judgment_accuracy": self.judgment_accuracy,
            "unsolvable_fraction": self.unsolvable_fraction,
            "wrong_answer_repeat": self.wrong_answer_repeat,
            "uncertainty_center_right": self.uncertainty_center_right,
            "uncertainty_center_wrong": self.uncertainty_center_wrong,
        }
        for name, p in probs.items():
            if not (0.0 <= p <= 1.0):
                raise TraceValidationError(f"{name} must be in [0, 1], got {p}")
        if self.base_correct_gain < 0:
            raise TraceValidationError("base_correct_gain must be >= 0")
        for name in ("difficulty_alpha", "difficulty_beta"):
            if getattr(self, name) <= 0:
                raise TraceValidationError(f"{name} must be > 0")
        if self.uncertainty_noise < 0:
            raise TraceValidationError("uncertainty_noise must be >= 0")
        for name in (
            "mean_base_tokens_in",
            "mean_base_tokens_out",
            "mean_guide_tokens_in",
            "mean_guide_tokens_out",
        ):
            if getattr(self, name) < 0:
                raise TraceValidationError(f"{name} must be >= 0")
        if self.token_round_growth < 0:
            raise TraceValidationError("token_round_growth must be >= 0")


def _wrong_answer(rng: np.random.Generator, vocab_size: int, avoid: int) -> int:
    # Uniform over the vocabulary minus the avoided id.
    r = int(rng.integers(0, vocab_size - 1))
    return r + 1 if r >= avoid else r


def generate_synthetic(config: SyntheticConfig) -> list[Trace]:
    """Generate a deterministic corpus of traces from the config's seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    traces: list[Trace] = []
    T = config.horizon
    V = config.answer_vocab_size
    for i in range(config.num_traces):
        y_star = int(rng.integers(0, V))
        difficulty = float(rng.beta(config.difficulty_alpha, config.difficulty_beta))
        unsolvable = bool(rng.random() < config.unsolvable_fraction)

        base_answers: list[int] = []
        agrees_bits: list[int] = []
        guide_answers: list[int] = []
        for t in range(1, T + 1):
            p_base = min(1.0, config.base_correct_start + config.base_correct_gain * (t - 1))
            p_base *= 1.0 - difficulty
            base_correct = (not unsolvable) and rng.random() < p_base
            if base_correct:
                base = y_star
            else:
                prev = base_answers[-1] if base_answers else None
                if (
                    prev is not None
                    and prev != y_star
                    and rng.random() < config.wrong_answer_repeat
                ):
                    base = prev
                else:
                    base = _wrong_answer(rng, V, y_star)

            p_guide = min(1.0, max(0.0, config.guide_correct * (1.0 - config.guide_correct_difficulty_drop * difficulty)))
            guide_correct = (not unsolvable) and rng.random() < p_guide
            guide_own = y_star if guide_correct else _wrong_answer(rng, V, y_star)

            judged_right = rng.random() < config.judgment_accuracy
            base_is_correct = base == y_star
            agrees = int(base_is_correct if judged_right else not base_is_correct)
            guide = base if agrees == 1 else guide_own

            base_answers.append(base)
            agrees_bits.append(agrees)
            guide_answers.append(guide)

        if not unsolvable and y_star not in base_answers and y_star not in guide_answers:
            # Patch the final round so the trace is solvable by construction.
            agrees_bits[-1] = 0
            guide_answers[-1] = y_star

        rounds: list[RoundRecord] = []
        for t in range(1, T + 1):
            guide_right = guide_answers[t - 1] == y_star
            center = config.uncertainty_center_right if guide_right else config.uncertainty_center_wrong
            u = float(np.clip(rng.normal(center, config.uncertainty_noise), 0.0, 1.0))
            scale = 1.0 + config.token_round_growth * (t - 1)
            rounds.append(
                RoundRecord(
                    base_answer=base_answers[t - 1],
                    guide_agrees=agrees_bits[t - 1],
                    guide_answer=guide_answers[t - 1],
                    guide_uncertainty=u,
                    base_tokens_in=int(rng.poisson(config.mean_base_tokens_in * scale)),
                    base_tokens_out=int(rng.poisson(config.mean_base_tokens_out)),
                    guide_tokens_in=int(rng.poisson(config.mean_guide_tokens_in * scale)),
                    guide_tokens_out=int(rng.poisson(config.mean_guide_tokens_out)),
                )
            )
        trace = Trace(
            question_id=f"syn-{i:06d}",
            true_answer=y_star,
            rounds=tuple(rounds),
            solvable_hint=not unsolvable,
        )
        traces.append(trace)
    return traces
