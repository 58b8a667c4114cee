"""Finite-horizon replay environment over traces.

Observations, single-path steps for behavior rollouts, full branch
enumeration for set-valued policies, the per-question answer universe,
prediction sets, and the coverage indicator.

Rewards are costs to be minimized; the optimizer performs descent on
cost-advantages directly and nothing downstream negates them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable

import numpy as np

from .traces import CallSet, PriceTable, Trace, step_cost


class Action(IntEnum):
    GUIDE_ANSWER = 0
    BASE_ANSWER = 1
    NEXT_ROUND = 2


N_ACTIONS = 3
ANSWER_ACTIONS = (Action.GUIDE_ANSWER, Action.BASE_ANSWER)
OBS_DIM = 6

BOTH_CALLS = CallSet(base=True, guide=True)


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 4
    token_scale: float = 1000.0


@dataclass(frozen=True)
class Observation:
    """Feature slots the policy consumes at a decision point.

    The base model's free-text context is summarized by the repeat flag; a
    small numeric network cannot use the text itself.
    """

    guide_agrees: float
    guide_uncertainty: float
    round_index_normalized: float
    cumulative_guide_tokens_normalized: float
    base_answer_repeat: float

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.guide_agrees,
                self.guide_uncertainty,
                self.round_index_normalized,
                self.cumulative_guide_tokens_normalized,
                self.base_answer_repeat,
                1.0,  # constant bias slot
            ],
            dtype=np.float64,
        )

    def legal_mask(self) -> np.ndarray:
        # NEXT_ROUND is masked to probability zero at the final round.
        final = self.round_index_normalized >= 1.0
        return np.array([1.0, 1.0, 0.0 if final else 1.0], dtype=np.float64)


@dataclass
class EpisodeState:
    trace: Trace
    t: int = 1
    cumulative_guide_tokens: int = 0
    terminated: bool = False
    chosen_answer: int | None = None


@dataclass(frozen=True)
class Transition:
    """One step of a sampled rollout."""

    observation: Observation
    action: Action
    behavior_prob: float
    reward: float
    constraint: float
    done: bool


def initial_state(trace: Trace) -> EpisodeState:
    return EpisodeState(trace=trace)


def legal_mask_for_round(t: int, horizon: int) -> np.ndarray:
    return np.array([1.0, 1.0, 0.0 if t >= horizon else 1.0], dtype=np.float64)


def observe(state: EpisodeState, cfg: EnvConfig) -> Observation:
    """Encode the current decision point as a feature vector."""
    if state.terminated:
        raise ValueError("observe() called on a terminated episode")
    if state.t > cfg.horizon:
        raise ValueError(f"round {state.t} beyond horizon {cfg.horizon}")
    rec = state.trace.rounds[state.t - 1]
    repeat = 0.0
    if state.t > 1 and rec.base_answer == state.trace.rounds[state.t - 2].base_answer:
        repeat = 1.0
    return Observation(
        guide_agrees=float(rec.guide_agrees),
        guide_uncertainty=float(rec.guide_uncertainty),
        round_index_normalized=state.t / cfg.horizon,
        cumulative_guide_tokens_normalized=state.cumulative_guide_tokens / cfg.token_scale,
        base_answer_repeat=repeat,
    )


def step(
    state: EpisodeState,
    action: Action,
    prices: PriceTable,
    lam: float,
    set_size_at_termination: int,
    cfg: EnvConfig,
) -> tuple[EpisodeState, float, float, bool]:
    """Advance one step; returns (state', reward, constraint placeholder, done).

    The reward charges the current round's API calls (both agents ran to
    produce the observation) plus, on termination, the set-size penalty
    ``lam * |C(q)|`` with the set size supplied by the caller after branch
    enumeration. The constraint slot is a placeholder; the trainer finalizes
    it from the coverage indicator at the final step.
    """
    if state.terminated:
        raise ValueError("step() called on a terminated episode")
    rec = state.trace.rounds[state.t - 1]
    reward = step_cost(rec, BOTH_CALLS, prices)
    if action == Action.NEXT_ROUND:
        if state.t >= cfg.horizon:
            raise ValueError(f"NEXT_ROUND is illegal at the horizon (round {state.t})")
        new_state = EpisodeState(
            trace=state.trace,
            t=state.t + 1,
            cumulative_guide_tokens=state.cumulative_guide_tokens
            + rec.guide_tokens_in
            + rec.guide_tokens_out,
        )
        return new_state, reward, 0.0, False
    if action == Action.GUIDE_ANSWER:
        answer = rec.guide_answer
    elif action == Action.BASE_ANSWER:
        answer = rec.base_answer
    else:
        raise ValueError(f"unknown action {action!r}")
    new_state = EpisodeState(
        trace=state.trace,
        t=state.t,
        cumulative_guide_tokens=state.cumulative_guide_tokens,
        terminated=True,
        chosen_answer=answer,
    )
    reward += lam * set_size_at_termination
    return new_state, reward, 0.0, True


# ---------------------------------------------------------------------------
# Answer sets and branch enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    answer: int
    cost: float  # API cost of the rounds along this branch's path
    length: int  # rounds visited before answering


@dataclass(frozen=True)
class RolloutTree:
    """Expansion of a set-valued policy on one trace.

    Only NEXT_ROUND continues an episode, so visited nodes form a chain;
    answer actions hang leaves off it. Leaf count is therefore at most 2T.
    """

    nodes: tuple[tuple[int, frozenset[Action]], ...]
    leaves: tuple[Leaf, ...]

    def max_depth(self) -> int:
        return max(leaf.length for leaf in self.leaves)


def enumerate_branches(
    trace: Trace,
    set_fn: Callable[[Observation], frozenset[Action] | set[Action]],
    cfg: EnvConfig,
    prices: PriceTable | None = None,
) -> RolloutTree:
    """Expand every action in every conformal set along the episode."""
    prices = prices or PriceTable()
    state = initial_state(trace)
    nodes: list[tuple[int, frozenset[Action]]] = []
    leaves: list[Leaf] = []
    path_cost = 0.0
    while True:
        obs = observe(state, cfg)
        actions = frozenset(set_fn(obs))
        if state.t >= cfg.horizon:
            actions = actions - {Action.NEXT_ROUND}
        if not actions:
            raise ValueError(f"empty action set at round {state.t}; set functions must be non-empty")
        nodes.append((state.t, actions))
        rec = trace.rounds[state.t - 1]
        round_cost = step_cost(rec, BOTH_CALLS, prices)
        path_cost += round_cost
        for action in sorted(actions):
            if action == Action.GUIDE_ANSWER:
                leaves.append(Leaf(rec.guide_answer, path_cost, state.t))
            elif action == Action.BASE_ANSWER:
                leaves.append(Leaf(rec.base_answer, path_cost, state.t))
        if Action.NEXT_ROUND not in actions:
            break
        state = EpisodeState(
            trace=trace,
            t=state.t + 1,
            cumulative_guide_tokens=state.cumulative_guide_tokens
            + rec.guide_tokens_in
            + rec.guide_tokens_out,
        )
    return RolloutTree(nodes=tuple(nodes), leaves=tuple(leaves))


def answer_universe(trace: Trace) -> frozenset[int]:
    """All answers any action sequence could produce: both answers of every round."""
    ids = set()
    for rec in trace.rounds:
        ids.add(rec.base_answer)
        ids.add(rec.guide_answer)
    return frozenset(ids)


def prediction_set(tree: RolloutTree) -> frozenset[int]:
    return frozenset(leaf.answer for leaf in tree.leaves)


def coverage_indicator(pred: frozenset[int], universe: frozenset[int], y_star: int) -> int:
    """1 iff the prediction set covers the true answer or no branch could."""
    if not pred <= universe:
        raise ValueError("prediction set is not a subset of the answer universe")
    return int(y_star in pred or y_star not in universe)


def chain_observations(trace: Trace, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and legal-action masks for rounds 1..T.

    The path to round t is unique (NEXT_ROUND repeated), so these rows are
    exactly the observations any rollout or branch enumeration will see.
    """
    T = cfg.horizon
    X = np.empty((T, OBS_DIM), dtype=np.float64)
    masks = np.empty((T, N_ACTIONS), dtype=np.float64)
    state = initial_state(trace)
    for t in range(1, T + 1):
        obs = observe(state, cfg)
        X[t - 1] = obs.vector()
        masks[t - 1] = obs.legal_mask()
        if t < T:
            rec = trace.rounds[t - 1]
            state = EpisodeState(
                trace=trace,
                t=t + 1,
                cumulative_guide_tokens=state.cumulative_guide_tokens
                + rec.guide_tokens_in
                + rec.guide_tokens_out,
            )
    return X, masks


def round_costs(trace: Trace, prices: PriceTable) -> np.ndarray:
    """API cost of each round's base+guide calls."""
    return np.array([step_cost(rec, BOTH_CALLS, prices) for rec in trace.rounds])
