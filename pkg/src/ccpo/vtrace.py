"""Truncated importance weights, V-trace targets, critic fitting, advantages.

Behavior rollouts are collected from the score distribution while updates
target its set-valued surrogate, so every target and advantage is corrected
by truncated importance ratios. No discount factor appears: the horizon is
finite and short, which bounds all returns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import MLP, NumericError


@dataclass(frozen=True)
class CriticPair:
    """Value and constraint critics: same architecture, independent parameters."""

    net: MLP
    theta: np.ndarray  # value head
    phi: np.ndarray  # constraint head


@dataclass
class EpisodeData:
    """Arrays describing one sampled episode (length L = rounds visited)."""

    obs: np.ndarray  # (L, obs_dim)
    masks: np.ndarray  # (L, 3)
    actions: np.ndarray  # (L,) ints
    behavior_probs: np.ndarray  # (L,)
    rewards: np.ndarray  # (L,) cost in cents, set penalty included at the final step
    constraints: np.ndarray  # (L,) zero except the coverage bit at the final step
    set_sizes: np.ndarray  # (L,) hard conformal set sizes along the sampled path
    answer_correct: bool  # sampled final answer equals the true answer
    solvable: bool  # true answer lies in the trace's answer universe
    final_answer: int
    question_id: str = ""


@dataclass
class VTraceBatch:
    """Per-episode targets and advantages for both critics."""

    episodes: list[EpisodeData]
    target_probs: list[np.ndarray]
    rho: list[np.ndarray]
    values: list[np.ndarray]  # V(o_t), t = 1..L (no terminal entry)
    values_c: list[np.ndarray]
    v_targets: list[np.ndarray]
    vc_targets: list[np.ndarray]
    adv: list[np.ndarray] = field(default_factory=list)
    adv_c: list[np.ndarray] = field(default_factory=list)


def importance_weights(
    behavior: np.ndarray, target: np.ndarray, actions: np.ndarray, rho_bar: float
) -> np.ndarray:
    """rho_t = min(rho_bar, target(a_t)/behavior(a_t)) per step.

    Large ratios are clipped; small ones pass through untouched.
    """
    behavior = np.atleast_2d(behavior)
    target = np.atleast_2d(target)
    actions = np.asarray(actions, dtype=int)
    n = np.arange(len(actions))
    mu = behavior[n, actions]
    if np.any(mu <= 0.0):
        raise NumericError("behavior probability of a sampled action is zero")
    return np.minimum(rho_bar, target[n, actions] / mu)


def vtrace_targets(values: np.ndarray, rewards: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Backward recursion for the off-policy corrected value targets.

    ``values`` has length L+1: V(o_1..o_L) plus the terminal bootstrap,
    which is zero after termination.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    L = len(rewards)
    if len(values) != L + 1 or len(rho) != L:
        raise ValueError(
            f"misaligned lengths: values={len(values)}, rewards={L}, rho={len(rho)} "
            "(values must include the terminal bootstrap)"
        )
    v = np.zeros(L + 1)
    v[L] = values[L]
    for t in range(L - 1, -1, -1):
        delta = rho[t] * (rewards[t] + values[t + 1] - values[t])
        v[t] = values[t] + delta + rho[t] * (v[t + 1] - values[t + 1])
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite value target")
    return v[:L]


def _values(net: MLP, params: np.ndarray, obs: np.ndarray) -> np.ndarray:
    out, _ = net.forward(params, obs)
    return out[:, 0]


def compute_vtrace(
    episodes: list[EpisodeData],
    critics: CriticPair,
    target_probs: list[np.ndarray],
    rho_bar: float,
) -> VTraceBatch:
    """Assemble targets and advantages for a batch of episodes.

    ``target_probs`` holds, per episode, the target policy's probability of
    each sampled action. The constraint critic reuses the same truncated
    weights (same sampled actions).
    """
    batch = VTraceBatch(
        episodes=episodes,
        target_probs=target_probs,
        rho=[],
        values=[],
        values_c=[],
        v_targets=[],
        vc_targets=[],
    )
    for ep, tp in zip(episodes, target_probs):
        if np.any(ep.behavior_probs <= 0.0):
            raise NumericError("behavior probability of a sampled action is zero")
        rho = np.minimum(rho_bar, tp / ep.behavior_probs)
        V = _values(critics.net, critics.theta, ep.obs)
        VC = _values(critics.net, critics.phi, ep.obs)
        v_full = np.append(V, 0.0)  # terminal bootstrap
        vc_full = np.append(VC, 0.0)
        batch.rho.append(rho)
        batch.values.append(V)
        batch.values_c.append(VC)
        batch.v_targets.append(vtrace_targets(v_full, ep.rewards, rho))
        batch.vc_targets.append(vtrace_targets(vc_full, ep.constraints, rho))
    batch.adv, batch.adv_c = advantages(batch)
    return batch


def advantages(batch: VTraceBatch) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-step advantages for reward and constraint, terminal target zero."""
    adv, adv_c = [], []
    for ep, v, vc, V, VC in zip(
        batch.episodes, batch.v_targets, batch.vc_targets, batch.values, batch.values_c
    ):
        v_next = np.append(v[1:], 0.0)
        vc_next = np.append(vc[1:], 0.0)
        adv.append(ep.rewards + v_next - V)
        adv_c.append(ep.constraints + vc_next - VC)
    return adv, adv_c


def critic_update(critics: CriticPair, batch: VTraceBatch, nu: float) -> CriticPair:
    """One descent step on each critic's L2 loss to its V-trace targets."""
    obs = np.concatenate([ep.obs for ep in batch.episodes])
    v_tgt = np.concatenate(batch.v_targets)
    vc_tgt = np.concatenate(batch.vc_targets)

    def step(params: np.ndarray, targets: np.ndarray) -> np.ndarray:
        out, acts = critics.net.forward(params, obs)
        resid = out[:, 0] - targets
        grad = critics.net.backward(params, acts, resid[:, None])
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite critic gradient")
        return params - nu * grad

    return CriticPair(
        net=critics.net,
        theta=step(critics.theta, v_tgt),
        phi=step(critics.phi, vc_tgt),
    )


def critic_loss(critics: CriticPair, batch: VTraceBatch) -> tuple[float, float]:
    """Batch L2 losses of both critics against the stored targets."""
    obs = np.concatenate([ep.obs for ep in batch.episodes])
    v_tgt = np.concatenate(batch.v_targets)
    vc_tgt = np.concatenate(batch.vc_targets)
    V = _values(critics.net, critics.theta, obs)
    VC = _values(critics.net, critics.phi, obs)
    return float(np.sum((V - v_tgt) ** 2)), float(np.sum((VC - vc_tgt) ** 2))
