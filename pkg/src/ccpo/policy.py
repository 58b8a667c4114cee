"""Score network, threshold action sets, stochastic surrogates, and sampling.

The score network produces a categorical distribution over the three
actions. The conformal set keeps every action whose probability clears the
threshold kappa; its stochastic counterpart is uniform over that set. Hard
sets drive environment interaction and evaluation; a sigmoid-relaxed
("softmask") surrogate is used wherever gradients through set membership
are required.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .env import Action, EnvConfig, N_ACTIONS, chain_observations
from .numerics import (
    MLP,
    HeadCache,
    masked_softmax_floor,
    masked_softmax_floor_vjp,
    mean_kl_rows,
    sigmoid,
)
from .traces import Trace


@dataclass(frozen=True)
class ConformalPolicy:
    """Score network parameters plus the threshold and softmask temperature."""

    net: MLP
    theta: np.ndarray
    kappa: float
    epsilon: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.kappa <= 1.0):
            raise ValueError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def score_batch(net: MLP, theta: np.ndarray, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Score distributions for a batch of observations (floored, masked)."""
    logits, _ = net.forward(theta, X)
    probs, _ = masked_softmax_floor(logits, masks)
    return probs


def score(policy: ConformalPolicy, obs) -> np.ndarray:
    """Score distribution for a single observation."""
    return score_batch(policy.net, policy.theta, obs.vector()[None, :], obs.legal_mask()[None, :])[0]


def conformal_set(dist: np.ndarray, kappa: float) -> frozenset[Action]:
    """Actions whose probability clears the threshold; never empty.

    If no action clears kappa the set falls back to the argmax, which keeps
    the stochastic surrogate well-defined and preserves the greedy action.
    """
    dist = np.asarray(dist, dtype=np.float64)
    members = [Action(a) for a in range(N_ACTIONS) if dist[a] >= kappa and dist[a] > 0.0]
    if not members:
        members = [Action(int(np.argmax(dist)))]
    return frozenset(members)


def stochastic_conformal(dist: np.ndarray, kappa: float) -> np.ndarray:
    """Uniform distribution over the conformal set; zero elsewhere."""
    members = conformal_set(dist, kappa)
    out = np.zeros(N_ACTIONS)
    for a in members:
        out[a] = 1.0 / len(members)
    return out


def softmask(dist: np.ndarray, kappa: float, epsilon: float) -> np.ndarray:
    """Sigmoid relaxation of threshold membership, one weight per action."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    return sigmoid((np.asarray(dist, dtype=np.float64) - kappa) / epsilon)


def soft_stochastic_conformal(dist: np.ndarray, kappa: float, epsilon: float) -> np.ndarray:
    """Softmask weights restricted to the support and normalized to sum to 1."""
    dist = np.asarray(dist, dtype=np.float64)
    w = softmask(dist, kappa, epsilon)
    wm = np.where(dist > 0.0, w, 0.0)
    return wm / wm.sum()


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> Action:
    """Draw an action by inverse CDF; zero-mass actions are never sampled."""
    u = rng.random()
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return Action(min(idx, N_ACTIONS - 1))


def conformal_set_fn(policy: ConformalPolicy):
    """Observation -> conformal action set, for branch enumeration."""

    def fn(obs):
        return conformal_set(score(policy, obs), policy.kappa)

    return fn


# ---------------------------------------------------------------------------
# Fast path: per-trace decision profile
# ---------------------------------------------------------------------------


def trace_profile(net: MLP, theta: np.ndarray, trace: Trace, cfg: EnvConfig) -> np.ndarray:
    """Score distributions at every round of the (unique) continuation chain."""
    X, masks = chain_observations(trace, cfg)
    return score_batch(net, theta, X, masks)


def sets_from_profile(dists: np.ndarray, kappa: float) -> list[frozenset[Action]]:
    return [conformal_set(dists[t], kappa) for t in range(dists.shape[0])]


def prediction_at(dists: np.ndarray, trace: Trace, kappa: float):
    """Prediction set, stop depth, and per-round conformal sets at a threshold.

    Equivalent to enumerate_branches + prediction_set but reuses the
    precomputed chain distributions, which makes threshold scans cheap.
    """
    pred: set[int] = set()
    sets: list[frozenset[Action]] = []
    depth = dists.shape[0]
    for t in range(1, dists.shape[0] + 1):
        members = conformal_set(dists[t - 1], kappa)
        sets.append(members)
        rec = trace.rounds[t - 1]
        if Action.GUIDE_ANSWER in members:
            pred.add(rec.guide_answer)
        if Action.BASE_ANSWER in members:
            pred.add(rec.base_answer)
        if Action.NEXT_ROUND not in members:
            depth = t
            break
    return frozenset(pred), depth, sets


# ---------------------------------------------------------------------------
# Distribution models consumed by the trust-region optimizer
# ---------------------------------------------------------------------------


@dataclass
class GradContext:
    X: np.ndarray
    masks: np.ndarray
    acts: list
    head: HeadCache
    probs: np.ndarray  # floored score distribution
    w: np.ndarray | None = None  # softmask weights (soft model only)
    support: np.ndarray | None = None
    Z: np.ndarray | None = None  # soft set sizes
    S: np.ndarray | None = None  # soft stochastic conformal distribution


class SoftConformalModel:
    """Gradient machinery for the softmask-relaxed stochastic conformal policy."""

    def __init__(self, net: MLP, kappa: float, epsilon: float):
        self.net = net
        self.kappa = kappa
        self.epsilon = epsilon

    def context(self, theta: np.ndarray, X: np.ndarray, masks: np.ndarray) -> GradContext:
        logits, acts = self.net.forward(theta, X)
        probs, head = masked_softmax_floor(logits, masks)
        w = sigmoid((probs - self.kappa) / self.epsilon)
        support = probs > 0.0
        wm = np.where(support, w, 0.0)
        Z = wm.sum(axis=1)
        S = wm / Z[:, None]
        return GradContext(X=X, masks=masks, acts=acts, head=head, probs=probs, w=w, support=support, Z=Z, S=S)

    def dists(self, theta, X, masks) -> np.ndarray:
        return self.context(theta, X, masks).S

    def _dlogS_dp(self, ctx: GradContext) -> np.ndarray:
        """J[n, a, c] = d log S(a|o_n) / d p_c; rows for zero-support actions are 0."""
        w, Z, support = ctx.w, ctx.Z, ctx.support
        sig_grad = w * (1.0 - w) / self.epsilon  # d w_c / d p_c
        common = np.where(support, sig_grad, 0.0) / Z[:, None]  # d log Z / d p_c
        N = w.shape[0]
        J = np.zeros((N, N_ACTIONS, N_ACTIONS))
        for a in range(N_ACTIONS):
            J[:, a, :] = -common
            J[:, a, a] += (1.0 - w[:, a]) / self.epsilon
            J[:, a, :] *= support[:, a][:, None]
        return J

    def dp_log_action(self, ctx: GradContext, actions: np.ndarray) -> np.ndarray:
        """d log S(a_n|o_n) / d p rows for the sampled actions."""
        J = self._dlogS_dp(ctx)
        return J[np.arange(len(actions)), actions]

    def dp_log_factor(self, ctx: GradContext, actions: np.ndarray) -> np.ndarray:
        """d log w(a_n) / d p rows; w(a)/mu is the per-step coverage factor S(a)/mu * Z."""
        n = np.arange(len(actions))
        rows = np.zeros((len(actions), N_ACTIONS))
        wa = ctx.w[n, actions]
        rows[n, actions] = (1.0 - wa) / self.epsilon
        return rows

    def log_factor(self, ctx: GradContext, actions: np.ndarray, mu: np.ndarray) -> np.ndarray:
        """log(w(a_n) / mu_n): per-step factor of the coverage product (unclipped)."""
        n = np.arange(len(actions))
        return np.log(ctx.w[n, actions]) - np.log(mu)

    def backward_rows(self, theta: np.ndarray, ctx: GradContext, dp_rows: np.ndarray) -> np.ndarray:
        dz = masked_softmax_floor_vjp(ctx.head, dp_rows)
        return self.net.backward(theta, ctx.acts, dz)

    def per_action_logprob_grads(self, theta: np.ndarray, ctx: GradContext) -> np.ndarray:
        """G[n, a, :] = d log S(a|o_n)/d theta. Shape (N, 3, P)."""
        J = self._dlogS_dp(ctx)
        N = ctx.X.shape[0]
        G = np.zeros((N, N_ACTIONS, self.net.n_params))
        for a in range(N_ACTIONS):
            dz = masked_softmax_floor_vjp(ctx.head, J[:, a, :])
            G[:, a, :] = self.net.backward_per_sample(theta, ctx.acts, dz)
        return G

    def mean_kl(self, theta_new: np.ndarray, X: np.ndarray, masks: np.ndarray, old_dists: np.ndarray) -> float:
        """Batch-mean KL(new || old) between soft stochastic conformal distributions."""
        return mean_kl_rows(self.dists(theta_new, X, masks), old_dists)


class ScoreModel:
    """Same interface over the raw score distribution (pointwise policies)."""

    def __init__(self, net: MLP):
        self.net = net

    def context(self, theta: np.ndarray, X: np.ndarray, masks: np.ndarray) -> GradContext:
        logits, acts = self.net.forward(theta, X)
        probs, head = masked_softmax_floor(logits, masks)
        return GradContext(X=X, masks=masks, acts=acts, head=head, probs=probs)

    def dists(self, theta, X, masks) -> np.ndarray:
        return self.context(theta, X, masks).probs

    def dp_log_action(self, ctx: GradContext, actions: np.ndarray) -> np.ndarray:
        n = np.arange(len(actions))
        rows = np.zeros((len(actions), N_ACTIONS))
        rows[n, actions] = 1.0 / ctx.probs[n, actions]
        return rows

    def dp_log_factor(self, ctx: GradContext, actions: np.ndarray) -> np.ndarray:
        return self.dp_log_action(ctx, actions)

    def log_factor(self, ctx: GradContext, actions: np.ndarray, mu: np.ndarray) -> np.ndarray:
        n = np.arange(len(actions))
        return np.log(ctx.probs[n, actions]) - np.log(mu)

    def backward_rows(self, theta: np.ndarray, ctx: GradContext, dp_rows: np.ndarray) -> np.ndarray:
        dz = masked_softmax_floor_vjp(ctx.head, dp_rows)
        return self.net.backward(theta, ctx.acts, dz)

    def per_action_logprob_grads(self, theta: np.ndarray, ctx: GradContext) -> np.ndarray:
        N = ctx.X.shape[0]
        G = np.zeros((N, N_ACTIONS, self.net.n_params))
        for a in range(N_ACTIONS):
            rows = np.zeros((N, N_ACTIONS))
            live = ctx.probs[:, a] > 0.0
            rows[live, a] = 1.0 / ctx.probs[live, a]
            dz = masked_softmax_floor_vjp(ctx.head, rows)
            G[:, a, :] = self.net.backward_per_sample(theta, ctx.acts, dz)
            G[~live, a, :] = 0.0
        return G

    def mean_kl(self, theta_new: np.ndarray, X: np.ndarray, masks: np.ndarray, old_dists: np.ndarray) -> float:
        return mean_kl_rows(self.dists(theta_new, X, masks), old_dists)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def policy_to_dict(policy: ConformalPolicy) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "shape": list(policy.net.sizes),
        "params": policy.theta.tolist(),
        "kappa": policy.kappa,
        "epsilon": policy.epsilon,
    }


def policy_from_dict(obj: dict) -> ConformalPolicy:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    sizes = obj["shape"]
    net = MLP(sizes[0], tuple(sizes[1:-1]), sizes[-1])
    theta = np.asarray(obj["params"], dtype=np.float64)
    if theta.shape != (net.n_params,):
        raise ValueError("parameter vector does not match the shape descriptor")
    return ConformalPolicy(net=net, theta=theta, kappa=float(obj["kappa"]), epsilon=float(obj["epsilon"]))


def save_policy(path, policy: ConformalPolicy, extras: dict | None = None) -> None:
    obj = policy_to_dict(policy)
    if extras:
        obj.update(extras)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_policy(path) -> tuple[ConformalPolicy, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    policy = policy_from_dict(obj)
    extras = {k: v for k, v in obj.items() if k not in ("version", "shape", "params", "kappa", "epsilon")}
    return policy, extras
