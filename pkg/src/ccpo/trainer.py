"""Training loop, baselines, and the evaluation harness.

One iteration: sample a batch of traces, roll out under the score
distribution, finalize coverage constraints by branch enumeration, fit
both critics, take a constrained trust-region policy step, then apply the
per-episode online threshold updates under the new policy. After the loop
a batch calibration on held-out traces pins the final threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .calibrator import CalibrationReport, CalibratorState, batch_calibrate, online_update, step_size
from .env import (
    Action,
    EnvConfig,
    OBS_DIM,
    answer_universe,
    chain_observations,
    coverage_indicator,
    initial_state,
    observe,
    round_costs,
    step,
)
from .numerics import MLP, FisherOperator, NumericError
from .optimizer import (
    SurrogateGradients,
    TrustRegionConfig,
    coverage_surrogate_soft,
    line_search,
    pointwise_constraint_gradient,
    surrogate_gradients,
    trust_region_step,
)
from .policy import (
    ConformalPolicy,
    ScoreModel,
    SoftConformalModel,
    conformal_set,
    prediction_at,
    sample_action,
    score_batch,
    trace_profile,
)
from .traces import PriceTable, SyntheticConfig, Trace, generate_synthetic
from .vtrace import CriticPair, EpisodeData, compute_vtrace, critic_update

BASELINE_KINDS = ("random", "fixed-threshold", "cpo", "cpo-batch", "cpo-online")


class TrainingError(RuntimeError):
    """Numeric failure during training; partial iteration logs are preserved."""

    def __init__(self, message: str, logs: list[dict]):
        super().__init__(message)
        self.logs = logs


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.1
    lam: float = 0.0
    horizon: int = 4
    delta: float = 0.01
    epsilon: float = 0.01
    xi: float = 0.1
    eta0: float = 0.05
    rho_bar: float = 1.0
    critic_lr: float = 1e-3
    hidden: tuple[int, ...] = (64, 64, 64)
    batch_size: int = 10
    iterations: int = 1500
    seed: int = 0
    kappa0: float = 0.2
    token_scale: float = 1000.0
    calibrator_mode: str = "set_enlarging"
    bound_mode: str = "union"
    eval_cost_mode: str = "all_branches"
    calibration_granularity: float = 1e-6
    cg_iters: int = 20
    cg_damping: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 10
    coverage_tol: float = 0.01
    recovery_coeff: float = 1.0
    max_step_norm: float = 2.0
    baseline: str = "ccpo"
    fixed_threshold_low: float | None = None
    fixed_threshold_high: float | None = None
    prices: PriceTable = field(default_factory=PriceTable)

    def env(self) -> EnvConfig:
        return EnvConfig(horizon=self.horizon, token_scale=self.token_scale)

    def trust_region(self) -> TrustRegionConfig:
        return TrustRegionConfig(
            delta=self.delta,
            cg_iters=self.cg_iters,
            damping=self.cg_damping,
            backtrack_factor=self.backtrack_factor,
            max_backtracks=self.max_backtracks,
            coverage_tol=self.coverage_tol,
            recovery_coeff=self.recovery_coeff,
            max_step_norm=self.max_step_norm,
        )


@dataclass(frozen=True)
class MetricsRecord:
    total_cost_cents: float
    coverage: float
    avg_length: float
    avg_set_size: float
    n_episodes: int


@dataclass
class TrainerState:
    iteration: int
    theta: np.ndarray
    critic_theta: np.ndarray
    critic_phi: np.ndarray
    calibrator: CalibratorState
    rng_state: dict


@dataclass
class RunResult:
    policy: ConformalPolicy
    logs: list[dict]
    state: TrainerState
    calibration: CalibrationReport | None


def state_to_dict(state: TrainerState) -> dict:
    return {
        "iteration": state.iteration,
        "theta": state.theta.tolist(),
        "critic_theta": state.critic_theta.tolist(),
        "critic_phi": state.critic_phi.tolist(),
        "calibrator": {
            "kappa": state.calibrator.kappa,
            "alpha": state.calibrator.alpha,
            "eta0": state.calibrator.eta0,
            "xi": state.calibrator.xi,
            "k": state.calibrator.k,
            "mode": state.calibrator.mode,
        },
        "rng_state": json.loads(json.dumps(state.rng_state)),
    }


def state_from_dict(obj: dict) -> TrainerState:
    cal = obj["calibrator"]
    return TrainerState(
        iteration=int(obj["iteration"]),
        theta=np.asarray(obj["theta"], dtype=np.float64),
        critic_theta=np.asarray(obj["critic_theta"], dtype=np.float64),
        critic_phi=np.asarray(obj["critic_phi"], dtype=np.float64),
        calibrator=CalibratorState(
            kappa=float(cal["kappa"]),
            alpha=float(cal["alpha"]),
            eta0=float(cal["eta0"]),
            xi=float(cal["xi"]),
            k=int(cal["k"]),
            mode=cal["mode"],
        ),
        rng_state=obj["rng_state"],
    )


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


def _rollout(
    trace: Trace,
    net: MLP,
    theta: np.ndarray,
    env_cfg: EnvConfig,
    prices: PriceTable,
    lam: float,
    rng: np.random.Generator,
    kappa: float | None,
) -> EpisodeData:
    """Sample one episode from the score distribution.

    With a threshold, the constraint bit and the set penalty come from the
    conformal prediction set (branch enumeration on the same trace); without
    one, the episode is pointwise and the bit is the sampled answer's own
    coverage event.
    """
    X, masks = chain_observations(trace, env_cfg)
    dists = score_batch(net, theta, X, masks)
    costs = round_costs(trace, prices)
    universe = answer_universe(trace)

    if kappa is not None:
        pred, _, _ = prediction_at(dists, trace, kappa)
        penalty_size = len(pred)
        sets = [conformal_set(dists[t], kappa) for t in range(env_cfg.horizon)]
    else:
        penalty_size = 1
        sets = None

    t = 1
    rows, acts, mus, rewards = [], [], [], []
    answer = None
    while True:
        dist = dists[t - 1]
        a = sample_action(dist, rng)
        rows.append(t - 1)
        acts.append(int(a))
        mus.append(float(dist[a]))
        r = float(costs[t - 1])
        if a == Action.NEXT_ROUND:
            rewards.append(r)
            t += 1
            continue
        rec = trace.rounds[t - 1]
        answer = rec.guide_answer if a == Action.GUIDE_ANSWER else rec.base_answer
        rewards.append(r + lam * penalty_size)
        break

    L = len(acts)
    constraints = np.zeros(L)
    if kappa is not None:
        constraints[-1] = coverage_indicator(pred, universe, trace.true_answer)
        set_sizes = np.array([float(len(sets[i])) for i in rows])
    else:
        constraints[-1] = float(answer == trace.true_answer or trace.true_answer not in universe)
        set_sizes = np.ones(L)

    return EpisodeData(
        obs=X[rows],
        masks=masks[rows],
        actions=np.array(acts, dtype=int),
        behavior_probs=np.array(mus),
        rewards=np.array(rewards),
        constraints=constraints,
        set_sizes=set_sizes,
        answer_correct=bool(answer == trace.true_answer),
        solvable=bool(trace.true_answer in universe),
        final_answer=int(answer),
        question_id=trace.question_id,
    )


def _target_probs_soft(model: SoftConformalModel, theta, episodes):
    out = []
    for ep in episodes:
        S = model.dists(theta, ep.obs, ep.masks)
        out.append(S[np.arange(len(ep.actions)), ep.actions])
    return out


def _fisher(model, theta, episodes, damping):
    X = np.concatenate([ep.obs for ep in episodes])
    masks = np.concatenate([ep.masks for ep in episodes])
    ctx = model.context(theta, X, masks)
    G = model.per_action_logprob_grads(theta, ctx)
    dists = ctx.S if ctx.S is not None else ctx.probs
    n = X.shape[0]
    weights = (dists / n).reshape(-1)
    return FisherOperator(G.reshape(-1, G.shape[-1]), weights, damping), X, masks, dists


def _log_record(it, episodes, grads, sinfo, ls, step_norm, kappa, eta):
    mean_cost = float(np.mean([ep.rewards.sum() for ep in episodes]))
    mean_cov = float(np.mean([ep.constraints.sum() for ep in episodes]))
    mean_len = float(np.mean([len(ep.actions) for ep in episodes]))
    return {
        "iteration": it,
        "mean_cost": mean_cost,
        "coverage": mean_cov,
        "mean_length": mean_len,
        "objective": grads.extras.get("objective", 0.0),
        "jc": grads.jc_estimate,
        "slack": grads.c_slack,
        "kl": ls.realized_kl,
        "step_norm": step_norm,
        "case": sinfo.case,
        "backtracks": ls.backtracks,
        "accepted": ls.accepted,
        "kappa": kappa,
        "eta": eta,
    }


def _init_or_resume(config: RunConfig, resume_state: TrainerState | None):
    pol_net = MLP(OBS_DIM, config.hidden, 3)
    val_net = MLP(OBS_DIM, config.hidden, 1)
    rng = np.random.default_rng(config.seed)
    if resume_state is None:
        theta = pol_net.init_params(rng)
        critics = CriticPair(val_net, val_net.init_params(rng), val_net.init_params(rng))
        calib = CalibratorState(
            kappa=config.kappa0,
            alpha=config.alpha,
            eta0=config.eta0,
            xi=config.xi,
            mode=config.calibrator_mode,
        )
        start = 0
    else:
        theta = resume_state.theta.copy()
        critics = CriticPair(val_net, resume_state.critic_theta.copy(), resume_state.critic_phi.copy())
        calib = resume_state.calibrator
        rng.bit_generator.state = resume_state.rng_state
        start = resume_state.iteration
    return pol_net, val_net, rng, theta, critics, calib, start


def run_ccpo(
    config: RunConfig,
    train_traces: list[Trace],
    cal_traces: list[Trace],
    resume_state: TrainerState | None = None,
) -> RunResult:
    """Full training run; returns the batch-calibrated policy and logs."""
    env_cfg = config.env()
    trc = config.trust_region()
    pol_net, _, rng, theta, critics, calib, start = _init_or_resume(config, resume_state)
    logs: list[dict] = []

    for it in range(start, config.iterations):
        try:
            idx = rng.integers(0, len(train_traces), size=config.batch_size)
            batch_traces = [train_traces[int(i)] for i in idx]
            model = SoftConformalModel(pol_net, calib.kappa, config.epsilon)
            episodes = [
                _rollout(tr, pol_net, theta, env_cfg, config.prices, config.lam, rng, calib.kappa)
                for tr in batch_traces
            ]
            target_probs = _target_probs_soft(model, theta, episodes)
            batch = compute_vtrace(episodes, critics, target_probs, config.rho_bar)
            critics = critic_update(critics, batch, config.critic_lr)
            batch = compute_vtrace(episodes, critics, target_probs, config.rho_bar)

            grads = surrogate_gradients(batch, model, theta, config.alpha, config.bound_mode)
            fvp, X, masks, old_dists = _fisher(model, theta, episodes, trc.damping)
            tr_step, sinfo = trust_region_step(grads, fvp, trc)
            kl_fn = lambda th: model.mean_kl(th, X, masks, old_dists)
            cov_fn = lambda th: coverage_surrogate_soft(model, th, episodes, config.bound_mode)
            new_theta, ls = line_search(
                theta, tr_step, kl_fn, cov_fn, trc, coverage_floor=1.0 - config.alpha
            )
            step_norm = float(np.linalg.norm(new_theta - theta))
            theta = new_theta

            eta = step_size(calib.k, calib.eta0, calib.xi)
            for tr in batch_traces:
                dists = trace_profile(pol_net, theta, tr, env_cfg)
                pred, _, _ = prediction_at(dists, tr, calib.kappa)
                covered = coverage_indicator(pred, answer_universe(tr), tr.true_answer)
                calib = online_update(calib, covered)

            logs.append(_log_record(it, episodes, grads, sinfo, ls, step_norm, calib.kappa, eta))
        except NumericError as exc:
            raise TrainingError(f"iteration {it}: {exc}", logs) from exc

    kappa_star, report = batch_calibrate(
        pol_net, theta, cal_traces, config.alpha, config.calibration_granularity, env_cfg
    )
    policy = ConformalPolicy(net=pol_net, theta=theta, kappa=kappa_star, epsilon=config.epsilon)
    state = TrainerState(
        iteration=config.iterations,
        theta=theta,
        critic_theta=critics.theta,
        critic_phi=critics.phi,
        calibrator=calib,
        rng_state=rng.bit_generator.state,
    )
    return RunResult(policy=policy, logs=logs, state=state, calibration=report)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomRule:
    """Uniform over the legal actions."""

    def act(self, obs, rng: np.random.Generator) -> Action:
        mask = obs.legal_mask()
        legal = np.flatnonzero(mask > 0)
        return Action(int(legal[rng.integers(0, len(legal))]))


@dataclass(frozen=True)
class FixedThresholdRule:
    """Two uncertainty cutoffs pick the action; forced to answer at the horizon."""

    low: float
    high: float

    def act(self, obs, rng: np.random.Generator) -> Action:
        u = obs.guide_uncertainty
        if u < self.low:
            return Action.BASE_ANSWER
        if u <= self.high:
            return Action.GUIDE_ANSWER
        if obs.round_index_normalized >= 1.0:
            return Action.GUIDE_ANSWER
        return Action.NEXT_ROUND


@dataclass(frozen=True)
class ArgmaxRule:
    """Deterministic single-answer rule from a trained score network."""

    net: MLP
    theta: np.ndarray

    def act(self, obs, rng: np.random.Generator) -> Action:
        dist = score_batch(self.net, self.theta, obs.vector()[None, :], obs.legal_mask()[None, :])[0]
        return Action(int(np.argmax(dist)))


def _run_cpo_core(config: RunConfig, train_traces: list[Trace]) -> tuple[MLP, np.ndarray, list[dict]]:
    """Vanilla constrained policy optimization on the score distribution.

    Pointwise: no thresholds or prediction sets anywhere; the coverage
    constraint is the empirical coverage of the sampled answer, and its
    gradient is the constraint-advantage-weighted score-function gradient.
    On-policy, so the truncated ratios are identically one.
    """
    env_cfg = config.env()
    trc = config.trust_region()
    pol_net, _, rng, theta, critics, calib, start = _init_or_resume(config, None)
    model = ScoreModel(pol_net)
    logs: list[dict] = []
    for it in range(config.iterations):
        try:
            idx = rng.integers(0, len(train_traces), size=config.batch_size)
            batch_traces = [train_traces[int(i)] for i in idx]
            episodes = [
                _rollout(tr, pol_net, theta, env_cfg, config.prices, config.lam, rng, None)
                for tr in batch_traces
            ]
            target_probs = [ep.behavior_probs.copy() for ep in episodes]
            batch = compute_vtrace(episodes, critics, target_probs, config.rho_bar)
            critics = critic_update(critics, batch, config.critic_lr)
            batch = compute_vtrace(episodes, critics, target_probs, config.rho_bar)

            grads = surrogate_gradients(batch, model, theta, config.alpha, "union")
            b_pw, cov = pointwise_constraint_gradient(batch, model, theta)
            grads = SurrogateGradients(
                g=grads.g,
                b=b_pw,
                c_slack=(1.0 - config.alpha) - cov,
                jc_estimate=cov,
                extras=grads.extras,
            )
            fvp, X, masks, old_dists = _fisher(model, theta, episodes, trc.damping)
            tr_step, sinfo = trust_region_step(grads, fvp, trc)
            bits = [float(ep.constraints.sum()) for ep in episodes]
            kl_fn = lambda th: model.mean_kl(th, X, masks, old_dists)
            cov_fn = lambda th: coverage_surrogate_soft(model, th, episodes, "direct", bits=bits)
            new_theta, ls = line_search(
                theta, tr_step, kl_fn, cov_fn, trc, coverage_floor=1.0 - config.alpha
            )
            step_norm = float(np.linalg.norm(new_theta - theta))
            theta = new_theta
            logs.append(_log_record(it, episodes, grads, sinfo, ls, step_norm, 0.0, 0.0))
        except NumericError as exc:
            raise TrainingError(f"iteration {it}: {exc}", logs) from exc
    return pol_net, theta, logs


def _fit_fixed_thresholds(config: RunConfig, cal_traces: list[Trace]) -> FixedThresholdRule:
    """Grid search the two cutoffs to hit the target coverage at minimum cost."""
    env_cfg = config.env()
    grid = np.round(np.linspace(0.0, 1.0, 21), 3)
    best_rule, best_key = None, None
    for low in grid:
        for high in grid[grid >= low]:
            rule = FixedThresholdRule(float(low), float(high))
            m = evaluate(rule, cal_traces, config.prices, env_cfg, seed=config.seed)
            feasible = m.coverage >= 1.0 - config.alpha
            # Feasible rules compete on cost; infeasible ones on coverage.
            key = (1, -m.total_cost_cents) if feasible else (0, m.coverage)
            if best_key is None or key > best_key:
                best_rule, best_key = rule, key
    return best_rule


def run_baseline(kind: str, config: RunConfig, train_traces: list[Trace], cal_traces: list[Trace]):
    """Train or construct one of the reference methods.

    Returns (decision rule or conformal policy, iteration logs).
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if kind == "random":
        return RandomRule(), []
    if kind == "fixed-threshold":
        if config.fixed_threshold_low is not None and config.fixed_threshold_high is not None:
            return FixedThresholdRule(config.fixed_threshold_low, config.fixed_threshold_high), []
        return _fit_fixed_thresholds(config, cal_traces), []
    net, theta, logs = _run_cpo_core(config, train_traces)
    if kind == "cpo":
        return ArgmaxRule(net, theta), logs
    if kind == "cpo-batch":
        kappa_star, report = batch_calibrate(
            net, theta, cal_traces, config.alpha, config.calibration_granularity, config.env()
        )
        logs.append({"calibration_kappa": report.kappa, "calibration_coverage": report.empirical_coverage})
        return ConformalPolicy(net=net, theta=theta, kappa=kappa_star, epsilon=config.epsilon), logs
    # cpo-online: stream the training traces through the online update with
    # the trained policy held fixed.
    calib = CalibratorState(
        kappa=config.kappa0,
        alpha=config.alpha,
        eta0=config.eta0,
        xi=config.xi,
        mode=config.calibrator_mode,
    )
    env_cfg = config.env()
    stream_rng = np.random.default_rng(config.seed)
    for _ in range(config.iterations):
        idx = stream_rng.integers(0, len(train_traces), size=config.batch_size)
        for i in idx:
            tr = train_traces[int(i)]
            dists = trace_profile(net, theta, tr, env_cfg)
            pred, _, _ = prediction_at(dists, tr, calib.kappa)
            covered = coverage_indicator(pred, answer_universe(tr), tr.true_answer)
            calib = online_update(calib, covered)
    logs.append({"online_kappa": calib.kappa, "online_episodes": calib.k - 1})
    return ConformalPolicy(net=net, theta=theta, kappa=calib.kappa, epsilon=config.epsilon), logs


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    target,
    traces: list[Trace],
    prices: PriceTable,
    env_cfg: EnvConfig,
    cost_mode: str = "all_branches",
    seed: int = 0,
) -> MetricsRecord:
    """Metrics over a test split.

    Conformal policies are evaluated by full branch enumeration: cost charges
    every executed branch (the realized spend of producing the prediction
    set) unless ``cost_mode`` is ``sampled_path``; the length is the maximum
    branch depth; set size is the prediction set's. Pointwise rules follow a
    single path and emit singleton sets.
    """
    if cost_mode not in ("all_branches", "sampled_path"):
        raise ValueError(f"unknown cost_mode {cost_mode!r}")
    rng = np.random.default_rng(seed)
    total_cost = 0.0
    covered_sum = 0.0
    length_sum = 0.0
    size_sum = 0.0
    for trace in traces:
        universe = answer_universe(trace)
        costs = round_costs(trace, prices)
        if isinstance(target, ConformalPolicy):
            dists = trace_profile(target.net, target.theta, trace, env_cfg)
            pred, depth, _ = prediction_at(dists, trace, target.kappa)
            covered_sum += coverage_indicator(pred, universe, trace.true_answer)
            length_sum += depth
            size_sum += len(pred)
            if cost_mode == "all_branches":
                total_cost += float(costs[:depth].sum())
            else:
                t = 1
                while True:
                    a = sample_action(dists[t - 1], rng)
                    total_cost += float(costs[t - 1])
                    if a != Action.NEXT_ROUND:
                        break
                    t += 1
        else:
            state = initial_state(trace)
            done = False
            while not done:
                obs = observe(state, env_cfg)
                a = target.act(obs, rng)
                state, r, _, done = step(state, a, prices, 0.0, 0, env_cfg)
                total_cost += r
            covered_sum += coverage_indicator(
                frozenset([state.chosen_answer]), universe, trace.true_answer
            )
            length_sum += state.t
            size_sum += 1.0
    n = len(traces)
    return MetricsRecord(
        total_cost_cents=total_cost,
        coverage=covered_sum / n,
        avg_length=length_sum / n,
        avg_set_size=size_sum / n,
        n_episodes=n,
    )


def logs_to_ndjson(logs: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in logs)


def make_traces(config: RunConfig, synthetic: SyntheticConfig | None, path: str | None) -> list[Trace]:
    if synthetic is not None:
        return generate_synthetic(synthetic)
    if path is not None:
        from .traces import load_traces

        return load_traces(path)
    raise ValueError("either a synthetic config or a trace path is required")
