"""Trust-region constrained policy step.

Builds the linearized cost objective and coverage constraint from a batch,
estimates the coverage upper bound, and solves the single-constraint
quadratic trust-region subproblem with the standard Lagrangian case
analysis (inactive / active / infeasible-recovery), followed by a
backtracking line search on the realized KL and coverage surrogate.

Gradient provenance is deliberate: the objective gradient weights
advantages by the batch's clipped importance ratios, while the coverage
gradient recomputes raw ratios from behavior probabilities and never
touches the clipped ones (clipping the constraint gradient would bias it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError, conjugate_gradient
from .vtrace import VTraceBatch

_TINY = 1e-12


@dataclass(frozen=True)
class TrustRegionConfig:
    delta: float = 0.01
    cg_iters: int = 20
    cg_tol: float = 1e-10
    damping: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 10
    coverage_tol: float = 0.01
    recovery_coeff: float = 1.0
    # Raw-parameter safety cap. When every softmask saturates, the curvature
    # operator degenerates to its damping term and the KL ball corresponds to
    # a parameter ball of radius sqrt(2*delta/damping); this cap keeps such
    # flat-region proposals from kicking the network along gradient noise.
    max_step_norm: float = 2.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")


@dataclass
class SurrogateGradients:
    """Linearization of the batch objective and constraint.

    ``g``: gradient of the cost objective (advantage-weighted score-function
    gradient of the soft set-valued policy, clipped-ratio weights).
    ``b``: gradient of the coverage bound estimate (raw ratios).
    ``c_slack``: (1 - alpha) minus the current coverage bound estimate;
    positive means the constraint is violated.
    """

    g: np.ndarray
    b: np.ndarray
    c_slack: float
    jc_estimate: float
    extras: dict = field(default_factory=dict)


def coverage_surrogate(rho_lists, size_lists, correct_bits, solvable_bits, bound_mode: str = "union") -> float:
    """Coverage upper-bound estimate from sampled episodes.

    Per episode the product of (clipped ratio x conformal set size) along the
    sampled path, kept only when the sampled answer was correct; the batch
    mean is combined with the empirical solvable rate. ``union`` adds the
    unsolvable mass (a true union bound); ``difference`` subtracts the
    solvable rate instead, reproducing the looser printed form.
    """
    n = len(correct_bits)
    if n == 0:
        raise ValueError("coverage surrogate needs a non-empty batch")
    if len(rho_lists) != n or len(size_lists) != n or len(solvable_bits) != n:
        raise ValueError("per-episode inputs must have equal lengths")
    terms = []
    for rho, sizes, bit in zip(rho_lists, size_lists, correct_bits):
        prod = float(np.prod(np.asarray(rho, dtype=np.float64) * np.asarray(sizes, dtype=np.float64)))
        terms.append(prod * (1.0 if bit else 0.0))
    jc0 = float(np.mean(terms))
    solvable_rate = float(np.mean([1.0 if s else 0.0 for s in solvable_bits]))
    if bound_mode == "union":
        return jc0 + (1.0 - solvable_rate)
    if bound_mode == "difference":
        return jc0 - solvable_rate
    raise ValueError(f"unknown bound_mode {bound_mode!r}")


def _episode_slices(episodes):
    slices = []
    start = 0
    for ep in episodes:
        L = len(ep.actions)
        slices.append(slice(start, start + L))
        start += L
    return slices


def coverage_surrogate_soft(
    model, theta: np.ndarray, episodes, bound_mode: str = "union", bits=None
) -> float:
    """Differentiable coverage estimate: soft memberships and raw soft ratios.

    ``bits`` defaults to the strict sampled-answer-correct indicator used by
    the product bound; the ``direct`` mode returns the importance-sampled
    mean of the bits alone (used with the pointwise coverage event, which
    already absorbs unsolvable questions).
    """
    if not episodes:
        raise ValueError("coverage surrogate needs a non-empty batch")
    X = np.concatenate([ep.obs for ep in episodes])
    masks = np.concatenate([ep.masks for ep in episodes])
    actions = np.concatenate([ep.actions for ep in episodes])
    mu = np.concatenate([ep.behavior_probs for ep in episodes])
    ctx = model.context(theta, X, masks)
    log_f = model.log_factor(ctx, actions, mu)
    if bits is None:
        bits = [1.0 if ep.answer_correct else 0.0 for ep in episodes]
    terms = []
    for bit, sl in zip(bits, _episode_slices(episodes)):
        terms.append(float(bit) * math.exp(float(log_f[sl].sum())))
    jc0 = float(np.mean(terms))
    if bound_mode == "direct":
        return jc0
    solvable_rate = float(np.mean([1.0 if ep.solvable else 0.0 for ep in episodes]))
    if bound_mode == "union":
        return jc0 + (1.0 - solvable_rate)
    if bound_mode == "difference":
        return jc0 - solvable_rate
    raise ValueError(f"unknown bound_mode {bound_mode!r}")


def surrogate_objective(model, theta: np.ndarray, batch: VTraceBatch) -> float:
    """Frozen-weight surrogate whose exact gradient is the objective gradient g."""
    X = np.concatenate([ep.obs for ep in batch.episodes])
    masks = np.concatenate([ep.masks for ep in batch.episodes])
    actions = np.concatenate([ep.actions for ep in batch.episodes])
    weights = np.concatenate([rho * adv for rho, adv in zip(batch.rho, batch.adv)])
    dists = model.dists(theta, X, masks)
    logp = np.log(dists[np.arange(len(actions)), actions])
    return float((weights * logp).sum() / len(batch.episodes))


def surrogate_gradients(
    batch: VTraceBatch,
    model,
    theta: np.ndarray,
    alpha: float,
    bound_mode: str = "union",
) -> SurrogateGradients:
    """Objective and constraint gradients plus the constraint slack.

    The constraint path recomputes its ratios from behavior probabilities
    (unclipped); only the objective consumes the batch's clipped rho.
    """
    if not batch.episodes:
        raise ValueError("empty batch")
    X = np.concatenate([ep.obs for ep in batch.episodes])
    masks = np.concatenate([ep.masks for ep in batch.episodes])
    actions = np.concatenate([ep.actions for ep in batch.episodes])
    mu = np.concatenate([ep.behavior_probs for ep in batch.episodes])
    n_eps = len(batch.episodes)
    ctx = model.context(theta, X, masks)

    # Objective: batch mean over episodes of sum_t rho_t * A_t * grad log S(a_t|o_t).
    weights = np.concatenate([rho * adv for rho, adv in zip(batch.rho, batch.adv)]) / n_eps
    dp_obj = model.dp_log_action(ctx, actions) * weights[:, None]
    g = model.backward_rows(theta, ctx, dp_obj)

    # Constraint: gradient of the soft coverage bound, raw ratios throughout.
    log_f = model.log_factor(ctx, actions, mu)
    dp_f = model.dp_log_factor(ctx, actions)
    scales = np.zeros(len(actions))
    terms = []
    for ep, sl in zip(batch.episodes, _episode_slices(batch.episodes)):
        bit = 1.0 if ep.answer_correct else 0.0
        term = bit * math.exp(float(log_f[sl].sum()))
        terms.append(term)
        scales[sl] = term / n_eps
    b = model.backward_rows(theta, ctx, dp_f * scales[:, None])

    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite surrogate gradient")

    solvable_rate = float(np.mean([1.0 if ep.solvable else 0.0 for ep in batch.episodes]))
    jc_hard = coverage_surrogate(
        batch.rho,
        [ep.set_sizes for ep in batch.episodes],
        [ep.answer_correct for ep in batch.episodes],
        [ep.solvable for ep in batch.episodes],
        bound_mode,
    )
    return SurrogateGradients(
        g=g,
        b=b,
        c_slack=(1.0 - alpha) - jc_hard,
        jc_estimate=jc_hard,
        extras={
            "jc_soft": float(np.mean(terms)) + ((1.0 - solvable_rate) if bound_mode == "union" else -solvable_rate),
            "solvable_rate": solvable_rate,
            "objective": surrogate_objective(model, theta, batch),
        },
    )


def pointwise_constraint_gradient(batch: VTraceBatch, model, theta: np.ndarray) -> tuple[np.ndarray, float]:
    """Constraint gradient and estimate for single-answer policies.

    The constraint value is the empirical coverage of the sampled answer;
    its gradient is the constraint-advantage-weighted score-function
    gradient (on-policy, ratios are one).
    """
    X = np.concatenate([ep.obs for ep in batch.episodes])
    masks = np.concatenate([ep.masks for ep in batch.episodes])
    actions = np.concatenate([ep.actions for ep in batch.episodes])
    n_eps = len(batch.episodes)
    ctx = model.context(theta, X, masks)
    weights = np.concatenate(batch.adv_c) / n_eps
    dp = model.dp_log_action(ctx, actions) * weights[:, None]
    b = model.backward_rows(theta, ctx, dp)
    coverage = float(np.mean([ep.constraints.sum() for ep in batch.episodes]))
    return b, coverage


@dataclass
class StepInfo:
    case: str
    lam: float
    nu: float
    q: float
    r: float
    s: float
    model_kl: float
    cg_iterations: int


def trust_region_step(grads: SurrogateGradients, fvp, config: TrustRegionConfig) -> tuple[np.ndarray, StepInfo]:
    """Solve min g.x s.t. quadratic KL <= delta and the linearized coverage constraint.

    Cases: (i) the trust region sits inside the feasible half-space, so the
    constraint is inactive and the step is the natural gradient scaled to
    the boundary; (ii) the boundary crosses the region, solved by the
    closed-form dual over the two multipliers; (iii) no intersection, so the
    step maximally improves the coverage bound within the KL ball.
    """
    delta = config.delta
    g = grads.g
    bc = -grads.b  # gradient of the constraint slack
    c = grads.c_slack

    cg_g = conjugate_gradient(fvp, g, config.cg_iters, config.cg_tol)
    Hinv_g = cg_g.x
    q = max(float(g @ Hinv_g), 0.0)
    cg_iters = cg_g.iterations
    boundary = True  # solutions lie on the KL boundary except in the degenerate interior case

    def objective_step():
        if q < _TINY:
            return np.zeros_like(g)
        return -math.sqrt(2.0 * delta / q) * Hinv_g

    if float(np.linalg.norm(bc)) < _TINY:
        step, case, lam, nu, r, s = objective_step(), "inactive", 0.0, 0.0, 0.0, 0.0
    else:
        cg_b = conjugate_gradient(fvp, bc, config.cg_iters, config.cg_tol)
        Hinv_b = cg_b.x
        cg_iters += cg_b.iterations
        r = float(g @ Hinv_b)
        s = max(float(bc @ Hinv_b), 0.0)
        if s < _TINY:
            step, case, lam, nu = objective_step(), "inactive", 0.0, 0.0
        elif c > 0 and c * c / s >= 2 * delta:
            # No intersection between the KL ball and the feasible half-space.
            step = -config.recovery_coeff * math.sqrt(2.0 * delta / s) * Hinv_b
            case, lam, nu = "recovery", 0.0, 0.0
        elif c < 0 and c * c / s >= 2 * delta:
            step, case, lam, nu = objective_step(), "inactive", 0.0, 0.0
        else:
            A = max(q - r * r / s, 0.0)
            B = 2.0 * delta - c * c / s  # > 0 in this branch

            def proj(x, lo, hi):
                return min(max(x, lo), hi)

            # The multiplier nu is positive exactly where lam * c > r.
            if c > 0:
                lo_a, hi_a = max(r / c, 0.0), math.inf
                lo_b, hi_b = 0.0, max(r / c, 0.0)
            elif c < 0:
                lo_a, hi_a = 0.0, r / c if r < 0 else -1.0  # empty when r >= 0
                lo_b, hi_b = max(r / c, 0.0), math.inf
            else:
                lo_a, hi_a = (0.0, math.inf) if r < 0 else (0.0, -1.0)
                lo_b, hi_b = 0.0, math.inf

            def dual_a(lam):
                if lam < _TINY:
                    return -rc_over_s if A < _TINY else -math.inf
                return -A / (2 * lam) - lam * B / 2 - rc_over_s

            def dual_b(lam):
                if lam < _TINY:
                    return 0.0 if q < _TINY else -math.inf
                return -q / (2 * lam) - lam * delta

            rc_over_s = r * c / s
            candidates = []
            if hi_a >= lo_a:
                lam_a = proj(math.sqrt(A / B), lo_a, hi_a)
                candidates.append(("active", lam_a, dual_a(lam_a)))
            if hi_b >= lo_b:
                lam_b = proj(math.sqrt(q / (2 * delta)), lo_b, hi_b)
                candidates.append(("inactive", lam_b, dual_b(lam_b)))
            # Ties resolve toward the constraint-satisfying branch.
            candidates.sort(key=lambda t: (t[2], t[0] == "active"))
            case, lam, _ = candidates[-1]
            nu = max(0.0, (lam * c - r) / s) if case == "active" else 0.0
            if lam < _TINY:
                if case == "active" and c > 0:
                    # Objective flat here: interior point zeroing the linearized violation.
                    step = -(c / s) * Hinv_b
                    boundary = False
                else:
                    step = objective_step()
                    case = "inactive"
            else:
                step = -(Hinv_g + nu * Hinv_b) / lam
                # The dual solution sits on the boundary in exact arithmetic;
                # only shrink it, never inflate past the linearized constraint.
                boundary = False

    # Enforce the quadratic KL model <= delta exactly (and correct residual CG
    # error onto the boundary for the boundary cases).
    model_kl = 0.5 * float(step @ fvp(step))
    if model_kl > _TINY and (model_kl > delta or boundary):
        step = step * math.sqrt(delta / model_kl)
        model_kl = delta
    norm = float(np.linalg.norm(step))
    if norm > config.max_step_norm:
        scale = config.max_step_norm / norm
        step = step * scale
        model_kl *= scale * scale
    if not np.all(np.isfinite(step)):
        raise NumericError("non-finite trust-region step")
    return step, StepInfo(case=case, lam=lam, nu=nu, q=q, r=r, s=s, model_kl=model_kl, cg_iterations=cg_iters)


@dataclass
class LineSearchInfo:
    accepted: bool
    backtracks: int
    realized_kl: float
    coverage_before: float
    coverage_after: float


def line_search(
    theta_old: np.ndarray,
    step: np.ndarray,
    kl_fn,
    coverage_fn,
    config: TrustRegionConfig,
    coverage_floor: float | None = None,
):
    """Backtrack until the realized KL fits the radius and the coverage
    surrogate has not worsened beyond tolerance; falls back to the old
    parameters when every backtrack fails.

    Worsening is judged against the binding requirement when a
    ``coverage_floor`` is given: while the surrogate sits above the floor it
    may spend that slack, but it may never drop below
    ``min(floor, previous value) - coverage_tol``. Without a floor the check
    is pure monotonicity.
    """
    coverage_old = coverage_fn(theta_old)
    reference = coverage_old if coverage_floor is None else min(coverage_floor, coverage_old)
    frac = 1.0
    for i in range(config.max_backtracks + 1):
        theta_new = theta_old + frac * step
        kl = kl_fn(theta_new)
        coverage_new = coverage_fn(theta_new)
        if kl <= config.delta and coverage_new >= reference - config.coverage_tol:
            return theta_new, LineSearchInfo(
                accepted=True,
                backtracks=i,
                realized_kl=kl,
                coverage_before=coverage_old,
                coverage_after=coverage_new,
            )
        frac *= config.backtrack_factor
    return theta_old, LineSearchInfo(
        accepted=False,
        backtracks=config.max_backtracks + 1,
        realized_kl=0.0,
        coverage_before=coverage_old,
        coverage_after=coverage_old,
    )
