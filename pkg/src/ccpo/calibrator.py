"""Conformal threshold maintenance.

Two mechanisms keep the coverage of the threshold sets at the target rate:
a per-episode online update of kappa with a decayed step size, and a final
finite-sample batch calibration on a held-out split.

The online rule has two directions. In the default ``set_enlarging`` mode a
miss lowers kappa, which enlarges future action sets and raises coverage,
the self-correcting behavior of adaptive online calibration. The
``set_shrinking`` mode applies the update with the opposite sign (a miss
raises kappa); it is retained behind this switch for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import EnvConfig, answer_universe
from .numerics import MLP
from .policy import prediction_at, trace_profile
from .traces import Trace

MODES = ("set_enlarging", "set_shrinking")


@dataclass(frozen=True)
class CalibratorState:
    """Threshold, episode counter, and the update schedule."""

    kappa: float
    alpha: float
    eta0: float = 0.05
    xi: float = 0.1
    k: int = 1
    mode: str = "set_enlarging"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not (0.0 < self.xi < 0.5):
            raise ValueError(f"xi must be in (0, 1/2), got {self.xi}")
        if not (0.0 <= self.kappa <= 1.0):
            raise ValueError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def step_size(k: int, eta0: float, xi: float) -> float:
    """Decayed step eta_k = eta0 * k^(-1/2 - xi).

    The exponent lies in (-1, -1/2), so the steps sum to infinity while
    their squares sum finitely, the condition for long-run coverage
    convergence on a stream.
    """
    if k < 1:
        raise ValueError(f"episode counter must be >= 1, got {k}")
    return eta0 * float(k) ** (-0.5 - xi)


def online_update(state: CalibratorState, covered: int) -> CalibratorState:
    """One per-episode threshold update; kappa stays clamped to [0, 1]."""
    eta = step_size(state.k, state.eta0, state.xi)
    miss = 1.0 - (1.0 if covered else 0.0)
    delta = eta * (miss - state.alpha)
    if state.mode == "set_enlarging":
        kappa = state.kappa - delta
    else:
        kappa = state.kappa + delta
    kappa = float(np.clip(kappa, 0.0, 1.0))
    return replace(state, kappa=kappa, k=state.k + 1)


@dataclass(frozen=True)
class CalibrationReport:
    kappa: float
    grid_points: int
    empirical_coverage: float
    n_calibration: int
    target_count: int


def _covered_at(dists: np.ndarray, trace: Trace, universe, kappa: float) -> bool:
    pred, _, _ = prediction_at(dists, trace, kappa)
    return trace.true_answer in pred or trace.true_answer not in universe


def _critical_grid_index(dists: np.ndarray, trace: Trace, universe, granularity: float, grid_max: int) -> int:
    """Largest grid index i such that the trace is covered at kappa = i * granularity.

    Coverage is antitone in kappa (smaller thresholds give larger sets), so
    a binary search over the grid is exact.
    """
    if trace.true_answer not in universe:
        return grid_max
    if _covered_at(dists, trace, universe, grid_max * granularity):
        return grid_max
    lo, hi = 0, grid_max  # covered at lo (full sets reach the universe), not at hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _covered_at(dists, trace, universe, mid * granularity):
            lo = mid
        else:
            hi = mid
    return lo


def batch_calibrate(
    net: MLP,
    theta: np.ndarray,
    traces,
    alpha: float,
    granularity: float = 1e-6,
    env_cfg: EnvConfig | None = None,
) -> tuple[float, CalibrationReport]:
    """Finite-sample threshold selection on a held-out calibration set.

    Scans the kappa grid from 1 downward (via per-trace critical thresholds,
    which is equivalent because per-trace coverage is antitone in kappa) and
    returns the largest grid point whose empirical coverage reaches
    ceil((n+1)(1-alpha))/n, or 0 if no grid point qualifies.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("calibration set must be non-empty")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    env_cfg = env_cfg or EnvConfig(horizon=len(traces[0].rounds))
    grid_max = int(np.floor(1.0 / granularity + 0.5))
    n = len(traces)
    m = int(np.ceil((n + 1) * (1.0 - alpha)))

    crit = np.empty(n, dtype=np.int64)
    for i, trace in enumerate(traces):
        dists = trace_profile(net, theta, trace, env_cfg)
        crit[i] = _critical_grid_index(dists, trace, answer_universe(trace), granularity, grid_max)

    if m > n:
        kappa_star = 0.0
        coverage = float(np.mean(crit >= 0))
    else:
        order = np.sort(crit)[::-1]
        kappa_idx = int(order[m - 1])
        kappa_star = kappa_idx * granularity
        coverage = float(np.mean(crit >= kappa_idx))
    report = CalibrationReport(
        kappa=kappa_star,
        grid_points=grid_max + 1,
        empirical_coverage=coverage,
        n_calibration=n,
        target_count=m,
    )
    return kappa_star, report
