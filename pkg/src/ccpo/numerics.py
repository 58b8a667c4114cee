"""Minimal numerical kernel: fixed-architecture MLPs with exact analytic
gradients over a flat parameter vector, categorical KL, Fisher-vector
products, and a conjugate-gradient solver.

No autodiff framework: gradients are hand-derived, batched with numpy, and
checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-6


class NumericError(RuntimeError):
    """A non-finite value surfaced inside a numerical routine."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class MLP:
    """Feed-forward network with tanh hidden layers and a linear head.

    All parameters live in a single flat vector; the shape descriptor (layer
    sizes) defines the packing. Hidden layers default to three of 64 units.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...] = (64, 64, 64), out_dim: int = 3):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.sizes = (in_dim, *self.hidden, out_dim)
        self.layers = list(zip(self.sizes[:-1], self.sizes[1:]))
        self._slices: list[tuple[slice, slice]] = []
        offset = 0
        for n_in, n_out in self.layers:
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            self._slices.append((w, b))
        self.n_params = offset

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Zero-mean weights scaled by 1/sqrt(fan_in); zero biases."""
        theta = np.zeros(self.n_params)
        for (n_in, n_out), (ws, _) in zip(self.layers, self._slices):
            theta[ws] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=n_in * n_out)
        return theta

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector has length {theta.shape}, expected ({self.n_params},)")
        out = []
        for (n_in, n_out), (ws, bs) in zip(self.layers, self._slices):
            out.append((theta[ws].reshape(n_in, n_out), theta[bs]))
        return out

    def forward(self, theta: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (head output (N, out_dim), activation cache)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"feature dimension {X.shape[1]} does not match network input {self.in_dim}")
        params = self.unpack(theta)
        acts = [X]
        a = X
        for W, b in params[:-1]:
            a = np.tanh(a @ W + b)
            acts.append(a)
        W, b = params[-1]
        out = a @ W + b
        return out, acts

    def _backprop_deltas(self, theta, acts, dout):
        params = self.unpack(theta)
        deltas = [None] * len(self.layers)
        delta = np.asarray(dout, dtype=np.float64)
        for l in range(len(self.layers) - 1, -1, -1):
            deltas[l] = delta
            if l > 0:
                W, _ = params[l]
                delta = (delta @ W.T) * (1.0 - acts[l] ** 2)
        return deltas

    def backward(self, theta: np.ndarray, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
        """Gradient of sum_n <dout_n, head_n> w.r.t. the flat parameters."""
        deltas = self._backprop_deltas(theta, acts, dout)
        grad = np.zeros(self.n_params)
        for l, ((ws, bs), delta) in enumerate(zip(self._slices, deltas)):
            grad[ws] = (acts[l].T @ delta).ravel()
            grad[bs] = delta.sum(axis=0)
        return grad

    def backward_per_sample(self, theta: np.ndarray, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
        """Per-sample gradients: row n is d<dout_n, head_n>/d(theta). Shape (N, P)."""
        deltas = self._backprop_deltas(theta, acts, dout)
        N = acts[0].shape[0]
        grads = np.zeros((N, self.n_params))
        for l, ((ws, bs), delta) in enumerate(zip(self._slices, deltas)):
            grads[:, ws] = np.einsum("ni,nj->nij", acts[l], delta).reshape(N, -1)
            grads[:, bs] = delta
        return grads


@dataclass
class HeadCache:
    p_raw: np.ndarray
    probs: np.ndarray
    fsum: np.ndarray
    active: np.ndarray
    mask: np.ndarray


def masked_softmax_floor(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, HeadCache]:
    """Softmax over the unmasked actions, floored at PROB_FLOOR and renormalized.

    Masked actions get probability exactly zero; unmasked ones are kept away
    from zero so importance ratios and KL terms stay finite.
    """
    logits = np.atleast_2d(logits)
    mask = np.atleast_2d(mask).astype(bool)
    if not mask.any(axis=1).all():
        raise ValueError("every row must have at least one legal action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p_raw = e / e.sum(axis=1, keepdims=True)
    f = np.where(mask, np.maximum(p_raw, PROB_FLOOR), 0.0)
    fsum = f.sum(axis=1)
    probs = f / fsum[:, None]
    active = (p_raw > PROB_FLOOR) & mask
    return probs, HeadCache(p_raw=p_raw, probs=probs, fsum=fsum, active=active, mask=mask)


def masked_softmax_floor_vjp(cache: HeadCache, dprobs: np.ndarray) -> np.ndarray:
    """Chain an upstream d/d(probs) back to d/d(logits)."""
    inner = (dprobs * cache.probs).sum(axis=1, keepdims=True)
    df = (dprobs - inner) / cache.fsum[:, None]
    dp = np.where(cache.active, df, 0.0)
    inner2 = (dp * cache.p_raw).sum(axis=1, keepdims=True)
    return cache.p_raw * (dp - inner2)


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for categorical distributions; q must support p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    ps = p[support]
    return float(np.sum(ps * np.log(ps / q[support])))


def mean_kl_rows(P: np.ndarray, Q: np.ndarray) -> float:
    """Batch-mean KL(P_n || Q_n) over rows."""
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    support = P > 0.0
    if np.any(Q[support] <= 0.0):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    ratio = np.ones_like(P)
    np.divide(P, Q, out=ratio, where=support)
    terms = np.where(support, P * np.log(ratio), 0.0)
    return float(terms.sum(axis=1).mean())


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float


def conjugate_gradient(apply_A, b: np.ndarray, max_iters: int = 50, tol: float = 1e-10) -> CGResult:
    """Solve A x = b for a symmetric PSD operator given as a matvec closure."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(x=x, converged=True, iterations=0, residual=0.0)
    r = b.copy()
    p = b.copy()
    rdotr = float(r @ r)
    for i in range(max_iters):
        Ap = apply_A(p)
        if not np.all(np.isfinite(Ap)):
            raise NumericError(f"conjugate gradient produced non-finite values at iteration {i}")
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            # Damped operators keep this positive; a zero means b is in the null space.
            break
        alpha = rdotr / pAp
        x += alpha * p
        r -= alpha * Ap
        new_rdotr = float(r @ r)
        if np.sqrt(new_rdotr) <= tol * bnorm:
            return CGResult(x=x, converged=True, iterations=i + 1, residual=float(np.sqrt(new_rdotr)))
        p = r + (new_rdotr / rdotr) * p
        rdotr = new_rdotr
    return CGResult(x=x, converged=False, iterations=max_iters, residual=float(np.sqrt(rdotr)))


class FisherOperator:
    """Damped curvature operator of a batch of categorical distributions.

    Built from per-(sample, action) gradients of the log-probabilities,
    G[m] = d log q(a_m | o_m) / d(theta), with weights w[m] = q0(a_m | o_m) / N.
    The product sum_m w_m G_m (G_m . v) is exactly the Hessian-vector product
    of the batch-mean KL to a frozen copy of the distribution, evaluated at
    the frozen point, plus damping.
    """

    def __init__(self, G: np.ndarray, weights: np.ndarray, damping: float = 1e-4):
        self.G = G
        self.weights = weights
        self.damping = damping

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.G.shape[1],):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.G.shape[1]},)")
        return self.G.T @ (self.weights * (self.G @ v)) + self.damping * v
