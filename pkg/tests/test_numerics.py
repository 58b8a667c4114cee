"""Numerical kernel: forward/backward fidelity, KL, Fisher products, CG."""

import numpy as np
import pytest

from ccpo.numerics import (
    MLP,
    FisherOperator,
    NumericError,
    conjugate_gradient,
    kl_categorical,
    masked_softmax_floor,
    masked_softmax_floor_vjp,
    mean_kl_rows,
    sigmoid,
)

RNG = np.random.default_rng(1234)


def random_net(rng, in_dim=6, hidden=(8, 8, 8), out_dim=3):
    net = MLP(in_dim, hidden, out_dim)
    return net, rng.normal(0, 0.7, net.n_params)


def policy_probs(net, theta, X, masks):
    logits, acts = net.forward(theta, X)
    probs, head = masked_softmax_floor(logits, masks)
    return probs, acts, head


def directional_fd(f, theta, d, h=1e-5):
    return (f(theta + h * d) - f(theta - h * d)) / (2 * h)


class TestForward:
    def test_zero_params_uniform(self):
        net = MLP(6, (64, 64, 64), 3)
        probs, _, _ = policy_probs(net, np.zeros(net.n_params), np.zeros((1, 6)), np.ones((1, 3)))
        np.testing.assert_allclose(probs, np.full((1, 3), 1 / 3))

    def test_zero_params_masked_half_half(self):
        net = MLP(6, (64, 64, 64), 3)
        probs, _, _ = policy_probs(
            net, np.zeros(net.n_params), np.zeros((1, 6)), np.array([[1.0, 1.0, 0.0]])
        )
        np.testing.assert_allclose(probs, [[0.5, 0.5, 0.0]])

    def test_forward_matches_independent_recomputation(self):
        """Oracle: unpack the flat vector by the documented layout and apply
        plain matrix arithmetic."""
        rng = np.random.default_rng(7)
        net, theta = random_net(rng, in_dim=5, hidden=(4, 3), out_dim=2)
        X = rng.normal(size=(6, 5))
        out, _ = net.forward(theta, X)

        offset = 0
        a = X
        sizes = [5, 4, 3, 2]
        for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = theta[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = theta[offset : offset + n_out]
            offset += n_out
            z = a @ W + b
            a = z if layer == len(sizes) - 2 else np.tanh(z)
        np.testing.assert_allclose(out, a, rtol=1e-12)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(10, 3))
        mask = np.ones((10, 3))
        p1, _ = masked_softmax_floor(logits, mask)
        p2, _ = masked_softmax_floor(logits + 13.7, mask)
        np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_dimension_mismatch_is_usage_error(self):
        net = MLP(6, (8,), 3)
        with pytest.raises(ValueError):
            net.forward(np.zeros(net.n_params), np.zeros((1, 5)))
        with pytest.raises(ValueError):
            net.forward(np.zeros(net.n_params + 1), np.zeros((1, 6)))


class TestBackward:
    def test_zero_upstream_zero_gradient(self):
        rng = np.random.default_rng(5)
        net, theta = random_net(rng)
        _, acts = net.forward(theta, rng.normal(size=(4, 6)))
        grad = net.backward(theta, acts, np.zeros((4, 3)))
        assert np.all(grad == 0.0)

    def test_policy_head_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        for case in range(30):
            net, theta = random_net(rng)
            X = rng.normal(size=(3, 6))
            masks = np.ones((3, 3))
            if case % 3 == 0:
                masks[-1, 2] = 0.0
            upstream = rng.normal(size=(3, 3))

            def f(th):
                probs, _, _ = policy_probs(net, th, X, masks)
                return float((upstream * probs).sum())

            probs, acts, head = policy_probs(net, theta, X, masks)
            dz = masked_softmax_floor_vjp(head, upstream)
            grad = net.backward(theta, acts, dz)
            d = rng.normal(size=theta.shape)
            d /= np.linalg.norm(d)
            fd = directional_fd(f, theta, d)
            assert abs(grad @ d - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_value_head_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            net, theta = random_net(rng, out_dim=1)
            X = rng.normal(size=(5, 6))

            def f(th):
                out, _ = net.forward(th, X)
                return float(out.sum())

            _, acts = net.forward(theta, X)
            grad = net.backward(theta, acts, np.ones((5, 1)))
            d = rng.normal(size=theta.shape)
            d /= np.linalg.norm(d)
            fd = directional_fd(f, theta, d)
            assert abs(grad @ d - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_per_sample_gradients_sum_to_batch_gradient(self):
        rng = np.random.default_rng(13)
        net, theta = random_net(rng)
        X = rng.normal(size=(7, 6))
        _, acts = net.forward(theta, X)
        dout = rng.normal(size=(7, 3))
        summed = net.backward(theta, acts, dout)
        per = net.backward_per_sample(theta, acts, dout)
        np.testing.assert_allclose(per.sum(axis=0), summed, rtol=1e-10, atol=1e-12)

    def test_score_function_identity(self):
        """Exact expectation over the 3 actions: sum_a p(a) grad log p(a) = 0."""
        rng = np.random.default_rng(14)
        for case in range(10):
            net, theta = random_net(rng)
            X = rng.normal(size=(2, 6))
            masks = np.ones((2, 3))
            if case % 2:
                masks[0, 2] = 0.0
            probs, acts, head = policy_probs(net, theta, X, masks)
            total = np.zeros(net.n_params)
            for a in range(3):
                rows = np.zeros((2, 3))
                live = probs[:, a] > 0
                rows[live, a] = 1.0 / probs[live, a]
                dz = masked_softmax_floor_vjp(head, rows)
                glog = net.backward_per_sample(theta, acts, dz)
                glog[~live] = 0.0
                total += (probs[:, a][:, None] * glog).sum(axis=0)
            np.testing.assert_allclose(total, 0.0, atol=1e-10)


class TestKL:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.5, 0.3])
        assert kl_categorical(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_point_mass_closed_form(self):
        assert kl_categorical([1.0, 0.0, 0.0], [0.5, 0.5, 0.0]) == pytest.approx(np.log(2))

    def test_matches_direct_formula_on_random_pairs(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            p = rng.dirichlet(np.ones(3))
            q = rng.dirichlet(np.ones(3))
            direct = sum(pi * np.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
            assert kl_categorical(p, q) == pytest.approx(direct, rel=1e-12)
            assert kl_categorical(p, q) >= 0

    def test_support_violation_errors(self):
        with pytest.raises(ValueError):
            kl_categorical([0.5, 0.5, 0.0], [1.0, 0.0, 0.0])

    def test_mean_kl_rows_matches_loop(self):
        rng = np.random.default_rng(16)
        P = rng.dirichlet(np.ones(3), size=8)
        Q = rng.dirichlet(np.ones(3), size=8)
        loop = np.mean([kl_categorical(p, q) for p, q in zip(P, Q)])
        assert mean_kl_rows(P, Q) == pytest.approx(loop, rel=1e-12)


def tiny_soft_model(kappa=0.3, epsilon=0.05):
    """Smallest policy net: 1 input, no hidden layers, 3 logits (6 params)."""
    from ccpo.policy import SoftConformalModel

    net = MLP(1, (), 3)
    return net, SoftConformalModel(net, kappa, epsilon)


def soft_kl_to_frozen(model, theta0, theta, X, masks):
    frozen = model.dists(theta0, X, masks)
    return mean_kl_rows(frozen, model.dists(theta, X, masks))


def soft_kl_gradient(model, theta0, theta, X, masks):
    """Analytic gradient of mean KL(frozen || current) w.r.t. current params."""
    frozen = model.dists(theta0, X, masks)
    ctx = model.context(theta, X, masks)
    G = model.per_action_logprob_grads(theta, ctx)
    # d/dtheta of -sum_a frozen_a log S_theta(a), averaged over the batch.
    grad = -(frozen[:, :, None] * G).sum(axis=(0, 1)) / X.shape[0]
    return grad


class TestFisherVectorProduct:
    def test_zero_vector_maps_to_zero(self):
        rng = np.random.default_rng(17)
        net, model = tiny_soft_model()
        theta = rng.normal(size=net.n_params)
        X = rng.normal(size=(4, 1))
        masks = np.ones((4, 3))
        ctx = model.context(theta, X, masks)
        G = model.per_action_logprob_grads(theta, ctx)
        op = FisherOperator(G.reshape(-1, net.n_params), (ctx.S / 4).reshape(-1), damping=0.0)
        np.testing.assert_array_equal(op(np.zeros(net.n_params)), np.zeros(net.n_params))

    def test_matches_finite_difference_hessian_of_kl(self):
        """Oracle: columns of the KL Hessian by central differences of the
        analytic KL gradient, contracted with v."""
        rng = np.random.default_rng(18)
        net, model = tiny_soft_model()
        for _ in range(5):
            theta = rng.normal(size=net.n_params)
            X = rng.normal(size=(3, 1))
            masks = np.ones((3, 3))
            ctx = model.context(theta, X, masks)
            G = model.per_action_logprob_grads(theta, ctx)
            op = FisherOperator(G.reshape(-1, net.n_params), (ctx.S / 3).reshape(-1), damping=0.0)

            h = 1e-6
            H = np.zeros((net.n_params, net.n_params))
            for j in range(net.n_params):
                e = np.zeros(net.n_params)
                e[j] = h
                gp = soft_kl_gradient(model, theta, theta + e, X, masks)
                gm = soft_kl_gradient(model, theta, theta - e, X, masks)
                H[:, j] = (gp - gm) / (2 * h)

            v = rng.normal(size=net.n_params)
            hv = op(v)
            ref = H @ v
            assert np.linalg.norm(hv - ref) <= 1e-3 * max(1.0, np.linalg.norm(ref))

    def test_positive_semidefinite_with_damping(self):
        rng = np.random.default_rng(19)
        net, model = tiny_soft_model()
        theta = rng.normal(size=net.n_params)
        X = rng.normal(size=(5, 1))
        masks = np.ones((5, 3))
        ctx = model.context(theta, X, masks)
        G = model.per_action_logprob_grads(theta, ctx)
        op = FisherOperator(G.reshape(-1, net.n_params), (ctx.S / 5).reshape(-1), damping=1e-8)
        for _ in range(50):
            v = rng.normal(size=net.n_params)
            assert v @ op(v) >= 0.0

    def test_dimension_mismatch(self):
        op = FisherOperator(np.ones((2, 3)), np.ones(2), 0.0)
        with pytest.raises(ValueError):
            op(np.ones(4))


class TestConjugateGradient:
    def test_diagonal_solve(self):
        A = np.diag([2.0, 4.0])
        res = conjugate_gradient(lambda v: A @ v, np.array([2.0, 4.0]))
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-12)

    def test_zero_rhs(self):
        res = conjugate_gradient(lambda v: v, np.zeros(3))
        np.testing.assert_array_equal(res.x, np.zeros(3))
        assert res.converged

    def test_random_spd_matches_direct_solve(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            M = rng.normal(size=(10, 10))
            A = M @ M.T + 0.5 * np.eye(10)
            b = rng.normal(size=10)
            res = conjugate_gradient(lambda v: A @ v, b, max_iters=50, tol=1e-12)
            assert np.linalg.norm(A @ res.x - b) <= 1e-8 * np.linalg.norm(b)

    def test_converges_within_dimension_iterations(self):
        rng = np.random.default_rng(21)
        for dim in (3, 6, 10):
            M = rng.normal(size=(dim, dim))
            A = M @ M.T + np.eye(dim)
            b = rng.normal(size=dim)
            res = conjugate_gradient(lambda v: A @ v, b, max_iters=dim + 2, tol=1e-9)
            assert res.converged
            assert res.iterations <= dim + 2

    def test_non_finite_raises_with_iteration_index(self):
        def bad(v):
            return v * np.nan

        with pytest.raises(NumericError, match="iteration 0"):
            conjugate_gradient(bad, np.ones(3))


def test_sigmoid_tails_are_stable():
    x = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 or s[0] < 1e-300
    assert s[2] == pytest.approx(0.5)
    assert s[-1] == 1.0


def test_init_params_scaling_and_determinism():
    net = MLP(6, (64, 64, 64), 3)
    t1 = net.init_params(np.random.default_rng(0))
    t2 = net.init_params(np.random.default_rng(0))
    np.testing.assert_array_equal(t1, t2)
    W1 = t1[: 6 * 64].reshape(6, 64)
    assert abs(W1.std() - 1 / np.sqrt(6)) < 0.08
    # biases zero
    assert np.all(t1[6 * 64 : 6 * 64 + 64] == 0.0)
