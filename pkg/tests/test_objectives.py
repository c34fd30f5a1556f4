import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from degrad import errors
from degrad.objectives import (
    LinearRegressionObjective,
    LogCoshObjective,
    QuadraticObjective,
    ensemble_from_json,
    ensemble_to_json,
    grad_stack,
    heterogeneity,
    make_linear_regression,
    make_logcosh,
    make_quadratic,
    mht_kernel,
    random_quadratic,
    sample_stochastic_grad,
    solve_optimum,
)

# three data points (feature, target) used for the least-squares oracle
LINREG_ROWS = [[1.0, 1.0], [1.0, -1.0], [2.0, 0.0]]


# ---------------------------------------------------------------- linear regression


def test_linreg_gradient_is_4x():
    # [PAPER] f'(x) = 4x for the three-point data set
    ens = make_linear_regression([LINREG_ROWS])
    f = ens.locals[0]
    for x in (-3.0, 0.0, 0.7, 5.0):
        assert f.gradient(np.array([x]))[0] == pytest.approx(4 * x, abs=1e-14)
    assert ens.mu == pytest.approx(4.0) and ens.L == pytest.approx(4.0)
    np.testing.assert_allclose(solve_optimum(ens).x_star, [0.0], atol=1e-15)


@pytest.mark.parametrize("x", [0.0, 1.0, -2.0])
def test_linreg_noise_variance_exact(x):
    # [PAPER] E[eps^2] = 8/3 + 8x^2, checked by exact enumeration of the three samples
    f = make_linear_regression([LINREG_ROWS]).locals[0]
    A, y = f.features[:, 0], f.targets
    samples = 2 * A * (A * x - y)
    eps = samples - f.gradient(np.array([x]))[0]
    assert eps.mean() == pytest.approx(0.0, abs=1e-14)
    assert np.mean(eps**2) == pytest.approx(8 / 3 + 8 * x * x, rel=1e-14)


def test_linreg_noise_variance_monte_carlo(rng):
    # [PAPER] the sampler reproduces E[eps^2] = 8/3 + 8x^2 within 5%
    ens = make_linear_regression([LINREG_ROWS])
    X = np.full((200_000, 1, 1), 1.5)
    _, eps = sample_stochastic_grad(ens, X, rng)
    assert np.mean(eps**2) == pytest.approx(8 / 3 + 8 * 2.25, rel=0.05)


def test_linreg_singular_gram():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DegenerateObjectiveError):
        make_linear_regression([[[1.0, 0.0, 1.0], [2.0, 0.0, 1.0]]])


def test_linreg_ridge_restores_convexity():
    # [DERIVED] ridge adds rho to every Hessian eigenvalue
    ens = make_linear_regression([[[1.0, 0.0, 1.0], [2.0, 0.0, 1.0]]], ridge=0.5)
    assert ens.mu == pytest.approx(1.0)


def test_linreg_pairs_form():
    # [TRIVIAL] row form equals feature/target form
    a = make_linear_regression([[(np.array([1.0]), 1.0), (np.array([1.0]), -1.0), (np.array([2.0]), 0.0)]])
    b = make_linear_regression([LINREG_ROWS])
    np.testing.assert_array_equal(a.locals[0].curvature, b.locals[0].curvature)


def test_singleton_sampler_has_zero_noise(rng):
    # [DERIVED] one sample means the stochastic gradient is exact
    ens = make_linear_regression([[[1.0, 2.0]], [[2.0, 1.0]]], ridge=0.1)
    _, eps = sample_stochastic_grad(ens, rng.standard_normal((7, 2, 1)), rng)
    np.testing.assert_allclose(eps, 0.0, atol=1e-13)


def test_missing_sampler_is_capability_error(rng):
    # [TRIVIAL] input validation
    ens = make_quadratic([1.0, 2.0])
    with pytest.raises(errors.CapabilityError):
        sample_stochastic_grad(ens, np.zeros((2, 1)), rng)


# ---------------------------------------------------------------- quadratics


def test_two_agent_heterogeneity():
    # [DERIVED] f_{1,2} = (x -/+ 1)^2 / 2: x* = 0, grads (-1, 1)
    ens = make_quadratic([1.0, 1.0], centers=[[1.0], [-1.0]])
    opt = solve_optimum(ens)
    np.testing.assert_allclose(opt.x_star, [0.0], atol=1e-15)
    np.testing.assert_allclose(opt.grad_at_opt.ravel(), [-1.0, 1.0], atol=1e-15)
    het = heterogeneity(ens, opt)
    assert het.grad_norm == pytest.approx(math.sqrt(2))
    assert het.dist == pytest.approx(math.sqrt(2))
    assert het.gap == pytest.approx(1.0)
    assert het.bounds_ok


def test_identical_objectives_have_no_heterogeneity():
    # [DERIVED] identical agents all vanish at x*
    ens = make_quadratic([np.diag([1.0, 3.0])] * 4, centers=[[2.0, -1.0]] * 4)
    het = heterogeneity(ens)
    assert het.grad_norm == pytest.approx(0.0, abs=1e-12)
    assert het.dist == pytest.approx(0.0, abs=1e-12)
    assert het.gap == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("N", [2, 5, 9])
def test_equal_curvature_optimum_is_mean_of_centers(N):
    # [DERIVED] equal curvature gives the mean of the centers
    centers = [[float(k)] for k in range(1, N + 1)]
    x = solve_optimum(make_quadratic([2.0] * N, centers=centers)).x_star
    assert x[0] == pytest.approx((N + 1) / 2, rel=1e-14)


def test_ensemble_constants():
    # [DERIVED] mu and L are the extreme curvatures
    ens = make_quadratic([np.diag([0.5, 2.0]), np.diag([1.0, 7.0])])
    assert ens.mu == 0.5 and ens.L == 7.0 and ens.is_quadratic


def test_non_spd_rejected():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        QuadraticObjective([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(errors.DomainError):
        QuadraticObjective([[1.0, 2.0], [0.0, 1.0]])


def test_grad_stack_shape_check():
    # [TRIVIAL] input validation
    ens = make_quadratic([1.0, 2.0])
    with pytest.raises(errors.DomainError):
        grad_stack(ens, np.zeros((3, 1)))


def test_grad_stack_batched_matches_loop(rng):
    # [TRIVIAL] batching
    ens = random_quadratic(rng, 4, 3)
    X = rng.standard_normal((5, 4, 3))
    G = grad_stack(ens, X)
    for b in range(5):
        for n in range(4):
            np.testing.assert_allclose(G[b, n], ens.locals[n].gradient(X[b, n]), atol=1e-13)


def test_random_quadratic_hits_constants(rng):
    # [DERIVED] requested mu and L are attained
    ens = random_quadratic(rng, 6, 3, mu=0.5, L=5.0)
    assert ens.mu == pytest.approx(0.5) and ens.L == pytest.approx(5.0)


def test_gradient_unbounded_for_quadratic():
    # [PAPER] bounded gradients fail for strongly convex objectives
    # strongly convex objectives cannot have bounded gradients
    f = QuadraticObjective(np.diag([1.0, 2.0]))
    assert np.linalg.norm(f.gradient(np.array([1e6, 0.0]))) >= 1e6


# ---------------------------------------------------------------- log-cosh


def test_logcosh_constants_and_optimum():
    # [DERIVED] log-cosh second derivative lies in [0, w]
    ens = make_logcosh([1.0, 1.0], [[2.0], [2.0]], [[1.0], [-1.0]])
    assert ens.mu == 1.0 and ens.L == 3.0 and not ens.is_quadratic
    opt = solve_optimum(ens)
    # symmetric centers put the optimum at zero
    assert abs(opt.x_star[0]) <= 1e-8
    assert heterogeneity(ens, opt).bounds_ok


def test_logcosh_domain():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        LogCoshObjective(0.0, [1.0], [0.0])
    with pytest.raises(errors.DomainError):
        LogCoshObjective(1.0, [-1.0], [0.0])


# ---------------------------------------------------------------- kernel


def test_kernel_oracle_two_dimensional():
    # [DERIVED] f = x1^2/2 + x2^2 between (0,0) and (1,1): a=(1,1), b=(1,2),
    # u = b - a = (0,1), alpha = 1/2, so A = diag(1, 2)
    f = QuadraticObjective(np.diag([1.0, 2.0]))
    k = mht_kernel(f, [0.0, 0.0], [1.0, 1.0])
    assert k.alpha == pytest.approx(0.5)
    np.testing.assert_allclose(k.matrix, np.diag([1.0, 2.0]), atol=1e-14)


def test_kernel_oracle_brute_force():
    # [DERIVED] the unique symmetric A with A a = b of the form mu P_perp + s P
    f = QuadraticObjective(np.diag([1.0, 2.0]))
    k = mht_kernel(f, [0.0, 0.0], [1.0, 1.0])
    best = None
    for s in np.linspace(1.0, 2.0, 1001):
        A = np.diag([1.0, s])
        r = np.linalg.norm(A @ k.a - k.b)
        best = (r, s) if best is None or r < best[0] else best
    assert best[1] == pytest.approx(2.0) and best[0] <= 1e-12


def test_kernel_parallel_branch_gives_scaled_identity():
    # [DERIVED] b parallel to a gives (|b|/|a|) I
    f = QuadraticObjective(3.0 * np.eye(2))
    k = mht_kernel(f, [1.0, 0.0], [2.0, 1.0])
    np.testing.assert_allclose(k.matrix, 3.0 * np.eye(2), atol=1e-14)


def test_kernel_scalar_is_difference_quotient():
    # [DERIVED] d = 1 kernel is the secant slope
    f = LogCoshObjective(1.0, [2.0], [0.3])
    k = mht_kernel(f, [-0.4], [1.1])
    assert k.matrix[0, 0] == pytest.approx(float(k.b[0] / k.a[0]), rel=1e-14)


def test_kernel_certification_error():
    # [TRIVIAL] input validation
    class Lying(QuadraticObjective):
        @property
        def L(self):
            return 1.5

        @L.setter
        def L(self, value):
            pass

    f = Lying(np.diag([1.0, 2.0]))
    with pytest.raises(errors.CertificationError):
        mht_kernel(f, [0.0, 0.0], [0.0, 1.0])


def test_kernel_needs_distinct_points():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        mht_kernel(QuadraticObjective(np.eye(2)), [1.0, 1.0], [1.0, 1.0])


# ---------------------------------------------------------------- JSON


def test_json_round_trip(rng):
    # [TRIVIAL] serialization
    for ens in (
        random_quadratic(rng, 3, 2),
        make_linear_regression([LINREG_ROWS, [[1.0, 2.0], [3.0, 1.0]]], 0.1),
        make_logcosh([1.0], [[1.0, 2.0]], [[0.0, 1.0]]),
    ):
        back = ensemble_from_json(ensemble_to_json(ens))
        X = rng.standard_normal((ens.n_agents, ens.dim))
        np.testing.assert_allclose(grad_stack(back, X), grad_stack(ens, X), atol=1e-13)


def test_json_center_form():
    # [TRIVIAL] serialization
    ens = ensemble_from_json({"kind": "quadratic", "agents": [{"curvature": 2.0, "center": 1.5}]})
    np.testing.assert_allclose(solve_optimum(ens).x_star, [1.5])


def test_json_unknown_kind():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        ensemble_from_json({"kind": "hinge", "agents": [{}]})


# ---------------------------------------------------------------- properties


@st.composite
def objectives(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    d = draw(st.integers(1, 4))
    if draw(st.booleans()):
        ens = random_quadratic(rng, 1, d, mu=draw(st.floats(0.1, 2.0)), L=draw(st.floats(2.5, 10.0)))
        return ens.locals[0], rng
    return LogCoshObjective(draw(st.floats(0.1, 2.0)), rng.uniform(0, 3, d), rng.normal(size=d)), rng


@given(objectives())
def test_prop_strong_convexity_and_smoothness(obj):
    # [DERIVED] first-order mu/L inequalities
    f, rng = obj
    for _ in range(5):
        x, y = rng.normal(scale=3, size=(2, f.dim))
        gx, gy = f.gradient(x), f.gradient(y)
        diff = float(np.dot(gy - gx, y - x))
        nrm2 = float(np.dot(y - x, y - x))
        assert diff >= f.mu * nrm2 * (1 - 1e-9)
        assert np.linalg.norm(gy - gx) <= f.L * math.sqrt(nrm2) * (1 + 1e-9)
        fx, fy = float(f.value(x)), float(f.value(y))
        lin = fx + float(np.dot(gx, y - x))
        assert fy >= lin + 0.5 * f.mu * nrm2 - 1e-9 * (1 + abs(fy))
        assert fy <= lin + 0.5 * f.L * nrm2 + 1e-9 * (1 + abs(fy))


@given(objectives())
def test_prop_gradient_matches_finite_difference(obj):
    # [DERIVED] central differences
    f, rng = obj
    x = rng.normal(size=f.dim)
    h = 1e-6
    fd = np.array([(f.value(x + h * e) - f.value(x - h * e)) / (2 * h) for e in np.eye(f.dim)])
    np.testing.assert_allclose(f.gradient(x), fd, rtol=1e-6, atol=1e-6)


@given(objectives())
def test_prop_kernel_reproduces_secant(obj):
    # [DERIVED] A a = b with spectrum in [mu, L]
    f, rng = obj
    x, y = rng.normal(scale=2, size=(2, f.dim))
    k = mht_kernel(f, x, y)
    np.testing.assert_allclose(k.matrix @ k.a, k.b, atol=1e-9 * (1 + np.linalg.norm(k.b)))
    ev = np.linalg.eigvalsh(k.matrix)
    assert ev[0] >= f.mu * (1 - 1e-8) and ev[-1] <= f.L * (1 + 1e-8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 3))
def test_prop_heterogeneity_sandwich(seed, N, d):
    # [DERIVED] norm equivalence between the heterogeneity measures
    ens = random_quadratic(np.random.default_rng(seed), N, d, spread=3.0)
    assert heterogeneity(ens).bounds_ok


@given(st.integers(0, 2**32 - 1))
def test_prop_optimum_zeroes_mean_gradient(seed):
    # [DERIVED] first-order optimality
    ens = random_quadratic(np.random.default_rng(seed), 4, 2, spread=2.0)
    opt = solve_optimum(ens)
    assert np.linalg.norm(opt.grad_at_opt.mean(axis=0)) <= 1e-10 * (1 + opt.grad_norm)


def test_linreg_is_quadratic_subclass():
    # [TRIVIAL] type structure
    f = make_linear_regression([LINREG_ROWS]).locals[0]
    assert isinstance(f, LinearRegressionObjective) and f.is_quadratic and f.has_sampler
