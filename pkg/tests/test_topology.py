import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_connected_adjacency
from degrad import errors
from degrad.topology import (
    LinkFailureModel,
    LinkMode,
    Topology,
    build_toy,
    combine_rounds,
    consensus_pinv,
    draw_link_matrices,
    expected_Q,
    from_edges,
    from_laplacian,
    link_noise_variance_bound,
    pinv_weight_norm,
    sample_link_failure,
    scale_consensus,
    spectrum,
    topology_factor,
    topology_from_json,
    topology_to_json,
    validate,
)

SWAP = [[0.0, 1.0], [1.0, 0.0]]


# ---------------------------------------------------------------- construction


def test_two_node_path_weights_and_lambda2():
    # [DERIVED] 2x2 hand eigendecomposition: eigenvalues 1 and 1 - 2*eps
    t = from_laplacian([[0, 1], [1, 0]], 0.4)
    np.testing.assert_allclose(t.weights, [[0.6, 0.4], [0.4, 0.6]], atol=1e-15)
    assert t.spectrum.lambda2 == pytest.approx(0.2, abs=1e-12)


def test_triangle_eigenvalues():
    # [DERIVED] K_N Laplacian spectrum {0, N, ..., N}: lambda = 1 - 3 eps
    t = from_laplacian(np.ones((3, 3)) - np.eye(3), 0.2)
    np.testing.assert_allclose(t.spectrum.eigenvalues, [1.0, 0.4, 0.4], atol=1e-12)


def test_epsilon_zero_rejected():
    # [TRIVIAL] input validation
    with pytest.raises(errors.StepSizeError):
        from_laplacian([[0, 1], [1, 0]], 0.0)


def test_epsilon_at_gershgorin_limit_rejected():
    # [DERIVED] epsilon < 1/k_max is required for a nonnegative diagonal
    # ring: k_max = 2, so epsilon must stay below 1/2
    with pytest.raises(errors.StepSizeError):
        build_toy("ring", 5, 0.5)


def test_disconnected_adjacency_rejected():
    # [TRIVIAL] input validation
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = 1
    with pytest.raises(errors.TopologyValidityError):
        from_laplacian(A, 0.1)


def test_non_binary_adjacency_rejected():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        from_laplacian([[0, 2], [2, 0]], 0.1)


def test_small_n_rejected():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        build_toy("star", 1, 0.1)
    with pytest.raises(errors.DomainError):
        build_toy("ring", 2, 0.1)


def test_unknown_toy_kind():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        build_toy("torus", 4, 0.1)


def test_topology_rejects_asymmetric_and_non_stochastic():
    # [TRIVIAL] input validation
    with pytest.raises(errors.TopologyValidityError):
        Topology([[0.5, 0.5], [0.4, 0.6]])
    with pytest.raises(errors.TopologyValidityError):
        Topology([[0.5, 0.4], [0.4, 0.5]])


def test_weights_read_only():
    # [TRIVIAL] immutability
    t = build_toy("line", 4, 0.3)
    with pytest.raises(ValueError):
        t.weights[0, 0] = 1.0


def test_from_edges_matches_from_laplacian():
    # [TRIVIAL] two constructors, same matrix
    a = from_edges(4, [[0, 1], [1, 2], [2, 3]], 0.3)
    assert a == build_toy("line", 4, 0.3)


# ---------------------------------------------------------------- spectra


def test_complete_graph_spectrum():
    # [PAPER] lambda_2 = ... = lambda_N = 0 for 11^T/N
    ev = spectrum(build_toy("complete", 5)).eigenvalues
    np.testing.assert_allclose(ev, [1, 0, 0, 0, 0], atol=1e-12)


def test_complete_graph_n4_zero_modes():
    # [DERIVED] W = 11^T/N has eigenvalues 1, 0, ..., 0
    ev = build_toy("complete", 4).spectrum.eigenvalues
    np.testing.assert_allclose(ev[1:], 0.0, atol=1e-12)


def test_swap_matrix_spectrum():
    # [PAPER] lambda_1 = 1, lambda_2 = -1
    np.testing.assert_allclose(Topology(SWAP).spectrum.eigenvalues, [1.0, -1.0], atol=1e-15)


def test_ring6_lambda2_circulant_oracle():
    # [DERIVED] circulant eigenvalues 1 - 4 eps sin^2(pi k / N)
    lam2 = build_toy("ring", 6, 0.1).spectrum.lambda2
    assert lam2 == pytest.approx(1 - 0.4 * math.sin(math.pi / 6) ** 2, abs=1e-12)


def test_ring4_gap():
    # [PAPER] table ring row: 4 sin^2(pi/N) eps
    t = build_toy("ring", 4, 0.25)
    assert 1 - t.spectrum.lambda2 == pytest.approx(0.5, abs=1e-12)


def test_star5_gap():
    # [PAPER] table star row: eps
    assert 1 - build_toy("star", 5, 0.1).spectrum.lambda2 == pytest.approx(0.1, abs=1e-12)


def test_first_eigenvector_is_normalized_ones():
    # [DERIVED] doubly stochastic W fixes 1/sqrt(N)
    sp = build_toy("ring", 7, 0.2).spectrum
    assert sp.eigenvalues[0] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(sp.eigenvectors[:, 0], np.full(7, 1 / math.sqrt(7)), atol=1e-9)


def test_single_agent_identity():
    # [DERIVED] N = 1 gives W = [1]
    rep = validate(Topology([[1.0]]))
    assert rep.valid
    assert rep.lambdaN == 1.0 and math.isnan(rep.lambda2)


# ---------------------------------------------------------------- validation


def test_validate_swap_is_bipartite():
    # [DERIVED] the 2-node swap has eigenvalues 1 and -1
    rep = validate(Topology(SWAP))
    assert rep.is_bipartite and rep.lambdaN == pytest.approx(-1.0)
    assert not rep.satisfies_eig_condition
    assert not rep.valid


def test_validate_triangle():
    # [DERIVED] odd cycle with self-loops is primitive
    rep = validate(build_toy("complete", 3))
    assert rep.satisfies_eig_condition and not rep.is_bipartite


def test_validate_never_raises_on_broken_matrix():
    # [TRIVIAL] validate reports instead of raising
    rep = validate(Topology([[0.2, 0.1], [0.5, 0.1]], check=False))
    assert not rep.is_symmetric and not rep.rows_sum_to_one and not rep.valid
    assert rep.messages


def test_validate_disconnected():
    # [TRIVIAL] W = I has no edges
    W = np.eye(3)
    rep = validate(Topology(W, check=False))
    assert not rep.is_connected


def test_even_ring_with_self_loops_is_primitive():
    # [DERIVED] self-loops break bipartiteness
    t = build_toy("ring", 4, 0.2)
    rep = validate(t)
    assert rep.is_bipartite and rep.is_primitive and rep.satisfies_eig_condition


# ---------------------------------------------------------------- factors


def test_topology_factor_complete_graph():
    # [DERIVED] lambda_2 = 0 gives Lambda_DGD = 1 and (I-W)^+ W = 0
    t = build_toy("complete", 6)
    assert topology_factor(t, "diffusion_atc") == pytest.approx(0.0, abs=1e-12)
    assert topology_factor(t, "dgd") == pytest.approx(1.0, abs=1e-12)


def test_topology_factor_ring4():
    # [DERIVED] hand spectrum of the 4-ring
    assert topology_factor(build_toy("ring", 4, 0.25), "dgd") == pytest.approx(2.0, abs=1e-12)


def test_topology_factor_degenerate():
    # [DERIVED] lambda_2 = 1 has no finite factor
    # gamma this small pushes lambda_2 within the degeneracy margin of 1
    t = scale_consensus(build_toy("ring", 5, 0.1), 1e-11)
    with pytest.raises(errors.DegenerateTopologyError):
        topology_factor(t, "dgd")


def test_topology_factor_gd_rejected():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        topology_factor(build_toy("ring", 5, 0.1), "gd")


def test_consensus_pinv_properties():
    # [DERIVED] Moore-Penrose identities
    t = build_toy("line", 5, 0.3)
    P = consensus_pinv(t)
    M = np.eye(5) - t.weights
    np.testing.assert_allclose(M @ P @ M, M, atol=1e-12)
    np.testing.assert_allclose(P @ np.ones(5), 0.0, atol=1e-12)
    assert pinv_weight_norm(t) == pytest.approx(np.linalg.norm(P @ t.weights, 2), rel=1e-10)


# ---------------------------------------------------------------- consensus shaping


def test_scale_consensus_identity():
    # [DERIVED] gamma = 1 leaves W unchanged
    t = build_toy("ring", 5, 0.1)
    assert scale_consensus(t, 1.0) is t


def test_scale_consensus_swap_half():
    # [DERIVED] direct 2x2 arithmetic
    t = scale_consensus(Topology(SWAP), 0.5)
    np.testing.assert_allclose(t.weights, [[0.5, 0.5], [0.5, 0.5]])
    assert t.spectrum.lambdaN == pytest.approx(0.0, abs=1e-15)


def test_scale_consensus_repairs_bipartite():
    # [DERIVED] lambda_N = -1 maps to 1 - 2 gamma > -1
    t = scale_consensus(Topology(SWAP), 0.25)
    assert t.spectrum.lambdaN == pytest.approx(0.5)
    assert validate(t).satisfies_eig_condition


@pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
def test_scale_consensus_domain(gamma):
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        scale_consensus(Topology(SWAP), gamma)


def test_combine_rounds_single():
    # [DERIVED] alpha = (1,) gives W itself
    t = build_toy("ring", 5, 0.2)
    assert combine_rounds(t, [1.0]) == t


def test_combine_rounds_square():
    # [DERIVED] alpha = (0, 1) gives W^2
    t = build_toy("ring", 6, 0.3)
    sq = combine_rounds(t, [0.0, 1.0])
    lam = t.spectrum.eigenvalues
    second = sorted(np.abs(sq.spectrum.eigenvalues))[-2]
    assert second == pytest.approx(max(lam[1] ** 2, lam[-1] ** 2), abs=1e-12)


def test_combine_rounds_ring4_half_half():
    # [DERIVED] spectral mapping lambda -> 0.5 lambda + 0.5 lambda^2
    t = build_toy("ring", 4, 0.25)
    lam2 = t.spectrum.lambda2
    assert combine_rounds(t, [0.5, 0.5]).spectrum.lambda2 == pytest.approx(0.5 * lam2 + 0.5 * lam2**2, abs=1e-12)


def test_combine_rounds_bad_weights():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        combine_rounds(build_toy("ring", 4, 0.25), [0.5, 0.6])


# ---------------------------------------------------------------- link failures


def test_link_all_success_is_w(rng):
    # [DERIVED] p = 1 removes all randomness
    t = build_toy("ring", 5, 0.2)
    m = LinkFailureModel.uniform(5, 1.0, "known")
    for _ in range(5):
        np.testing.assert_array_equal(sample_link_failure(t, m, rng), t.weights)
    np.testing.assert_allclose(expected_Q(t, m), t.weights, atol=1e-15)


def test_link_expected_q_two_nodes():
    # [DERIVED] direct arithmetic: off-diagonal p W = 0.25, diagonal 1 - 0.25
    t = build_toy("complete", 2)
    m = LinkFailureModel.uniform(2, 0.5, "known")
    np.testing.assert_allclose(expected_Q(t, m), [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)


def test_link_known_two_nodes_values(rng):
    # [DERIVED] hand arithmetic on two nodes
    # known mode subtracts the expected incoming mass: Q_11 = 1 - 0.25 = 0.75 whatever happens
    t = build_toy("complete", 2)
    m = LinkFailureModel.uniform(2, 0.5, "known")
    seen = set()
    for _ in range(200):
        Q = sample_link_failure(t, m, rng)
        assert Q[0, 1] in (0.0, 0.5)
        assert Q[0, 0] == pytest.approx(0.75)
        seen.add(Q[0, 1])
    assert seen == {0.0, 0.5}


def test_link_unknown_all_fail_is_identity(rng):
    # [DERIVED] no successful links leaves Q = I
    t = build_toy("ring", 5, 0.2)
    W = t.weights
    p = np.eye(5)  # only self links "succeed"; off-diagonal links always fail
    Q = draw_link_matrices(W, p, LinkMode.UNKNOWN, rng)
    np.testing.assert_allclose(Q, np.eye(5), atol=1e-15)


def test_link_unknown_rows_sum_exactly(rng):
    # [DERIVED] diagonal repair with the realized mass
    t = build_toy("ring", 6, 0.3)
    m = LinkFailureModel.uniform(6, 0.6, "unknown")
    for _ in range(200):
        Q = sample_link_failure(t, m, rng)
        assert np.max(np.abs(Q.sum(axis=1) - 1.0)) <= 1e-15


def test_link_rejects_bipartite_swap(rng):
    # [TRIVIAL] input validation
    with pytest.raises(errors.TopologyValidityError):
        sample_link_failure(Topology(SWAP), LinkFailureModel.uniform(2, 0.5), rng)


def test_link_rejects_zero_probability_on_support(rng):
    # [TRIVIAL] input validation
    t = build_toy("ring", 4, 0.2)
    p = np.ones((4, 4))
    p[0, 1] = p[1, 0] = 0.0
    with pytest.raises(errors.DomainError):
        sample_link_failure(t, LinkFailureModel(p, "known"), rng)


def test_link_model_validation():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        LinkFailureModel(np.array([[1.0, 0.3], [0.4, 1.0]]))
    with pytest.raises(errors.DomainError):
        LinkFailureModel(np.array([[1.0, 1.3], [1.3, 1.0]]))


def test_link_variance_coefficients():
    # [PAPER] N/4 for known and N/2 for unknown diagonals
    t = build_toy("ring", 6, 0.3)
    known = link_noise_variance_bound(t, LinkFailureModel.uniform(6, 0.7, "known"))
    unknown = link_noise_variance_bound(t, LinkFailureModel.uniform(6, 0.7, "unknown"))
    assert known.coefficient == 6 / 4 and unknown.coefficient == 6 / 2
    assert known.tighter_sum <= known.coefficient and unknown.tighter_sum <= unknown.coefficient
    assert link_noise_variance_bound(t, LinkFailureModel.uniform(6, 1.0, "known")).tighter_sum == 0.0


def test_link_monte_carlo_mean(rng):
    # [DERIVED] Bernoulli mean p W off the diagonal
    t = build_toy("ring", 5, 0.3)
    m = LinkFailureModel.uniform(5, 0.7, "unknown")
    Qs = draw_link_matrices(t.weights, m.success_probs, m.mode, rng, 20000)
    mean = Qs.mean(axis=0)
    se = Qs.std(axis=0, ddof=1) / math.sqrt(Qs.shape[0])
    assert np.all(np.abs(mean - expected_Q(t, m)) <= 4 * se + 1e-15)


def test_batched_draw_matches_sequential():
    # [TRIVIAL] batching does not change the stream
    t = build_toy("ring", 5, 0.3)
    m = LinkFailureModel.uniform(5, 0.5, "known")
    a = draw_link_matrices(t.weights, m.success_probs, m.mode, np.random.default_rng(1), 3)
    r = np.random.default_rng(1)
    b = np.stack([draw_link_matrices(t.weights, m.success_probs, m.mode, r) for _ in range(3)])
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- JSON


def test_json_round_trip():
    # [TRIVIAL] serialization
    t = build_toy("star", 5, 0.2)
    assert topology_from_json(topology_to_json(t)) == t
    assert topology_from_json({"kind": "star", "n": 5, "epsilon": 0.2}) == t
    assert topology_from_json({"n": 5, "edges": [[0, 1], [0, 2], [0, 3], [0, 4]], "epsilon": 0.2}) == t


def test_json_errors():
    # [TRIVIAL] input validation
    with pytest.raises(errors.DomainError):
        topology_from_json({"n": 3})
    with pytest.raises(errors.DomainError):
        topology_from_json({"n": 3, "weights": SWAP})


# ---------------------------------------------------------------- properties


@st.composite
def random_graphs(draw):
    n = draw(st.integers(2, 9))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    A = random_connected_adjacency(rng, n, draw(st.floats(0.0, 1.0)))
    kmax = A.sum(axis=1).max()
    eps = draw(st.floats(0.05, 0.95)) / kmax
    return from_laplacian(A, eps)


@given(random_graphs())
def test_prop_invariants(t):
    # [DERIVED] symmetric, stochastic, exact eigendecomposition
    W = t.weights
    assert np.max(np.abs(W.sum(axis=1) - 1)) <= 1e-12
    assert np.max(np.abs(W - W.T)) <= 1e-12
    sp = t.spectrum
    assert np.all(np.diff(sp.eigenvalues) <= 1e-15)
    assert np.linalg.norm(sp.reconstruct() - W, 2) <= 1e-9
    assert validate(t).valid


@given(random_graphs())
def test_prop_diffusion_factor_at_most_twice_dgd(t):
    # [DERIVED] |lambda/(1-lambda)| <= 1/(1-lambda_2)
    assert topology_factor(t, "diffusion_atc") <= 2 * topology_factor(t, "dgd") * (1 + 1e-12)
    # the comparison without the factor 2: ||(I-W)^+ W|| <= 1/(1 - lambda_2)
    assert pinv_weight_norm(t) <= topology_factor(t, "dgd") * (1 + 1e-12)


@given(random_graphs(), st.floats(0.01, 1.0))
def test_prop_scale_consensus_spectrum(t, gamma):
    # [DERIVED] spectral mapping lambda -> 1 - gamma + gamma lambda
    s = scale_consensus(t, gamma)
    np.testing.assert_allclose(
        s.spectrum.eigenvalues, np.sort(1 - gamma + gamma * t.spectrum.eigenvalues)[::-1], atol=1e-10
    )


@given(random_graphs(), st.integers(0, 2**32 - 1))
def test_prop_expected_q_monotone(t, seed):
    # [DERIVED] E[Q] shifts by a Laplacian-type PSD term
    # lowering one success probability adds a PSD increment to E[Q]
    rng = np.random.default_rng(seed)
    n = t.n_agents
    p = rng.uniform(0.2, 1.0, size=(n, n))
    p = np.triu(p, 1)
    p = p + p.T + np.eye(n)
    i, j = np.argwhere(np.triu(t.weights, 1) > 0)[rng.integers(0, np.count_nonzero(np.triu(t.weights, 1) > 0))]
    q = p.copy()
    q[i, j] = q[j, i] = p[i, j] * rng.uniform(0.1, 0.9)
    for mode in ("known", "unknown"):
        diff = expected_Q(t, LinkFailureModel(q, mode)) - expected_Q(t, LinkFailureModel(p, mode))
        assert np.min(np.linalg.eigvalsh(diff)) >= -1e-10
        e = np.zeros(n)
        e[i], e[j] = 1, -1
        np.testing.assert_allclose(diff, (p[i, j] - q[i, j]) * t.weights[i, j] * np.outer(e, e), atol=1e-14)
