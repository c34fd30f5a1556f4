"""Consensus weight matrices.

Construction (toy graphs, Laplacian weights), validation, spectra, the
topology factor, consensus step-size scaling, multi-round mixing and
random link failures.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .errors import (
    DegenerateTopologyError,
    DomainError,
    NumericalError,
    StepSizeError,
    TopologyValidityError,
)
from .variants import Variant, parse_variant

__all__ = [
    "ToyKind",
    "LinkMode",
    "Topology",
    "SpectrumReport",
    "ValidityReport",
    "LinkFailureModel",
    "LinkNoiseBound",
    "build_toy",
    "from_laplacian",
    "from_edges",
    "validate",
    "spectrum",
    "topology_factor",
    "consensus_pinv",
    "pinv_weight_norm",
    "scale_consensus",
    "combine_rounds",
    "sample_link_failure",
    "draw_link_matrices",
    "expected_Q",
    "link_noise_variance_bound",
    "topology_to_json",
    "topology_from_json",
]

SYMMETRY_TOL = 1e-12
ROW_SUM_TOL = 1e-12
SUPPORT_TOL = 1e-14
EIG_MARGIN = 1e-10
PINV_CUTOFF = 1e-10


class ToyKind(str, enum.Enum):
    COMPLETE = "complete"
    STAR = "star"
    LINE = "line"
    RING = "ring"


class LinkMode(str, enum.Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SpectrumReport:
    """Eigen-decomposition of a symmetric weight matrix.

    Eigenvalues are sorted in descending order and each eigenvector
    column has its first nonzero entry positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def lambda2(self) -> float:
        """Second largest eigenvalue (NaN for a single agent)."""
        if self.eigenvalues.size < 2:
            return float("nan")
        return float(self.eigenvalues[1])

    @property
    def lambdaN(self) -> float:
        return float(self.eigenvalues[-1])

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.eigenvalues) @ U.T


@dataclass(frozen=True)
class ValidityReport:
    is_symmetric: bool
    rows_sum_to_one: bool
    is_connected: bool
    satisfies_eig_condition: bool
    is_nonnegative: bool
    is_bipartite: bool
    is_primitive: bool
    lambda2: float
    lambdaN: float
    messages: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return (
            self.is_symmetric
            and self.rows_sum_to_one
            and self.is_connected
            and self.satisfies_eig_condition
        )


def _support(W: np.ndarray) -> np.ndarray:
    A = np.abs(W) > SUPPORT_TOL
    np.fill_diagonal(A, False)
    return A


def _is_connected(W: np.ndarray) -> bool:
    if W.shape[0] <= 1:
        return True
    ncomp, _ = connected_components(csr_matrix(_support(W)), directed=False)
    return ncomp == 1


def _is_two_colorable(A: np.ndarray) -> bool:
    n = A.shape[0]
    graph = csr_matrix(A)
    color = np.full(n, -1)
    for start in range(n):
        if color[start] >= 0:
            continue
        order, pred = breadth_first_order(graph, start, directed=False, return_predecessors=True)
        color[start] = 0
        for v in order[1:]:
            color[v] = 1 - color[pred[v]]
    i, j = np.nonzero(A)
    return not np.any(color[i] == color[j])


def _invariant_problems(W: np.ndarray) -> list[str]:
    problems = []
    asym = float(np.max(np.abs(W - W.T))) if W.size else 0.0
    if asym > SYMMETRY_TOL:
        problems.append(f"weights not symmetric (max |W - W^T| = {asym:.3e})")
    rows = float(np.max(np.abs(W.sum(axis=1) - 1.0))) if W.size else 0.0
    if rows > ROW_SUM_TOL:
        problems.append(f"rows do not sum to one (max deviation {rows:.3e})")
    if not _is_connected(W):
        problems.append("off-diagonal support graph is disconnected")
    return problems


class Topology:
    """Symmetric N x N consensus weight matrix with a lazily cached spectrum.

    Parameters
    ----------
    weights : array_like
        Square weight matrix. Entries may be negative.
    check : bool, optional
        Enforce symmetry, unit row sums and connectivity. Disable only to
        diagnose a broken matrix with :func:`validate`.
    """

    def __init__(self, weights: Any, *, check: bool = True):
        W = np.array(weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
            raise DomainError(f"weights must be a non-empty square matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise DomainError("weights contain non-finite entries")
        if check:
            problems = _invariant_problems(W)
            if problems:
                raise TopologyValidityError("; ".join(problems))
        W.setflags(write=False)
        self._weights = W

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def n_agents(self) -> int:
        return self._weights.shape[0]

    @cached_property
    def spectrum(self) -> SpectrumReport:
        return spectrum(self)

    def __repr__(self) -> str:
        return f"Topology(n_agents={self.n_agents})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return self._weights.shape == other._weights.shape and bool(
            np.array_equal(self._weights, other._weights)
        )

    __hash__ = None  # type: ignore[assignment]


def _max_degree(adjacency: np.ndarray) -> int:
    return int(adjacency.sum(axis=1).max()) if adjacency.size else 0


def _check_epsilon(epsilon: float | None, kmax: int) -> float:
    if epsilon is None:
        raise StepSizeError("epsilon is required for Laplacian weights", "epsilon > 0")
    epsilon = float(epsilon)
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise StepSizeError(f"epsilon must be positive, got {epsilon}", "epsilon > 0")
    if kmax > 0 and epsilon >= 1.0 / kmax:
        raise StepSizeError(
            f"epsilon={epsilon} violates epsilon < 1/k_max = {1.0 / kmax:.6g}",
            f"epsilon < 1/k_max (k_max={kmax})",
        )
    return epsilon


def from_laplacian(adjacency: Any, epsilon: float) -> Topology:
    """Laplacian weights ``W = I - epsilon * L``.

    Parameters
    ----------
    adjacency : array_like
        Symmetric 0/1 matrix with zero diagonal.
    epsilon : float
        Must satisfy ``0 < epsilon < 1/k_max`` (Gershgorin bound on the
        Laplacian spectrum).
    """
    A = np.array(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise DomainError(f"adjacency must be a non-empty square matrix, got shape {A.shape}")
    if not np.all((A == 0) | (A == 1)):
        raise DomainError("adjacency entries must be 0 or 1")
    if not np.array_equal(A, A.T):
        raise DomainError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise DomainError("adjacency must have a zero diagonal")
    if not _is_connected(A):
        raise TopologyValidityError("graph is disconnected")
    eps = _check_epsilon(epsilon, _max_degree(A))
    L = np.diag(A.sum(axis=1)) - A
    return Topology(np.eye(A.shape[0]) - eps * L)


def from_edges(n: int, edges: Sequence[Sequence[int]], epsilon: float) -> Topology:
    """Laplacian weights from a 0-based undirected edge list."""
    n = int(n)
    if n < 1:
        raise DomainError(f"n must be positive, got {n}")
    A = np.zeros((n, n))
    for edge in edges:
        if len(edge) != 2:
            raise DomainError(f"edge {edge!r} must have two endpoints")
        i, j = int(edge[0]), int(edge[1])
        if not (0 <= i < n and 0 <= j < n):
            raise DomainError(f"edge {edge!r} out of range for n={n}")
        if i == j:
            raise DomainError(f"self-loop {edge!r} not allowed")
        A[i, j] = A[j, i] = 1.0
    return from_laplacian(A, epsilon)


def _toy_adjacency(kind: ToyKind, n: int) -> np.ndarray:
    A = np.zeros((n, n))
    if kind is ToyKind.STAR:
        A[0, 1:] = A[1:, 0] = 1.0
    elif kind is ToyKind.LINE:
        idx = np.arange(n - 1)
        A[idx, idx + 1] = A[idx + 1, idx] = 1.0
    elif kind is ToyKind.RING:
        idx = np.arange(n)
        A[idx, (idx + 1) % n] = A[(idx + 1) % n, idx] = 1.0
    else:
        A[:] = 1.0
        np.fill_diagonal(A, 0.0)
    return A


def build_toy(kind: ToyKind | str, n: int, epsilon: float | None = None) -> Topology:
    """Toy topologies: complete graph, star, line or ring.

    The complete graph is returned as ``11^T/N`` (epsilon ignored); the
    others use Laplacian weights and need ``epsilon < 1/k_max``.
    """
    try:
        kind = ToyKind(str(getattr(kind, "value", kind)).lower())
    except ValueError:
        raise DomainError(f"unknown toy topology {kind!r}") from None
    n = int(n)
    if n < 2:
        raise DomainError(f"toy topologies need n >= 2, got {n}")
    if kind is ToyKind.COMPLETE:
        return Topology(np.full((n, n), 1.0 / n))
    if kind is ToyKind.RING and n < 3:
        raise DomainError("a ring needs n >= 3 (n=2 is a line)")
    return from_laplacian(_toy_adjacency(kind, n), epsilon)


def spectrum(t: Topology) -> SpectrumReport:
    """Descending eigenvalues and sign-normalized eigenvectors of W."""
    W = t.weights
    try:
        vals, vecs = np.linalg.eigh(0.5 * (W + W.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            vecs[:, k] = -col
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return SpectrumReport(eigenvalues=vals, eigenvectors=vecs)


def validate(t: Topology) -> ValidityReport:
    """Diagnose a weight matrix. Never raises."""
    W = t.weights
    n = t.n_agents
    msgs: list[str] = []
    asym = float(np.max(np.abs(W - W.T)))
    is_sym = asym <= SYMMETRY_TOL
    if not is_sym:
        msgs.append(f"not symmetric: max |W - W^T| = {asym:.3e}")
    row_dev = float(np.max(np.abs(W.sum(axis=1) - 1.0)))
    rows_ok = row_dev <= ROW_SUM_TOL
    if not rows_ok:
        msgs.append(f"rows do not sum to one: max deviation {row_dev:.3e}")
    connected = _is_connected(W)
    if not connected:
        msgs.append("off-diagonal support graph is disconnected")
    nonneg = bool(np.all(W >= 0))
    bipartite = _is_two_colorable(_support(W))
    self_loops = bool(np.any(np.abs(np.diag(W)) > SUPPORT_TOL))
    primitive = nonneg and connected and (not bipartite or self_loops)

    try:
        spec = spectrum(t)
        lam2, lamN = spec.lambda2, spec.lambdaN
    except NumericalError as exc:
        msgs.append(str(exc))
        lam2 = lamN = float("nan")
    if n == 1:
        eig_ok = bool(np.isfinite(lamN))
    else:
        eig_ok = bool(lam2 < 1.0 - EIG_MARGIN and lamN > -1.0 + EIG_MARGIN)
        if not lam2 < 1.0 - EIG_MARGIN:
            msgs.append(f"lambda_2 = {lam2:.12g} is not below 1: no spectral gap")
        if not lamN > -1.0 + EIG_MARGIN:
            msgs.append(
                f"lambda_N = {lamN:.12g} <= -1: DGD is not a contraction for any step size"
            )
    if bipartite:
        msgs.append("off-diagonal support graph is bipartite")
    return ValidityReport(
        is_symmetric=is_sym,
        rows_sum_to_one=rows_ok,
        is_connected=connected,
        satisfies_eig_condition=eig_ok,
        is_nonnegative=nonneg,
        is_bipartite=bipartite,
        is_primitive=primitive,
        lambda2=lam2,
        lambdaN=lamN,
        messages=tuple(msgs),
    )


def _nontrivial_modes(t: Topology) -> tuple[np.ndarray, np.ndarray]:
    spec = t.spectrum
    keep = np.abs(1.0 - spec.eigenvalues) > PINV_CUTOFF
    return spec.eigenvalues[keep], spec.eigenvectors[:, keep]


def consensus_pinv(t: Topology) -> np.ndarray:
    """Pseudoinverse ``(I - W)^+`` computed from the spectrum."""
    lam, U = _nontrivial_modes(t)
    return (U / (1.0 - lam)) @ U.T


def pinv_weight_norm(t: Topology) -> float:
    """Spectral norm of ``(I - W)^+ W``."""
    lam, _ = _nontrivial_modes(t)
    if lam.size == 0:
        return 0.0
    return float(np.max(np.abs(lam / (1.0 - lam))))


def topology_factor(t: Topology, variant: Variant | str) -> float:
    """Topology factor: ``1/(1 - lambda_2)`` for DGD, ``2 ||(I-W)^+ W||`` for diffusion."""
    v = parse_variant(variant)
    if v is Variant.GD:
        raise DomainError("GD has no topology factor")
    if t.n_agents == 1:
        return 0.0
    lam2 = t.spectrum.lambda2
    if not lam2 < 1.0 - EIG_MARGIN:
        raise DegenerateTopologyError(f"lambda_2 = {lam2:.12g} >= 1")
    if v is Variant.DGD:
        return 1.0 / (1.0 - lam2)
    return 2.0 * pinv_weight_norm(t)


def scale_consensus(t: Topology, gamma: float) -> Topology:
    """Consensus step size: ``W' = (1 - gamma) I + gamma W``."""
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f"consensus step size must lie in (0, 1], got {gamma}")
    if gamma == 1.0:
        return t
    n = t.n_agents
    return Topology((1.0 - gamma) * np.eye(n) + gamma * t.weights)


def combine_rounds(t: Topology, alphas: Sequence[float]) -> Topology:
    """Multi-round mixing ``W' = sum_k alpha_k W^k`` (k starting at 1)."""
    a = np.asarray(alphas, dtype=float).ravel()
    if a.size == 0:
        raise DomainError("at least one round weight is required")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise DomainError("round weights must be finite and nonnegative")
    if abs(a.sum() - 1.0) > 1e-12:
        raise DomainError(f"round weights must sum to 1, got {a.sum()!r}")
    W = t.weights
    power = W.copy()
    out = a[0] * power
    for alpha in a[1:]:
        power = power @ W
        out = out + alpha * power
    return Topology(0.5 * (out + out.T))


# ---------------------------------------------------------------------------
# link failures


@dataclass(frozen=True)
class LinkFailureModel:
    """Independent per-link transmission successes.

    Parameters
    ----------
    success_probs : array_like
        Symmetric matrix ``p`` where ``p[n, m]`` is the probability that
        the transmission from agent ``m`` to agent ``n`` succeeds. The
        diagonal is the self-link; :meth:`uniform` sets it to 1.
    mode : LinkMode
        ``KNOWN`` subtracts the expected incoming mass on the diagonal,
        ``UNKNOWN`` the realized one.
    """

    success_probs: np.ndarray
    mode: LinkMode = LinkMode.KNOWN

    def __post_init__(self) -> None:
        p = np.array(self.success_probs, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise DomainError(f"success probabilities must be square, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise DomainError("success probabilities must lie in [0, 1]")
        if np.max(np.abs(p - p.T)) > SYMMETRY_TOL:
            raise DomainError("success probabilities must be symmetric")
        p.setflags(write=False)
        object.__setattr__(self, "success_probs", p)
        object.__setattr__(self, "mode", LinkMode(getattr(self.mode, "value", self.mode)))

    @classmethod
    def uniform(cls, n: int, p: float, mode: LinkMode | str = LinkMode.KNOWN) -> "LinkFailureModel":
        probs = np.full((n, n), float(p))
        np.fill_diagonal(probs, 1.0)
        return cls(probs, LinkMode(getattr(mode, "value", mode)))


@dataclass(frozen=True)
class LinkNoiseBound:
    coefficient: float
    tighter_sum: float


def _check_link_model(t: Topology, model: LinkFailureModel) -> tuple[np.ndarray, np.ndarray]:
    W = t.weights
    p = model.success_probs
    if p.shape != W.shape:
        raise DomainError(f"success probabilities shape {p.shape} does not match {W.shape}")
    if np.any(p[_support(W)] <= 0):
        raise DomainError("success probabilities must be positive on the support of W")
    report = validate(t)
    if not (report.is_nonnegative and report.is_primitive):
        raise TopologyValidityError(
            "link-failure analysis needs a nonnegative, non-bipartite weight matrix"
        )
    return W, p


def sample_link_failure(
    t: Topology, model: LinkFailureModel, rng: np.random.Generator
) -> np.ndarray:
    """Draw one realized mixing matrix Q.

    Off-diagonal entries are ``W[n, m]`` or 0. The diagonal is repaired
    with the expected (``KNOWN``) or realized (``UNKNOWN``) incoming
    mass. In ``UNKNOWN`` mode every row sums to one; in ``KNOWN`` mode
    only the expectation does.
    """
    W, p = _check_link_model(t, model)
    return draw_link_matrices(W, p, model.mode, rng)


def draw_link_matrices(
    W: np.ndarray, p: np.ndarray, mode: LinkMode, rng: np.random.Generator, count: int | None = None
) -> np.ndarray:
    """Unchecked sampler behind :func:`sample_link_failure`.

    Returns one ``(N, N)`` matrix, or ``(count, N, N)`` when ``count`` is
    given (same random stream as ``count`` sequential draws).
    """
    shape = W.shape if count is None else (int(count),) + W.shape
    S = np.where(rng.random(shape) < p, W, 0.0)
    diag = np.arange(W.shape[0])
    Q = S.copy()
    off = S.copy()
    off[..., diag, diag] = 0.0
    if LinkMode(mode) is LinkMode.UNKNOWN:
        Q[..., diag, diag] = 1.0 - off.sum(axis=-1)
    else:
        expected = p * W
        expected[diag, diag] = 0.0
        Q[..., diag, diag] = 1.0 - expected.sum(axis=1) + (S[..., diag, diag] - p[diag, diag] * W[diag, diag])
    return Q


def expected_Q(t: Topology, model: LinkFailureModel) -> np.ndarray:
    """Mean of the realized mixing matrix (identical for both modes)."""
    W, p = _check_link_model(t, model)
    EQ = p * W
    diag = np.arange(W.shape[0])
    EQ[diag, diag] = 0.0
    EQ[diag, diag] = 1.0 - EQ.sum(axis=1)
    return EQ


def link_noise_variance_bound(t: Topology, model: LinkFailureModel) -> LinkNoiseBound:
    """Bounds on ``E||(Q - E[Q]) x||^2 / ||x||^2``.

    Returns the loose coefficient (N/4 known, N/2 unknown) and the
    exact intermediate sum it majorizes.
    """
    W, p = _check_link_model(t, model)
    var = p * (1.0 - p) * W**2
    n = W.shape[0]
    if model.mode is LinkMode.KNOWN:
        return LinkNoiseBound(coefficient=n / 4.0, tighter_sum=float(var.sum()))
    off = var.copy()
    np.fill_diagonal(off, 0.0)
    return LinkNoiseBound(coefficient=n / 2.0, tighter_sum=float(2.0 * off.sum()))


# ---------------------------------------------------------------------------
# serialization


def topology_to_json(t: Topology) -> dict:
    return {"n": t.n_agents, "weights": t.weights.tolist()}


def topology_from_json(obj: dict, *, check: bool = True) -> Topology:
    """Build a topology from one of the JSON forms.

    Accepted keys: ``{"n", "weights"}``, ``{"n", "edges", "epsilon"}``
    or ``{"kind", "n", "epsilon"}`` for toy graphs.
    """
    if not isinstance(obj, dict):
        raise DomainError("topology JSON must be an object")
    if "weights" in obj:
        W = np.array(obj["weights"], dtype=float)
        if "n" in obj and W.shape != (int(obj["n"]), int(obj["n"])):
            raise DomainError(f"weights shape {W.shape} does not match n={obj['n']}")
        return Topology(W, check=check)
    if "edges" in obj:
        if "epsilon" not in obj:
            raise DomainError("edge-list topology needs an 'epsilon'")
        return from_edges(obj["n"], obj["edges"], obj["epsilon"])
    if "kind" in obj:
        return build_toy(obj["kind"], obj["n"], obj.get("epsilon"))
    raise DomainError("topology JSON needs 'weights', 'edges' or 'kind'")
