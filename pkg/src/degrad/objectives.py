"""Strongly convex, smooth local objectives and agent ensembles.

All objectives carry exact (mu, L) certificates. Gradients accept
arrays with arbitrary leading batch axes, i.e. ``x`` of shape
``(..., d)``.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .errors import (
    CapabilityError,
    CertificationError,
    ConvergenceError,
    DegenerateObjectiveError,
    DomainError,
)

__all__ = [
    "LocalObjective",
    "QuadraticObjective",
    "LinearRegressionObjective",
    "LogCoshObjective",
    "ObjectiveEnsemble",
    "OptimumReport",
    "HeterogeneityReport",
    "MhtKernel",
    "make_quadratic",
    "make_linear_regression",
    "make_logcosh",
    "random_quadratic",
    "grad_stack",
    "solve_optimum",
    "heterogeneity",
    "mht_kernel",
    "sample_stochastic_grad",
    "ensemble_to_json",
    "ensemble_from_json",
]

MAX_SOLVER_ITERS = 10_000_000


class LocalObjective(abc.ABC):
    """A mu-strongly convex, L-smooth function on R^d."""

    dim: int
    mu: float
    L: float

    @abc.abstractmethod
    def value(self, x: np.ndarray) -> np.ndarray | float: ...

    @abc.abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    @property
    def has_hessian(self) -> bool:
        return False

    def hessian(self, x: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no Hessian")

    @property
    def has_sampler(self) -> bool:
        return False

    def stochastic_gradient(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no stochastic gradient sampler")

    @property
    def is_quadratic(self) -> bool:
        return False

    def minimizer(self, tol: float = 1e-10) -> np.ndarray:
        """Unconstrained minimizer by GD at the optimal constant step."""
        return _gd_minimize(self.gradient, self.mu, self.L, np.zeros(self.dim), tol)


def _gd_minimize(grad, mu: float, L: float, x0: np.ndarray, tol: float) -> np.ndarray:
    eta = 2.0 / (L + mu)
    x = np.array(x0, dtype=float)
    for _ in range(MAX_SOLVER_ITERS):
        g = grad(x)
        if np.linalg.norm(g) <= tol:
            return x
        x = x - eta * g
    raise ConvergenceError(f"gradient descent did not reach tol={tol} in {MAX_SOLVER_ITERS} steps")


class QuadraticObjective(LocalObjective):
    """``f(x) = x^T H x / 2 + g^T x + const`` with SPD curvature ``H``."""

    def __init__(self, curvature: Any, linear: Any = None, const: float = 0.0):
        H = np.atleast_2d(np.array(curvature, dtype=float))
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise DomainError(f"curvature must be square, got shape {H.shape}")
        if not np.all(np.isfinite(H)) or np.max(np.abs(H - H.T)) > 1e-12 * max(1.0, np.abs(H).max()):
            raise DomainError("curvature must be finite and symmetric")
        H = 0.5 * (H + H.T)
        eig = np.linalg.eigvalsh(H)
        if eig[0] <= 0:
            raise DomainError(f"curvature is not positive definite (min eigenvalue {eig[0]:.3e})")
        d = H.shape[0]
        g = np.zeros(d) if linear is None else np.array(linear, dtype=float).reshape(-1)
        if g.shape != (d,):
            raise DomainError(f"linear term has length {g.size}, expected {d}")
        H.setflags(write=False)
        g.setflags(write=False)
        self.curvature = H
        self.linear = g
        self.const = float(const)
        self.dim = d
        self.mu = float(eig[0])
        self.L = float(eig[-1])

    @property
    def is_quadratic(self) -> bool:
        return True

    @property
    def has_hessian(self) -> bool:
        return True

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum((x @ self.curvature) * x, axis=-1) + x @ self.linear + self.const

    def gradient(self, x):
        return np.asarray(x, dtype=float) @ self.curvature + self.linear

    def hessian(self, x):
        return np.array(self.curvature)

    def minimizer(self, tol: float = 1e-10) -> np.ndarray:
        return np.linalg.solve(self.curvature, -self.linear)


class LinearRegressionObjective(QuadraticObjective):
    """Mean squared residual ``mean_i (y_i - a_i^T x)^2 + ridge ||x||^2``.

    The stochastic gradient samples one data point uniformly.
    """

    def __init__(self, features: Any, targets: Any, ridge: float = 0.0):
        A = np.atleast_2d(np.array(features, dtype=float))
        y = np.array(targets, dtype=float).reshape(-1)
        if A.shape[0] != y.size or y.size == 0:
            raise DomainError("features and targets must have the same, nonzero number of rows")
        ridge = float(ridge)
        if ridge < 0:
            raise DomainError("ridge must be nonnegative")
        m, d = A.shape
        H = (2.0 / m) * A.T @ A + 2.0 * ridge * np.eye(d)
        eig = np.linalg.eigvalsh(H)
        if eig[0] <= 1e-12 * max(1.0, eig[-1]):
            raise DegenerateObjectiveError(
                "Gram matrix is singular; strong convexity needs ridge > 0"
            )
        super().__init__(H, -(2.0 / m) * A.T @ y, const=float(np.mean(y**2)))
        A.setflags(write=False)
        y.setflags(write=False)
        self.features = A
        self.targets = y
        self.ridge = ridge

    @property
    def has_sampler(self) -> bool:
        return True

    def stochastic_gradient(self, x, rng):
        x = np.asarray(x, dtype=float)
        idx = rng.integers(self.targets.size, size=x.shape[:-1])
        a = self.features[idx]
        resid = np.sum(a * x, axis=-1) - self.targets[idx]
        return 2.0 * a * resid[..., None] + 2.0 * self.ridge * x


class LogCoshObjective(LocalObjective):
    """``f(x) = mu ||x||^2 / 2 + sum_j w_j log cosh(x_j - c_j)``.

    A separable non-quadratic test function with Hessian
    ``diag(mu + w_j sech^2(x_j - c_j))``, so ``L = mu + max(w)``.
    """

    def __init__(self, mu: float, weights: Any, centers: Any):
        w = np.array(weights, dtype=float).reshape(-1)
        c = np.array(centers, dtype=float).reshape(-1)
        if w.shape != c.shape or w.size == 0:
            raise DomainError("weights and centers must have the same nonzero length")
        if mu <= 0 or np.any(w < 0):
            raise DomainError("need mu > 0 and nonnegative weights")
        w.setflags(write=False)
        c.setflags(write=False)
        self.weights = w
        self.centers = c
        self.dim = w.size
        self.mu = float(mu)
        self.L = float(mu + w.max())

    @property
    def has_hessian(self) -> bool:
        return True

    def value(self, x):
        x = np.asarray(x, dtype=float)
        z = x - self.centers
        logcosh = np.logaddexp(z, -z) - np.log(2.0)
        return 0.5 * self.mu * np.sum(x * x, axis=-1) + np.sum(self.weights * logcosh, axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return self.mu * x + self.weights * np.tanh(x - self.centers)

    def hessian(self, x):
        z = np.asarray(x, dtype=float) - self.centers
        return np.diag(self.mu + self.weights / np.cosh(z) ** 2)


@dataclass(frozen=True)
class ObjectiveEnsemble:
    """N local objectives sharing the dimension d.

    The ensemble constants are ``mu = min_n mu_n`` and ``L = max_n L_n``.
    """

    locals: tuple[LocalObjective, ...]

    def __post_init__(self) -> None:
        locs = tuple(self.locals)
        if not locs:
            raise DomainError("an ensemble needs at least one agent")
        dims = {f.dim for f in locs}
        if len(dims) != 1:
            raise DomainError(f"local objectives disagree on the dimension: {sorted(dims)}")
        object.__setattr__(self, "locals", locs)

    @property
    def n_agents(self) -> int:
        return len(self.locals)

    @property
    def dim(self) -> int:
        return self.locals[0].dim

    @property
    def mu(self) -> float:
        return min(f.mu for f in self.locals)

    @property
    def L(self) -> float:
        return max(f.L for f in self.locals)

    @property
    def is_quadratic(self) -> bool:
        return all(f.is_quadratic for f in self.locals)

    @property
    def has_sampler(self) -> bool:
        return all(f.has_sampler for f in self.locals)

    @cached_property
    def _stacked(self) -> tuple[np.ndarray, np.ndarray]:
        H = np.stack([f.curvature for f in self.locals])
        g = np.stack([f.linear for f in self.locals])
        return H, g

    def gradient(self, X: np.ndarray) -> np.ndarray:
        return grad_stack(self, X)

    def values(self, X: np.ndarray) -> np.ndarray:
        """Per-agent values ``f_n(X[n])``; shape ``(..., N)``."""
        X = _check_stack(self, X)
        return np.stack([f.value(X[..., n, :]) for n, f in enumerate(self.locals)], axis=-1)


def _check_stack(e: ObjectiveEnsemble, X: Any) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim < 2 or X.shape[-2:] != (e.n_agents, e.dim):
        raise DomainError(
            f"iterate shape {X.shape} does not end in (N, d) = ({e.n_agents}, {e.dim})"
        )
    return X


def grad_stack(e: ObjectiveEnsemble, X: Any) -> np.ndarray:
    """Stacked local gradients: row n is ``grad f_n(X[n])``.

    ``X`` has shape ``(..., N, d)``.
    """
    X = _check_stack(e, X)
    if e.is_quadratic:
        H, g = e._stacked
        if e.dim == 1:
            return X * H[:, :, 0] + g
        return np.einsum("...nd,nde->...ne", X, H) + g
    out = np.empty_like(X)
    for n, f in enumerate(e.locals):
        out[..., n, :] = f.gradient(X[..., n, :])
    return out


@dataclass(frozen=True)
class OptimumReport:
    x_star: np.ndarray
    grad_at_opt: np.ndarray
    local_minimizers: np.ndarray

    @property
    def X_star(self) -> np.ndarray:
        """The optimum replicated on every agent, shape (N, d)."""
        return np.tile(self.x_star, (self.grad_at_opt.shape[0], 1))

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad_at_opt))


def solve_optimum(e: ObjectiveEnsemble, tol: float = 1e-10) -> OptimumReport:
    """Global minimizer of ``F = sum_n f_n / N`` plus per-agent minimizers.

    Quadratic ensembles are solved in closed form; anything else by GD
    with step ``2/(L + mu)``.
    """
    N = e.n_agents
    if e.is_quadratic:
        H, g = e._stacked
        Hs, gs = H.sum(axis=0), g.sum(axis=0)
        x = np.linalg.solve(Hs, -gs)
        x = x - np.linalg.solve(Hs, Hs @ x + gs)  # one refinement step
        local = np.stack([f.minimizer() for f in e.locals])
    else:

        def global_grad(x):
            return grad_stack(e, np.tile(x, (N, 1))).mean(axis=0)

        x = _gd_minimize(global_grad, e.mu, e.L, np.zeros(e.dim), tol)
        local = np.stack([f.minimizer(tol) for f in e.locals])
    G = grad_stack(e, np.tile(x, (N, 1)))
    return OptimumReport(x_star=x, grad_at_opt=G, local_minimizers=local)


@dataclass(frozen=True)
class HeterogeneityReport:
    grad_norm: float
    dist: float
    gap: float
    bounds_ok: bool


def heterogeneity(e: ObjectiveEnsemble, optimum: OptimumReport | None = None) -> HeterogeneityReport:
    """Three heterogeneity measures and a check of their sandwich bounds.

    Returns ``||grad f(x*)||``, ``||X* - X*_loc||`` and
    ``f(X*) - f(X*_loc)`` where f is the component-wise sum.
    """
    opt = optimum or solve_optimum(e)
    X_star = opt.X_star
    g = opt.grad_norm
    dist = float(np.linalg.norm(X_star - opt.local_minimizers))
    f_star = e.values(X_star)
    f_loc = e.values(opt.local_minimizers)
    gap = float(np.sum(f_star - f_loc))
    mu, L = e.mu, e.L
    rel = 1e-8
    abs_tol = 1e-12 * (1.0 + float(np.sum(np.abs(f_star))))
    ok = (
        g / L <= dist * (1 + rel) + 1e-12
        and dist <= g / mu * (1 + rel) + 1e-12
        and g * g / (2 * L) <= gap * (1 + rel) + abs_tol
        and gap <= g * g / (2 * mu) * (1 + rel) + abs_tol
    )
    return HeterogeneityReport(grad_norm=g, dist=dist, gap=gap, bounds_ok=bool(ok))


@dataclass(frozen=True)
class MhtKernel:
    """Symmetric matrix A with ``A a = b`` and spectrum in ``[mu, L]``."""

    a: np.ndarray
    b: np.ndarray
    alpha: float
    matrix: np.ndarray


PARALLEL_TOL = 1e-12
CERT_SLACK = 1e-9


def mht_kernel(f: LocalObjective, x: Any, y: Any) -> MhtKernel:
    """Mean-Hessian kernel between two points.

    With ``a = y - x`` and ``b = grad f(y) - grad f(x)``, returns
    ``A = mu P_perp + (1/alpha) P`` where P projects onto ``u = b - mu a``
    and ``alpha = a^T u / b^T u``. When ``b`` is parallel to ``a`` the
    kernel is ``(||b|| / ||a||) I``.

    Raises
    ------
    CertificationError
        If ``||b||`` falls outside ``[mu ||a||, L ||a||]``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != (f.dim,) or y.shape != (f.dim,):
        raise DomainError(f"points must have length {f.dim}")
    a = y - x
    na = float(np.linalg.norm(a))
    if na == 0.0:
        raise DomainError("kernel needs distinct points")
    b = f.gradient(y) - f.gradient(x)
    nb = float(np.linalg.norm(b))
    mu, L = f.mu, f.L
    if nb < mu * na * (1 - CERT_SLACK) or nb > L * na * (1 + CERT_SLACK):
        raise CertificationError(
            f"||b||/||a|| = {nb / na:.12g} outside [mu, L] = [{mu:.12g}, {L:.12g}]"
        )
    m = a.size
    resid = b - (b @ a) / (na * na) * a
    if np.linalg.norm(resid) <= PARALLEL_TOL * nb:
        scale = nb / na
        return MhtKernel(a=a, b=b, alpha=1.0 / scale, matrix=scale * np.eye(m))
    u = b - mu * a
    alpha = float((a @ u) / (b @ u))
    P = np.outer(u, u) / (u @ u)
    A = mu * (np.eye(m) - P) + P / alpha
    return MhtKernel(a=a, b=b, alpha=alpha, matrix=0.5 * (A + A.T))


def sample_stochastic_grad(
    e: ObjectiveEnsemble, X: Any, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One stochastic gradient per agent.

    Returns
    -------
    noisy_grad, noise : ndarray
        Sampled gradients and their deviation from :func:`grad_stack`.
    """
    X = _check_stack(e, X)
    missing = [n for n, f in enumerate(e.locals) if not f.has_sampler]
    if missing:
        raise CapabilityError(f"agents {missing} have no stochastic gradient sampler")
    noisy = np.empty_like(X)
    for n, f in enumerate(e.locals):
        noisy[..., n, :] = f.stochastic_gradient(X[..., n, :], rng)
    return noisy, noisy - grad_stack(e, X)


# ---------------------------------------------------------------------------
# constructors


def _per_agent_matrix(c: Any, d: int) -> np.ndarray:
    arr = np.array(c, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(d)
    return arr


def make_quadratic(
    curvatures: Sequence[Any],
    linear_terms: Sequence[Any] | None = None,
    *,
    centers: Sequence[Any] | None = None,
) -> ObjectiveEnsemble:
    """Quadratic ensemble.

    Parameters
    ----------
    curvatures : sequence
        One SPD matrix (or positive scalar, meaning a multiple of the
        identity) per agent.
    linear_terms : sequence, optional
        Per-agent ``g_n`` in ``f_n(x) = x^T H_n x / 2 + g_n^T x``.
    centers : sequence, optional
        Alternative to ``linear_terms``: ``f_n(x) = (x - c_n)^T H_n (x - c_n) / 2``.
    """
    if linear_terms is not None and centers is not None:
        raise DomainError("give either linear_terms or centers, not both")
    curvatures = list(curvatures)
    N = len(curvatures)
    extra = linear_terms if linear_terms is not None else centers
    if extra is not None:
        extra = [np.atleast_1d(np.array(v, dtype=float)) for v in extra]
        if len(extra) != N:
            raise DomainError(f"expected {N} per-agent vectors, got {len(extra)}")
    d = None
    for c in curvatures:
        if np.ndim(c) == 2:
            d = np.shape(c)[0]
            break
    if d is None:
        d = extra[0].size if extra is not None else 1
    locs = []
    for n, c in enumerate(curvatures):
        H = _per_agent_matrix(c, d)
        if centers is not None:
            cn = extra[n]
            locs.append(QuadraticObjective(H, -H @ cn, 0.5 * cn @ H @ cn))
        else:
            locs.append(QuadraticObjective(H, None if extra is None else extra[n]))
    return ObjectiveEnsemble(tuple(locs))


def _split_rows(rows: Any) -> tuple[np.ndarray, np.ndarray]:
    rows = list(rows)
    if rows and isinstance(rows[0], tuple) and len(rows[0]) == 2 and np.ndim(rows[0][0]) >= 1:
        A = np.array([np.atleast_1d(r[0]) for r in rows], dtype=float)
        y = np.array([r[1] for r in rows], dtype=float)
        return A, y
    M = np.atleast_2d(np.array(rows, dtype=float))
    if M.shape[1] < 2:
        raise DomainError("regression rows need at least one feature and a target")
    return M[:, :-1], M[:, -1]


def make_linear_regression(data: Sequence[Any], ridge: float = 0.0) -> ObjectiveEnsemble:
    """Linear-regression ensemble.

    Parameters
    ----------
    data : sequence
        Per agent, either a list of ``(feature_vector, target)`` pairs or
        an array of rows ``[feature..., target]``.
    ridge : float
        Coefficient of ``ridge * ||x||^2``.
    """
    locs = []
    for rows in data:
        A, y = _split_rows(rows)
        locs.append(LinearRegressionObjective(A, y, ridge))
    return ObjectiveEnsemble(tuple(locs))


def make_logcosh(mus: Sequence[float], weights: Sequence[Any], centers: Sequence[Any]) -> ObjectiveEnsemble:
    return ObjectiveEnsemble(
        tuple(LogCoshObjective(m, w, c) for m, w, c in zip(mus, weights, centers, strict=True))
    )


def random_quadratic(
    rng: np.random.Generator,
    n_agents: int,
    dim: int = 1,
    mu: float = 1.0,
    L: float = 4.0,
    spread: float = 1.0,
) -> ObjectiveEnsemble:
    """Random heterogeneous quadratic ensemble with spectra in ``[mu, L]``.

    Agent 0 has ``mu`` and agent ``N-1`` has ``L`` in its spectrum, so the
    ensemble constants are exactly ``(mu, L)``.
    """
    curv = []
    for n in range(n_agents):
        s = rng.uniform(mu, L, size=dim)
        if n == 0:
            s[0] = mu
        if n == n_agents - 1:
            s[-1] = L
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        curv.append((Q * s) @ Q.T)
    lin = [spread * rng.standard_normal(dim) for _ in range(n_agents)]
    return make_quadratic(curv, lin)


# ---------------------------------------------------------------------------
# serialization


def ensemble_to_json(e: ObjectiveEnsemble) -> dict:
    kinds = {type(f) for f in e.locals}
    if kinds == {LinearRegressionObjective}:
        ridges = {f.ridge for f in e.locals}
        if len(ridges) != 1:
            raise DomainError("JSON form needs a common ridge")
        return {
            "kind": "linreg",
            "ridge": ridges.pop(),
            "agents": [
                {"rows": np.column_stack([f.features, f.targets]).tolist()} for f in e.locals
            ],
        }
    if kinds == {QuadraticObjective}:
        return {
            "kind": "quadratic",
            "agents": [
                {"curvature": f.curvature.tolist(), "linear": f.linear.tolist(), "const": f.const}
                for f in e.locals
            ],
        }
    if kinds == {LogCoshObjective}:
        return {
            "kind": "logcosh",
            "agents": [
                {"mu": f.mu, "weights": f.weights.tolist(), "centers": f.centers.tolist()}
                for f in e.locals
            ],
        }
    raise DomainError("mixed or unsupported objective kinds cannot be serialized")


def ensemble_from_json(obj: dict) -> ObjectiveEnsemble:
    """Inverse of :func:`ensemble_to_json`.

    Quadratic agents may give ``"linear"`` or ``"center"``; curvatures
    may be scalars.
    """
    if not isinstance(obj, dict) or "kind" not in obj:
        raise DomainError("objective JSON needs a 'kind'")
    agents = obj.get("agents")
    if not isinstance(agents, list) or not agents:
        raise DomainError("objective JSON needs a non-empty 'agents' list")
    kind = obj["kind"]
    if kind == "quadratic":
        d = None
        for a in agents:
            if np.ndim(a["curvature"]) == 2:
                d = len(a["curvature"])
                break
            for key in ("linear", "center"):
                if key in a:
                    d = np.atleast_1d(a[key]).size
        d = d or 1
        locs = []
        for a in agents:
            H = _per_agent_matrix(a["curvature"], d)
            if "center" in a:
                c = np.atleast_1d(np.array(a["center"], dtype=float))
                locs.append(QuadraticObjective(H, -H @ c, 0.5 * c @ H @ c))
            else:
                locs.append(QuadraticObjective(H, a.get("linear"), a.get("const", 0.0)))
        return ObjectiveEnsemble(tuple(locs))
    if kind == "linreg":
        return make_linear_regression([a["rows"] for a in agents], obj.get("ridge", 0.0))
    if kind == "logcosh":
        return make_logcosh(
            [a["mu"] for a in agents], [a["weights"] for a in agents], [a["centers"] for a in agents]
        )
    raise DomainError(f"unknown objective kind {kind!r}")
