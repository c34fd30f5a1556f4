"""Update maps for GD, DGD, diffusion and federated averaging.

Iterates are stacked as ``X`` with shape ``(N, d)``: row n is agent n's
parameter vector. Every map also accepts leading batch axes, i.e.
``(P, N, d)``, so independent Monte Carlo paths can be advanced together.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bounds import contraction_factor
from .errors import CapabilityError, ConvergenceError, DomainError, StepSizeError
from .objectives import ObjectiveEnsemble, OptimumReport, grad_stack, sample_stochastic_grad, solve_optimum
from .topology import (
    LinkFailureModel,
    Topology,
    build_toy,
    combine_rounds,
    draw_link_matrices,
    sample_link_failure,
    scale_consensus,
)
from .variants import Variant, parse_variant

__all__ = [
    "StepKind",
    "StepSchedule",
    "AlgorithmConfig",
    "NoiseKind",
    "NoiseDistribution",
    "NoiseConfig",
    "Trace",
    "CounterexampleResult",
    "PathGenerators",
    "synthetic_noise",
    "step",
    "run",
    "fixed_point",
    "nc3t_counterexample",
    "DIVERGENCE_GUARD",
]

DIVERGENCE_GUARD = 1e150
FIXED_POINT_MAX_ITERS = 10_000_000


class StepKind(str, enum.Enum):
    CONSTANT = "constant"
    INVERSE_TIME = "inverse_time"


@dataclass(frozen=True)
class StepSchedule:
    """Constant step ``eta`` or ``eta_t = eta0 / (t/tau + 1)``."""

    kind: StepKind
    eta: float
    tau: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StepKind(getattr(self.kind, "value", self.kind)))
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise DomainError(f"step size must be positive, got {self.eta}")
        if self.kind is StepKind.INVERSE_TIME:
            if self.tau is None or not self.tau > 0:
                raise DomainError(f"tau must be positive, got {self.tau}")

    @classmethod
    def constant(cls, eta: float) -> "StepSchedule":
        return cls(StepKind.CONSTANT, float(eta))

    @classmethod
    def inverse_time(cls, eta0: float, tau: float) -> "StepSchedule":
        return cls(StepKind.INVERSE_TIME, float(eta0), float(tau))

    @property
    def is_constant(self) -> bool:
        return self.kind is StepKind.CONSTANT

    def at(self, t: int) -> float:
        if self.kind is StepKind.CONSTANT:
            return self.eta
        return self.eta / (t / self.tau + 1.0)

    def to_json(self) -> dict:
        if self.is_constant:
            return {"kind": "constant", "eta": self.eta}
        return {"kind": "inverse_time", "eta0": self.eta, "tau": self.tau}


@dataclass(frozen=True)
class AlgorithmConfig:
    """Variant, step schedule, local updates T and consensus shaping.

    ``consensus_rounds`` holds ``alpha`` for ``W' = sum_k alpha_k W^k``;
    ``consensus_gamma`` then blends ``(1 - gamma) I + gamma W'``.
    """

    variant: Variant
    step: StepSchedule
    local_updates: int = 1
    consensus_gamma: float = 1.0
    consensus_rounds: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", parse_variant(self.variant))
        T = int(self.local_updates)
        if T < 1 or T != self.local_updates:
            raise DomainError(f"local_updates must be a positive integer, got {self.local_updates}")
        object.__setattr__(self, "local_updates", T)
        if not (0.0 < self.consensus_gamma <= 1.0):
            raise DomainError(f"consensus_gamma must lie in (0, 1], got {self.consensus_gamma}")
        if self.consensus_rounds is not None:
            object.__setattr__(self, "consensus_rounds", tuple(float(a) for a in self.consensus_rounds))
        if not self.step.is_constant and T > 1:
            raise CapabilityError("time-varying step sizes are supported only with one local update")
        if self.variant is Variant.FEDERATED and (
            self.consensus_gamma != 1.0 or self.consensus_rounds is not None
        ):
            raise DomainError("federated averaging uses exact averaging; gamma/rounds do not apply")

    @property
    def T(self) -> int:
        return self.local_updates

    def effective_topology(self, topo: Topology | None, n_agents: int | None = None) -> Topology | None:
        """Weight matrix actually applied in the final step (None for GD)."""
        if self.variant is Variant.GD:
            return None
        if self.variant is Variant.FEDERATED:
            n = n_agents if topo is None else topo.n_agents
            if n is None:
                raise DomainError("federated averaging needs the number of agents")
            return build_toy("complete", n) if n > 1 else Topology(np.ones((1, 1)))
        if topo is None:
            raise DomainError(f"{self.variant.value} needs a topology")
        eff = topo
        if self.consensus_rounds is not None:
            eff = combine_rounds(eff, self.consensus_rounds)
        return scale_consensus(eff, self.consensus_gamma)

    def with_step(self, step: StepSchedule) -> "AlgorithmConfig":
        return AlgorithmConfig(
            self.variant, step, self.local_updates, self.consensus_gamma, self.consensus_rounds
        )

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "step": self.step.to_json(),
            "local_updates": self.local_updates,
            "consensus_gamma": self.consensus_gamma,
            "consensus_rounds": None if self.consensus_rounds is None else list(self.consensus_rounds),
        }


class NoiseKind(str, enum.Enum):
    NONE = "none"
    GRADIENT = "gradient"
    COMMUNICATION = "communication"
    LINK_FAILURE = "link_failure"


class NoiseDistribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class NoiseConfig:
    """Noise model.

    Synthetic noise has ``E||eps||^2 = (sigma + omega ||X||)^2`` where
    ``||X||`` is the Frobenius norm of the whole network iterate.
    ``use_sampler`` draws gradient noise from the ensemble's own
    stochastic gradients instead.
    """

    kind: NoiseKind = NoiseKind.NONE
    sigma: float = 0.0
    omega: float = 0.0
    distribution: NoiseDistribution = NoiseDistribution.GAUSSIAN
    use_sampler: bool = False
    link_model: LinkFailureModel | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NoiseKind(getattr(self.kind, "value", self.kind)))
        object.__setattr__(
            self, "distribution", NoiseDistribution(getattr(self.distribution, "value", self.distribution))
        )
        if self.sigma < 0 or self.omega < 0:
            raise DomainError("sigma and omega must be nonnegative")
        if self.kind is NoiseKind.LINK_FAILURE and self.link_model is None:
            raise DomainError("link-failure noise needs a LinkFailureModel")
        if self.use_sampler and self.kind is not NoiseKind.GRADIENT:
            raise DomainError("use_sampler applies only to gradient noise")

    @classmethod
    def none(cls) -> "NoiseConfig":
        return cls()

    @classmethod
    def gradient(cls, sigma: float, omega: float = 0.0, distribution: str = "gaussian") -> "NoiseConfig":
        return cls(NoiseKind.GRADIENT, sigma, omega, NoiseDistribution(distribution))

    @classmethod
    def sampler(cls) -> "NoiseConfig":
        return cls(NoiseKind.GRADIENT, use_sampler=True)

    @classmethod
    def communication(cls, sigma: float, omega: float = 0.0, distribution: str = "gaussian") -> "NoiseConfig":
        return cls(NoiseKind.COMMUNICATION, sigma, omega, NoiseDistribution(distribution))

    @classmethod
    def link_failure(cls, model: LinkFailureModel) -> "NoiseConfig":
        return cls(NoiseKind.LINK_FAILURE, link_model=model)

    @property
    def is_random(self) -> bool:
        return self.kind is not NoiseKind.NONE

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.kind in (NoiseKind.GRADIENT, NoiseKind.COMMUNICATION):
            if self.use_sampler:
                out["source"] = "sampler"
            else:
                out.update(sigma=self.sigma, omega=self.omega, distribution=self.distribution.value)
        if self.kind is NoiseKind.LINK_FAILURE:
            out["mode"] = self.link_model.mode.value
            out["success_probs"] = self.link_model.success_probs.tolist()
        return out


class PathGenerators:
    """One generator per batched path, behind the ``Generator`` methods the maps use.

    Draws for a batch of shape ``(P, ...)`` are taken path by path, so path
    p consumes exactly the stream an unbatched run seeded like generator p
    would. This keeps per-trial seeding while stepping P paths together.
    """

    def __init__(self, generators):
        self.generators = list(generators)
        if not self.generators:
            raise DomainError("need at least one generator")

    @classmethod
    def from_seeds(cls, seeds) -> "PathGenerators":
        return cls(np.random.default_rng(s) for s in seeds)

    def __len__(self) -> int:
        return len(self.generators)

    def _split(self, size) -> tuple:
        size = (size,) if np.ndim(size) == 0 else tuple(size)
        if not size or size[0] != len(self.generators):
            raise DomainError(f"batched draw of shape {size} does not lead with {len(self.generators)} paths")
        return size[1:]

    def standard_normal(self, size):
        rest = self._split(size)
        return np.stack([g.standard_normal(rest) for g in self.generators])

    def random(self, size):
        rest = self._split(size)
        return np.stack([g.random(rest) for g in self.generators])

    def integers(self, low, high=None, size=None):
        rest = self._split(size)
        return np.stack([g.integers(low, high, size=rest) for g in self.generators])


def synthetic_noise(
    X: np.ndarray,
    sigma: float,
    omega: float,
    distribution: NoiseDistribution | str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero-mean noise with ``E[||eps||^2 | X] = (sigma + omega ||X||)^2``.

    Norms are taken over the trailing ``(N, d)`` axes. The Rademacher
    option attains the second moment on every draw.
    """
    X = np.asarray(X, dtype=float)
    size = X.shape[-2] * X.shape[-1]
    scale = sigma + omega * np.sqrt(np.sum(X * X, axis=(-2, -1), keepdims=True))
    if NoiseDistribution(getattr(distribution, "value", distribution)) is NoiseDistribution.RADEMACHER:
        z = rng.integers(0, 2, size=X.shape) * 2.0 - 1.0
    else:
        z = rng.standard_normal(X.shape)
    return scale * z / math.sqrt(size)


class _Kernel:
    """One configured update map; built once per run."""

    def __init__(
        self,
        cfg: AlgorithmConfig,
        topo: Topology | None,
        ens: ObjectiveEnsemble,
        noise: NoiseConfig,
    ):
        v = cfg.variant
        if noise.kind is NoiseKind.LINK_FAILURE:
            if v in (Variant.GD, Variant.FEDERATED):
                raise DomainError(f"link failures do not apply to {v.value}")
            if cfg.consensus_rounds is not None:
                raise DomainError("link failures cannot be combined with multi-round mixing")
            if topo is None or topo.n_agents != ens.n_agents:
                raise DomainError("link failures need a topology matching the ensemble")
            # validate once (nonnegative, non-bipartite, probabilities on the support)
            sample_link_failure(topo, noise.link_model, np.random.default_rng(0))
            self._link_p = noise.link_model.success_probs
        if noise.kind is NoiseKind.COMMUNICATION and v is Variant.GD:
            raise DomainError("GD has no communication step to perturb")
        if noise.use_sampler and not ens.has_sampler:
            raise CapabilityError("ensemble has no stochastic gradient sampler")
        eff = cfg.effective_topology(topo, ens.n_agents)
        if eff is not None and eff.n_agents != ens.n_agents:
            raise DomainError(f"topology has {eff.n_agents} agents, ensemble has {ens.n_agents}")
        self.cfg = cfg
        self.variant = v
        self.base = topo
        self.eff = eff
        self.W = None if eff is None else eff.weights
        self.ens = ens
        self.noise = noise
        self.gamma = cfg.consensus_gamma

    def _grad(self, X: np.ndarray, rng) -> np.ndarray:
        nz = self.noise
        if nz.kind is not NoiseKind.GRADIENT:
            return grad_stack(self.ens, X)
        if nz.use_sampler:
            return sample_stochastic_grad(self.ens, X, rng)[0]
        return grad_stack(self.ens, X) + synthetic_noise(X, nz.sigma, nz.omega, nz.distribution, rng)

    def _mixing(self, X: np.ndarray, rng) -> np.ndarray:
        if self.noise.kind is not NoiseKind.LINK_FAILURE:
            return self.W
        batch = X.shape[:-2]
        N = X.shape[-2]
        W = self.base.weights
        mode = self.noise.link_model.mode
        if batch:
            Qs = draw_link_matrices(W, self._link_p, mode, rng, int(np.prod(batch))).reshape(batch + (N, N))
        else:
            Qs = draw_link_matrices(W, self._link_p, mode, rng)
        return (1.0 - self.gamma) * np.eye(N) + self.gamma * Qs

    def advance(self, X: np.ndarray, t: int, rng) -> np.ndarray:
        eta = self.cfg.step.at(t)
        for _ in range(self.cfg.local_updates - 1):
            X = X - eta * self._grad(X, rng)
        v = self.variant
        if v is Variant.GD:
            return X - eta * self._grad(X, rng)
        W = self._mixing(X, rng)
        if v is Variant.DGD:
            out = W @ X - eta * self._grad(X, rng)
        elif v is Variant.DIFFUSION_ATC:
            out = W @ (X - eta * self._grad(X, rng))
        elif v is Variant.DIFFUSION_CTA:
            Y = W @ X
            out = Y - eta * self._grad(Y, rng)
        else:
            local = X - eta * self._grad(X, rng)
            out = W @ local
        if self.noise.kind is NoiseKind.COMMUNICATION:
            nz = self.noise
            out = out + self.gamma * synthetic_noise(X, nz.sigma, nz.omega, nz.distribution, rng)
        return out


def _check_X(ens: ObjectiveEnsemble, X: Any) -> np.ndarray:
    X = np.array(X, dtype=float)
    if X.ndim == 1 and ens.dim == 1:
        X = X[:, None]
    if X.ndim < 2 or X.shape[-2:] != (ens.n_agents, ens.dim):
        raise DomainError(f"iterate shape {X.shape} does not end in (N, d) = ({ens.n_agents}, {ens.dim})")
    return X


def step(
    X: Any,
    t: int,
    cfg: AlgorithmConfig,
    topo: Topology | None,
    ens: ObjectiveEnsemble,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One outer iteration: T-1 local gradient steps, then the variant's final step.

    ========  ==================================================
    GD        ``X - eta grad f(X)``
    DGD       ``W X - eta grad f(X)``
    ATC       ``W (X - eta grad f(X))``
    CTA       ``W X - eta grad f(W X)``
    Federated ``(11^T/N)(X - eta grad f(X))``
    ========  ==================================================

    ``W`` is the effective matrix after rounds and consensus scaling, or
    ``(1 - gamma) I + gamma Q_t`` under link failures.
    """
    noise = noise or NoiseConfig()
    X = _check_X(ens, X)
    if noise.is_random and rng is None:
        raise DomainError("a random generator is required for noisy updates")
    return _Kernel(cfg, topo, ens, noise).advance(X, t, rng)


@dataclass(frozen=True)
class Trace:
    """Iterates and error metrics of one run (or a batch of paths).

    Metric arrays have shape ``(n+1,)`` or ``(n+1, P)`` for P batched
    paths. ``dist_to_fixed`` is NaN when the run has no fixed point
    (time-varying step or step outside the contraction regime).
    """

    iterates: np.ndarray | None
    dist_to_fixed: np.ndarray
    dist_to_opt: np.ndarray
    consensus_residual: np.ndarray
    diverged: bool
    seed: int | None
    config: dict
    x_hat: np.ndarray | None = None
    x_star: np.ndarray | None = None
    notes: tuple[str, ...] = field(default=())

    @property
    def n_steps(self) -> int:
        return self.dist_to_opt.shape[0] - 1

    def csv_text(self) -> str:
        """CSV with columns t, dist_to_fixed, dist_to_opt, consensus_residual.

        Batched traces are reduced to the RMS over paths.
        """
        cols = [self.dist_to_fixed, self.dist_to_opt, self.consensus_residual]
        if cols[0].ndim > 1:
            cols = [np.sqrt(np.mean(c**2, axis=1)) for c in cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "dist_to_fixed", "dist_to_opt", "consensus_residual"])
        for t in range(cols[0].shape[0]):
            w.writerow([t] + [repr(float(c[t])) for c in cols])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def iterates_json(self) -> str:
        if self.iterates is None:
            raise CapabilityError("iterates were not stored")
        return json.dumps({"seed": self.seed, "config": self.config, "iterates": self.iterates.tolist()})


def _fro(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(X * X, axis=(-2, -1)))


def run(
    X0: Any,
    n_iters: int,
    cfg: AlgorithmConfig,
    topo: Topology | None,
    ens: ObjectiveEnsemble,
    noise: NoiseConfig | None = None,
    rng: np.random.Generator | None = None,
    *,
    seed: int | None = None,
    store_iterates: bool = True,
    x_hat: np.ndarray | None = None,
    optimum: OptimumReport | None = None,
) -> Trace:
    """Iterate :func:`step` ``n_iters`` times and record error metrics.

    Parameters
    ----------
    X0 : array_like
        Initial iterate ``(N, d)`` or a batch ``(P, N, d)``.
    rng, seed :
        Noisy runs need randomness; pass a generator or a seed.
    x_hat, optimum :
        Precomputed noise-free fixed point / optimum (computed if omitted).

    The run stops early with ``diverged=True`` once any entry exceeds
    ``DIVERGENCE_GUARD``; metric arrays are then truncated.
    """
    noise = noise or NoiseConfig()
    X = _check_X(ens, X0)
    if rng is None and seed is not None:
        rng = np.random.default_rng(seed)
    if noise.is_random and rng is None:
        raise DomainError("noisy runs need a seed or a generator")
    kernel = _Kernel(cfg, topo, ens, noise)
    notes: list[str] = []
    opt = optimum or solve_optimum(ens)
    x_star_stack = opt.X_star
    if x_hat is None and cfg.step.is_constant:
        try:
            x_hat, _ = fixed_point(cfg, topo, ens)
        except (StepSizeError, ConvergenceError) as exc:
            notes.append(f"no fixed point: {exc}")
            x_hat = None
    elif not cfg.step.is_constant:
        notes.append("time-varying step: distance to a fixed point is undefined")

    n_iters = int(n_iters)
    iters = [X] if store_iterates else None
    d_fix = [_fro(X - x_hat) if x_hat is not None else np.full(X.shape[:-2], np.nan)]
    d_opt = [_fro(X - x_star_stack)]
    cons = [_fro(X - X.mean(axis=-2, keepdims=True))]
    diverged = False
    for t in range(n_iters):
        X = kernel.advance(X, t, rng)
        if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > DIVERGENCE_GUARD:
            diverged = True
            notes.append(f"divergence guard tripped at t={t + 1}")
            break
        if store_iterates:
            iters.append(X)
        d_fix.append(_fro(X - x_hat) if x_hat is not None else np.full(X.shape[:-2], np.nan))
        d_opt.append(_fro(X - x_star_stack))
        cons.append(_fro(X - X.mean(axis=-2, keepdims=True)))
    return Trace(
        iterates=None if iters is None else np.stack(iters),
        dist_to_fixed=np.array(d_fix, dtype=float),
        dist_to_opt=np.array(d_opt, dtype=float),
        consensus_residual=np.array(cons, dtype=float),
        diverged=diverged,
        seed=seed,
        config={"algorithm": cfg.to_json(), "noise": noise.to_json()},
        x_hat=x_hat,
        x_star=opt.x_star,
        notes=tuple(notes),
    )


def _regime_check(cfg: AlgorithmConfig, eff: Topology | None, ens: ObjectiveEnsemble) -> None:
    lam_n = None if eff is None else eff.spectrum.lambdaN
    spec = contraction_factor(cfg.variant, cfg.step.eta, ens.mu, ens.L, lam_n, T=cfg.T)
    if not spec.valid:
        raise StepSizeError(f"update map is not a contraction: {spec.violated}", spec.violated)


def fixed_point(
    cfg: AlgorithmConfig,
    topo: Topology | None,
    ens: ObjectiveEnsemble,
    tol: float = 1e-12,
    *,
    max_iters: int = FIXED_POINT_MAX_ITERS,
) -> tuple[np.ndarray, float]:
    """Fixed point of the noise-free map by contraction iteration.

    Iteration starts from 0. For quadratic ensembles the map is affine;
    its matrix is recovered by probing and the linear solve is used as a
    warm start, after which the iteration certifies the residual.

    Returns
    -------
    x_hat : ndarray, shape (N, d)
    residual : float
        ``||phi(x_hat) - x_hat||``, at most ``tol``.
    """
    if not cfg.step.is_constant:
        raise DomainError("fixed points are defined for constant step sizes only")
    kernel = _Kernel(cfg, topo, ens, NoiseConfig())
    _regime_check(cfg, kernel.eff, ens)
    N, d = ens.n_agents, ens.dim
    X = np.zeros((N, d))
    if ens.is_quadratic:
        X = _affine_solve(kernel, N, d)
    for _ in range(int(max_iters)):
        Y = kernel.advance(X, 0, None)
        res = float(np.linalg.norm(Y - X))
        if res <= tol:
            return X, res
        X = Y
    raise ConvergenceError(f"fixed-point iteration did not reach tol={tol} in {max_iters} steps")


def _affine_solve(kernel: _Kernel, N: int, d: int) -> np.ndarray:
    n = N * d
    probes = np.vstack([np.zeros((1, n)), np.eye(n)]).reshape(n + 1, N, d)
    images = kernel.advance(probes, 0, None).reshape(n + 1, n)
    offset = images[0]
    M = (images[1:] - offset).T
    try:
        x = np.linalg.solve(np.eye(n) - M, offset)
    except np.linalg.LinAlgError:
        return np.zeros((N, d))
    return x.reshape(N, d)


@dataclass(frozen=True)
class CounterexampleResult:
    """Monte Carlo estimate of ``E[x_t^2]`` with its standard error."""

    mean_sq: np.ndarray
    stderr: np.ndarray
    paths: int


def nc3t_counterexample(
    n_iters: int,
    paths: int = 100_000,
    rng: np.random.Generator | None = None,
    *,
    c: float = 0.5,
    omega: float = math.sqrt(3.0) / 2.0,
    sigma: float = 1.0,
    x0: float = 0.0,
) -> CounterexampleResult:
    """Scalar noisy contraction ``x+ = c x + eps`` with two-point noise.

    ``eps = +-(sigma + omega |x|)`` with equal probability, so the noise
    has zero mean and second moment exactly ``(sigma + omega|x|)^2``.
    With the defaults ``c^2 + omega^2 = 1`` and ``E[x_t^2]`` grows at
    least linearly.
    """
    rng = rng or np.random.default_rng(0)
    x = np.full(int(paths), float(x0))
    mean_sq = np.empty(int(n_iters) + 1)
    stderr = np.empty(int(n_iters) + 1)
    for t in range(int(n_iters) + 1):
        sq = x * x
        mean_sq[t] = sq.mean()
        stderr[t] = sq.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
        if t == n_iters:
            break
        sign = rng.integers(0, 2, size=x.size) * 2.0 - 1.0
        x = c * x + sign * (sigma + omega * np.abs(x))
    return CounterexampleResult(mean_sq=mean_sq, stderr=stderr, paths=int(paths))
