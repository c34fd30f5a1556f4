"""Closed-form convergence bounds and error envelopes.

Everything here is a pure function of plain numbers (or a Topology for
the spectral quantities). Envelopes are small callables ``t -> bound``
that accept scalars or integer arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergenceConditionError, DomainError, NumericalError, StepSizeError
from .topology import Topology, pinv_weight_norm, topology_factor
from .variants import Variant, parse_variant

__all__ = [
    "Regime",
    "ContractionSpec",
    "GapBound",
    "Envelope",
    "TimeVaryingEnvelope",
    "BoundReport",
    "EnvelopeKind",
    "contraction_factor",
    "fixed_point_gap_bound",
    "nc3t_dhat",
    "nc3t_envelope",
    "noise_free_envelope",
    "gradient_noise_envelope",
    "comm_noise_envelope",
    "multi_t_gradient_noise_envelope",
    "total_error_envelope",
    "time_varying_envelope",
    "aux_distance_check",
    "SECOND_ORDER_THRESHOLD",
    "SECOND_ORDER_SLACK",
]

SECOND_ORDER_THRESHOLD = 0.1
SECOND_ORDER_SLACK = 10.0


class Regime(str, enum.Enum):
    LOWER = "lower"
    UPPER = "upper"


@dataclass(frozen=True)
class ContractionSpec:
    """Contraction factor of one outer iteration and its step-size regime.

    Attributes
    ----------
    factor : float
        Largest factor among the T sub-maps (``c``).
    per_iteration : float
        Product of the sub-map factors; at most ``c**T``.
    eta_lower : float
        Boundary between the lower and upper step regimes.
    eta_max : float
        Admissibility threshold; the map contracts only for ``eta < eta_max``.
    """

    factor: float
    regime: Regime
    eta_max: float
    eta_lower: float
    valid: bool
    per_iteration: float
    local_factor: float
    final_factor: float
    violated: str | None = None

    @property
    def c(self) -> float:
        return self.factor


def _gd_map(eta: float, mu: float, L: float) -> tuple[float, float, float]:
    return max(1.0 - eta * mu, eta * L - 1.0), 2.0 / (L + mu), 2.0 / L


def _dgd_map(eta: float, mu: float, L: float, lam_n: float) -> tuple[float, float, float]:
    return max(1.0 - eta * mu, eta * L - lam_n), (1.0 + lam_n) / (L + mu), (1.0 + lam_n) / L


def contraction_factor(
    variant: Variant | str,
    eta: float,
    mu: float,
    L: float,
    lambda_n: float | None = None,
    *,
    T: int = 1,
    gamma: float = 1.0,
) -> ContractionSpec:
    """Contraction factor of the noise-free update map.

    Parameters
    ----------
    variant : Variant or str
    eta, mu, L : float
        Step size and the ensemble constants.
    lambda_n : float, optional
        Smallest eigenvalue of W before consensus scaling; required for DGD.
    T : int
        Local updates per outer iteration.
    gamma : float
        Consensus step size; ``lambda_n`` is mapped to ``1 - gamma + gamma*lambda_n``.

    Returns
    -------
    ContractionSpec
        ``valid`` is False (no exception) when eta is out of range.
    """
    v = parse_variant(variant)
    eta, mu, L = float(eta), float(mu), float(L)
    if not (eta > 0 and mu > 0 and L >= mu):
        raise DomainError(f"need eta > 0 and 0 < mu <= L, got eta={eta}, mu={mu}, L={L}")
    T = int(T)
    if T < 1:
        raise DomainError(f"T must be at least 1, got {T}")
    if not (0.0 < gamma <= 1.0):
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")

    c_loc, low_loc, max_loc = _gd_map(eta, mu, L)
    if v is Variant.DGD:
        if lambda_n is None:
            raise DomainError("DGD contraction needs lambda_N")
        lam = 1.0 - gamma + gamma * float(lambda_n)
        c_fin, low_fin, max_fin = _dgd_map(eta, mu, L, lam)
        thr = f"(1+lambda_N)/L = {max_fin:.6g}"
    else:
        c_fin, low_fin, max_fin = c_loc, low_loc, max_loc
        thr = f"2/L = {max_loc:.6g}"

    if T > 1:
        c = max(c_loc, c_fin)
        eta_lower = min(low_loc, low_fin)
        eta_max = min(max_loc, max_fin)
        per_iter = c_loc ** (T - 1) * c_fin
    else:
        c, eta_lower, eta_max, per_iter = c_fin, low_fin, max_fin, c_fin
    valid = c < 1.0
    regime = Regime.LOWER if eta <= eta_lower else Regime.UPPER
    violated = None if valid else f"eta = {eta:.6g} >= {thr}"
    return ContractionSpec(
        factor=float(c),
        regime=regime,
        eta_max=float(eta_max),
        eta_lower=float(eta_lower),
        valid=bool(valid),
        per_iteration=float(per_iter),
        local_factor=float(c_loc),
        final_factor=float(c_fin),
        violated=violated,
    )


@dataclass(frozen=True)
class GapBound:
    """Bound on ``||x_hat - x*||``.

    ``value`` is the eta-linear part; for T > 1 the suppressed
    O(eta^2 T^2) remainder is represented by ``slack``.
    """

    value: float
    second_order: bool
    slack: float
    Lambda: float
    formula: str

    @property
    def total(self) -> float:
        return self.value + self.slack


def fixed_point_gap_bound(
    variant: Variant | str,
    eta: float,
    T: int,
    mu: float,
    L: float,
    topo: Topology | None,
    grad_norm: float,
) -> GapBound:
    """Distance between the fixed point and the optimum.

    Parameters
    ----------
    topo : Topology
        Effective weight matrix (after consensus scaling / rounds). Not
        used for GD; ignored for federated averaging.
    grad_norm : float
        ``||grad f(x*)||`` of the stacked local gradients at the optimum.

    Raises
    ------
    StepSizeError
        If the map is not a contraction, or (diffusion, T=1)
        ``eta > 1/(L Lambda)``.
    """
    v = parse_variant(variant)
    T = int(T)
    kappa = L / mu
    g = float(grad_norm)
    if v is Variant.GD:
        spec = contraction_factor(v, eta, mu, L, T=T)
        if not spec.valid:
            raise StepSizeError(f"GD is not a contraction: {spec.violated}", spec.violated)
        return GapBound(0.0, False, 0.0, 0.0, "GD: fixed point equals the optimum")

    if v is Variant.FEDERATED:
        lam_n, Lam, K = 0.0, 0.0, 0.0
    else:
        if topo is None:
            raise DomainError("a topology is required for decentralized variants")
        lam_n = topo.spectrum.lambdaN
        Lam = topology_factor(topo, v)
        K = pinv_weight_norm(topo)
    spec = contraction_factor(v, eta, mu, L, lam_n, T=T)
    if not spec.valid:
        raise StepSizeError(f"{v.value} is not a contraction: {spec.violated}", spec.violated)

    if T == 1:
        if v.is_diffusion and Lam > 0 and eta * L * Lam > 1.0:
            ineq = f"eta*L*Lambda = {eta * L * Lam:.6g} <= 1"
            raise StepSizeError(f"diffusion gap bound requires {ineq}", ineq)
        value = eta * kappa * Lam * g
        formula = "eta*(L/mu)*Lambda*||grad f(x*)||"
        second, slack = False, 0.0
    else:
        if v is Variant.DGD:
            Lam_dgd = topology_factor(topo, Variant.DGD)
            coef = (T - 1) / 2 * kappa + (1 + kappa) * ((T - 1) * K + Lam_dgd)
            formula = "eta*[(T-1)/2*L/mu + (1+L/mu)*((T-1)*||(I-W)^+W|| + 1/(1-lambda_2))]*||grad f(x*)||"
        else:
            coef = (T - 1) / 2 * kappa + T * (1 + kappa) * K
            formula = "eta*[(T-1)/2*L/mu + T*(1+L/mu)*||(I-W)^+W||]*||grad f(x*)||"
        value = eta * coef * g
        second = eta * T * L > SECOND_ORDER_THRESHOLD
        slack = SECOND_ORDER_SLACK * (eta * T * L) ** 2 * g / mu
    if v is Variant.DIFFUSION_CTA:
        # CTA's fixed point is the ATC one after a local gradient step
        value = value + eta * (g + L * value)
        formula += " + eta*(||grad f(x*)|| + L*gap_ATC)"
    return GapBound(float(value), bool(second), float(slack), float(Lam), formula)


def nc3t_dhat(c: float, omega: float, sigma: float, M: float) -> float:
    """Asymptotic RMS radius of a noisy contraction.

    ``dhat = (omega*M + sigma) / (sqrt(1 - c^2) - omega)``, the
    nonnegative root of ``d^2 = (c^2 + omega^2) d^2 + 2 sigma' omega d + sigma'^2``
    with ``sigma' = omega*M + sigma``.
    """
    c, omega, sigma, M = float(c), float(omega), float(sigma), float(M)
    if c < 0 or omega < 0 or sigma < 0 or M < 0:
        raise DomainError("c, omega, sigma and M must be nonnegative")
    denom = math.sqrt(1.0 - c * c) - omega if c < 1.0 else -1.0
    # the denominator test catches c^2 + omega^2 rounding to just below 1
    if c * c + omega * omega >= 1.0 or denom <= 0.0:
        raise DivergenceConditionError(
            f"c^2 + omega^2 = {c * c + omega * omega:.12g} must be < 1"
        )
    return (omega * M + sigma) / denom


class EnvelopeKind(str, enum.Enum):
    NOISE_FREE = "noise_free"
    GRADIENT_NOISE = "gradient_noise"
    COMM_NOISE = "comm_noise"
    MULTI_T_GRADIENT_NOISE = "multi_t_gradient_noise"


@dataclass(frozen=True)
class Envelope:
    """``asymptote + rate**t * transient`` with ``t`` counting outer iterations."""

    kind: str
    asymptote: float
    rate: float
    transient: float
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = self.asymptote + self.rate**t * self.transient
        return float(out) if out.ndim == 0 else out


def nc3t_envelope(
    c: float, omega: float, sigma: float, M: float, n: int, dist0: float
) -> Envelope:
    """RMS distance to the fixed point under affine-variance noise.

    ``dhat + nu^(n t) * (dist0 - dhat)^+`` with ``nu^2 = c^2 + omega^2``.
    """
    dhat = nc3t_dhat(c, omega, sigma, M)
    nu = math.sqrt(c * c + omega * omega)
    return Envelope(
        kind="nc3t",
        asymptote=dhat,
        rate=nu ** int(n),
        transient=max(float(dist0) - dhat, 0.0),
        params={"c": c, "omega": omega, "sigma": sigma, "M": M, "n": n, "dhat": dhat, "nu": nu},
    )


def noise_free_envelope(per_iteration: float, dist0_fixed: float, gap: float) -> Envelope:
    """``c^(T t) ||x0 - x_hat|| + ||x_hat - x*||``."""
    if not (0 <= per_iteration < 1):
        raise StepSizeError(f"factor {per_iteration} is not a contraction", "c < 1")
    return Envelope(
        kind=EnvelopeKind.NOISE_FREE.value,
        asymptote=float(gap),
        rate=float(per_iteration),
        transient=float(dist0_fixed),
        params={"c_per_iteration": per_iteration},
    )


def _noisy_total(
    kind: str, c: float, n: int, omega_eff: float, sigma_eff: float, M: float, gap: float, dist0: float, extra: dict
) -> Envelope:
    if c * c + omega_eff**2 >= 1.0:
        ineq = f"c^2 + omega_eff^2 = {c * c + omega_eff**2:.6g} < 1"
        raise StepSizeError(f"noisy contraction condition fails: {ineq}", ineq)
    dhat = nc3t_dhat(c, omega_eff, sigma_eff, M)
    nu = math.sqrt(c * c + omega_eff**2)
    params = {"c": c, "nu": nu, "dhat": dhat, "M": M, "gap": gap, **extra}
    return Envelope(
        kind=kind,
        asymptote=dhat + gap,
        rate=nu**n,
        transient=max(dist0 + gap - dhat, 0.0),
        params=params,
    )


def gradient_noise_envelope(
    c: float,
    eta: float,
    mu: float,
    sigma: float,
    omega: float,
    M: float,
    gap: float,
    dist0_opt: float,
) -> Envelope:
    """Total error of stochastic DGD/diffusion (one local update).

    ``dhat + ||x_hat - x*|| + nu^t (||x0 - x*|| + ||x_hat - x*|| - dhat)^+``
    with noise constants scaled by eta. ``params['dhat_sqrt_eta']`` holds
    the simplified ``sqrt(eta)(omega M + sigma)/sqrt(mu)`` when it is a
    valid majorant for this eta, else None.
    """
    extra = {"eta": eta}
    env = _noisy_total(
        EnvelopeKind.GRADIENT_NOISE.value, c, 1, eta * omega, eta * sigma, M, gap, dist0_opt, extra
    )
    simple = math.sqrt(eta) * (omega * M + sigma) / math.sqrt(mu)
    env.params["dhat_sqrt_eta"] = simple if env.params["dhat"] <= simple else None
    return env


def comm_noise_envelope(
    c: float,
    gamma: float,
    sigma: float,
    omega: float,
    M: float,
    gap: float,
    dist0_opt: float,
    eta: float | None = None,
    mu: float | None = None,
) -> Envelope:
    """Total error with communication noise scaled by the consensus step gamma.

    When ``eta`` and ``mu`` are given, ``params['dhat_gamma_sqrt_eta']``
    reports the ``(gamma/sqrt(eta))(omega M + sigma)/sqrt(mu)`` form if it
    majorizes the exact radius.
    """
    env = _noisy_total(
        EnvelopeKind.COMM_NOISE.value, c, 1, gamma * omega, gamma * sigma, M, gap, dist0_opt, {"gamma": gamma}
    )
    if eta is not None and mu is not None:
        simple = gamma / math.sqrt(eta) * (omega * M + sigma) / math.sqrt(mu)
        env.params["dhat_gamma_sqrt_eta"] = simple if env.params["dhat"] <= simple else None
    return env


def multi_t_gradient_noise_envelope(
    c: float,
    T: int,
    eta: float,
    sigma: float,
    omega: float,
    gap: float,
    dist0_opt: float,
    M: float | None = None,
    x_star_norm: float | None = None,
    L: float | None = None,
) -> Envelope:
    """Total error of the noisy T-local-update iteration.

    If ``M`` (largest norm of the sub-map fixed points) is not known it is
    estimated as ``||x*|| (1 + eta T L)``.
    """
    if M is None:
        if x_star_norm is None or L is None:
            raise DomainError("need M, or x_star_norm and L to estimate it")
        M = x_star_norm * (1.0 + eta * T * L)
    return _noisy_total(
        EnvelopeKind.MULTI_T_GRADIENT_NOISE.value,
        c,
        int(T),
        eta * omega,
        eta * sigma,
        M,
        gap,
        dist0_opt,
        {"eta": eta, "T": T},
    )


_BUILDERS: dict[EnvelopeKind, Callable[..., Envelope]] = {
    EnvelopeKind.NOISE_FREE: noise_free_envelope,
    EnvelopeKind.GRADIENT_NOISE: gradient_noise_envelope,
    EnvelopeKind.COMM_NOISE: comm_noise_envelope,
    EnvelopeKind.MULTI_T_GRADIENT_NOISE: multi_t_gradient_noise_envelope,
}


def total_error_envelope(kind: EnvelopeKind | str, **params) -> Envelope:
    """Dispatch to the envelope builder for ``kind``."""
    try:
        k = EnvelopeKind(getattr(kind, "value", kind))
    except ValueError:
        raise DomainError(f"unknown envelope kind {kind!r}") from None
    return _BUILDERS[k](**params)


@dataclass(frozen=True)
class TimeVaryingEnvelope:
    """Exact envelope for the step schedule ``eta_t = eta0 / (t/tau + 1)``.

    ``tracking[t]`` bounds ``||x_t - x_hat_t||`` and ``total[t]`` bounds
    ``||x_t - x*||``.
    """

    tracking: np.ndarray
    total: np.ndarray
    decay_class: str
    params: dict

    def __call__(self, t):
        t = np.asarray(t)
        if np.any(t > self.total.size - 1) or np.any(t < 0):
            raise DomainError(f"envelope evaluated only for 0 <= t <= {self.total.size - 1}")
        out = self.total[t]
        return float(out) if out.ndim == 0 else out


def _decay_class(eta0: float, mu: float, tau: float) -> str:
    crit = 1.0 / (eta0 * mu)
    if math.isclose(tau, crit, rel_tol=1e-12):
        return "log(t)/t"
    if tau > crit:
        return "1/t"
    return f"t^-{eta0 * mu * tau:.6g}"


def time_varying_envelope(
    eta0: float,
    tau: float,
    mu: float,
    L: float,
    Lambda: float,
    grad_norm: float,
    dist0_opt: float,
    t_max: int,
    fixed0_gap: float | None = None,
    *,
    variant: Variant | str = Variant.DGD,
    lambda_n: float | None = None,
) -> TimeVaryingEnvelope:
    """Evaluate the moving-fixed-point bound exactly up to ``t_max``.

    The tracking error obeys
    ``e_{t+1} = (1 - eta_t mu) e_t + 2 (L/mu) Lambda |eta_t - eta_{t+1}| ||grad f(x*)||``
    from ``e_0 = ||x0 - x*|| + ||x_hat_0 - x*||``; the total adds
    ``eta_t (L/mu) Lambda ||grad f(x*)||``.

    Raises
    ------
    StepSizeError
        If eta0 is outside the lower step regime or
        ``eta0 L (L/mu) Lambda > 1`` (needed to bound the fixed-point drift).
    """
    v = parse_variant(variant)
    if eta0 <= 0 or tau <= 0:
        raise DomainError("eta0 and tau must be positive")
    kappa = L / mu
    lam_n = 1.0 if lambda_n is None else lambda_n
    lower = (1.0 + lam_n) / (L + mu) if v is Variant.DGD else 2.0 / (L + mu)
    if eta0 > lower:
        ineq = f"eta0 = {eta0:.6g} <= {lower:.6g}"
        raise StepSizeError(f"time-varying bound needs the lower step regime: {ineq}", ineq)
    if eta0 * L * kappa * Lambda > 1.0:
        ineq = f"eta0*L*(L/mu)*Lambda = {eta0 * L * kappa * Lambda:.6g} <= 1"
        raise StepSizeError(f"step too large for the drift bound: {ineq}", ineq)
    t = np.arange(int(t_max) + 2, dtype=float)
    eta = eta0 / (t / tau + 1.0)
    drift = 2.0 * kappa * Lambda * np.abs(eta[:-1] - eta[1:]) * grad_norm
    decay = 1.0 - eta[:-1] * mu
    g0 = eta0 * kappa * Lambda * grad_norm if fixed0_gap is None else fixed0_gap
    e = np.empty(int(t_max) + 1)
    e[0] = dist0_opt + g0
    for k in range(int(t_max)):
        e[k + 1] = decay[k] * e[k] + drift[k]
    total = e + eta[: e.size] * kappa * Lambda * grad_norm
    return TimeVaryingEnvelope(
        tracking=e,
        total=total,
        decay_class=_decay_class(eta0, mu, tau),
        params={"eta0": eta0, "tau": tau, "mu": mu, "L": L, "Lambda": Lambda},
    )


def aux_distance_check(
    topo: Topology,
    eta: float,
    variant: Variant | str,
    trials: int,
    rng: np.random.Generator,
    *,
    mu: float = 1.0,
    L: float = 4.0,
    v: np.ndarray | None = None,
) -> float:
    """Worst ratio ``||d|| / (eta (L/mu) Lambda ||v||)`` over random systems.

    Each trial draws a symmetric A with spectrum in ``[mu, L]`` (both
    endpoints attained) and a vector v orthogonal to the consensus
    direction, then solves ``(Z A + (I - W)/eta) d = -Z v``.
    """
    var = parse_variant(variant)
    if var not in (Variant.DGD, Variant.DIFFUSION_ATC, Variant.DIFFUSION_CTA):
        raise DomainError("aux_distance_check supports DGD and diffusion")
    W = topo.weights
    N = topo.n_agents
    Lam = topology_factor(topo, var)
    spec = contraction_factor(var, eta, mu, L, topo.spectrum.lambdaN)
    if not spec.valid:
        raise StepSizeError(f"step out of regime: {spec.violated}", spec.violated)
    if var.is_diffusion and eta * L * Lam > 1.0:
        ineq = f"eta*L*Lambda = {eta * L * Lam:.6g} <= 1"
        raise StepSizeError(f"diffusion needs {ineq}", ineq)
    Z = W if var.is_diffusion else np.eye(N)
    worst = 0.0
    for _ in range(int(trials)):
        s = rng.uniform(mu, L, size=N)
        s[0], s[-1] = mu, L
        Q, _ = np.linalg.qr(rng.standard_normal((N, N)))
        A = (Q * s) @ Q.T
        if v is None:
            vec = rng.standard_normal(N)
            vec -= vec.mean()
        else:
            vec = np.asarray(v, dtype=float)
        nv = np.linalg.norm(vec)
        if nv == 0.0:
            continue
        try:
            d = np.linalg.solve(Z @ A + (np.eye(N) - W) / eta, -Z @ vec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular distance system: {exc}") from exc
        bound = eta * (L / mu) * Lam * nv
        ratio = np.inf if bound == 0 and np.linalg.norm(d) > 0 else (0.0 if bound == 0 else np.linalg.norm(d) / bound)
        worst = max(worst, float(ratio))
    return worst


@dataclass(frozen=True)
class BoundReport:
    """Theoretical quantities for one configured experiment."""

    contraction: ContractionSpec
    lambda_factor: float
    fixed_point_gap: float
    gap_slack: float
    second_order: bool
    dhat: float | None
    envelope: Callable
    notes: tuple[str, ...] = ()

    def to_json(self) -> dict:
        c = self.contraction
        return {
            "c": c.factor,
            "c_per_iteration": c.per_iteration,
            "regime": c.regime.value,
            "eta_max": c.eta_max,
            "eta_lower": c.eta_lower,
            "valid": c.valid,
            "Lambda": self.lambda_factor,
            "gap": self.fixed_point_gap,
            "gap_slack": self.gap_slack,
            "second_order": self.second_order,
            "dhat": self.dhat,
            "notes": list(self.notes),
        }
