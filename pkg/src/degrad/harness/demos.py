"""Curated reproductions with fixed seeds, each ending in a pass/fail verdict."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..bounds import aux_distance_check, contraction_factor
from ..dynamics import AlgorithmConfig, NoiseConfig, StepSchedule, nc3t_counterexample, run
from ..objectives import make_linear_regression, make_quadratic, random_quadratic, sample_stochastic_grad
from ..topology import Topology, build_toy, validate
from ..variants import Variant

__all__ = ["DemoResult", "DEMOS", "run_demo"]


@dataclass
class DemoResult:
    """Outcome of one demo: named checks plus supporting numbers."""

    name: str
    checks: list[tuple[str, bool]] = field(default_factory=list)
    data: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for _, ok in self.checks)

    def check(self, label: str, ok: bool) -> None:
        self.checks.append((label, bool(ok)))

    def lines(self) -> list[str]:
        out = [f"{'PASS' if ok else 'FAIL'}  {self.name}: {label}" for label, ok in self.checks]
        out.append(f"{'PASS' if self.passed else 'FAIL'}  {self.name}")
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "checks": [{"label": lbl, "passed": ok} for lbl, ok in self.checks],
            "data": self.data,
        }


def _rel_err(measured: np.ndarray, predicted: np.ndarray) -> float:
    return float(np.max(np.abs(measured - predicted) / np.abs(predicted)))


def gd_tightness(seed: int = 0) -> DemoResult:
    """GD on ``x1^2/2 + 3 x2^2/2`` attains its contraction factor in both regimes."""
    res = DemoResult("gd-tightness")
    mu, L, n = 1.0, 3.0, 50
    ens = make_quadratic([np.diag([mu, L])])
    t = np.arange(n + 1)
    for eta, x0, label in ((0.4, [1.0, 0.0], "lower"), (0.55, [0.0, 1.0], "upper")):
        cfg = AlgorithmConfig(Variant.GD, StepSchedule.constant(eta))
        tr = run(np.array([x0]), n, cfg, None, ens)
        c = contraction_factor(Variant.GD, eta, mu, L).factor
        err = _rel_err(tr.dist_to_opt, c**t)
        res.data[f"{label}_eta"] = eta
        res.data[f"{label}_factor"] = c
        res.data[f"{label}_rel_err"] = err
        res.check(f"{label} regime eta={eta}: ||x_t - x*|| = {c:.4g}^t (rel err {err:.2e})", err <= 1e-10)
    return res


def dgd_tightness(seed: int = 0) -> DemoResult:
    """DGD on a ring with identical quadratics contracts exactly at ``|lambda_n - eta rho|``."""
    res = DemoResult("dgd-tightness")
    mu, L, n = 1.0, 3.0, 50
    topo = build_toy("ring", 6, 0.1)
    sp = topo.spectrum
    t = np.arange(n + 1)
    cases = (
        (mu, 0, 0.2, "rho=mu, x0=u_1, lower regime"),
        (L, 5, 0.45, "rho=L, x0=u_N, upper regime"),
    )
    for rho, k, eta, label in cases:
        ens = make_quadratic([rho] * 6)
        cfg = AlgorithmConfig(Variant.DGD, StepSchedule.constant(eta))
        x0 = sp.eigenvectors[:, k][:, None]
        tr = run(x0, n, cfg, topo, ens)
        factor = abs(sp.eigenvalues[k] - eta * rho)
        err = _rel_err(tr.dist_to_fixed, factor**t)
        res.data[label] = {"eta": eta, "factor": factor, "rel_err": err}
        res.check(f"{label}, eta={eta}: factor {factor:.4g} (rel err {err:.2e})", err <= 1e-10)
    return res


def bipartite_divergence(seed: int = 0) -> DemoResult:
    """A bipartite weight matrix breaks DGD; a consensus step size repairs it."""
    res = DemoResult("bipartite-divergence")
    W = np.array([[0.0, 0.5, 0.0, 0.5], [0.5, 0.0, 0.5, 0.0], [0.0, 0.5, 0.0, 0.5], [0.5, 0.0, 0.5, 0.0]])
    topo = Topology(W)
    rep = validate(topo)
    res.data["lambda_N"] = rep.lambdaN
    res.check(f"4-cycle is bipartite with lambda_N = {rep.lambdaN:.3g}", rep.is_bipartite and abs(rep.lambdaN + 1) < 1e-12)
    res.check("eigenvalue condition fails", not rep.satisfies_eig_condition)
    ens = make_quadratic([1.0, 2.0, 1.0, 2.0], centers=[[1.0], [-1.0], [2.0], [0.0]])
    eta = 0.2
    spec = contraction_factor(Variant.DGD, eta, ens.mu, ens.L, rep.lambdaN)
    res.check(f"no contraction for any eta > 0 ({spec.violated})", not spec.valid)
    u_n = topo.spectrum.eigenvectors[:, -1][:, None]
    bad = run(u_n, 200, AlgorithmConfig(Variant.DGD, StepSchedule.constant(eta)), topo, ens, store_iterates=False)
    growth = float(bad.dist_to_opt[-1] / bad.dist_to_opt[0])
    res.data["growth_200"] = growth
    res.check(f"gamma=1 trace grows by {growth:.3g} over 200 iterations", growth > 1e6)
    cfg = AlgorithmConfig(Variant.DGD, StepSchedule.constant(eta), consensus_gamma=0.5)
    good = run(u_n, 2000, cfg, topo, ens, store_iterates=False)
    res.data["gamma_half_dist_to_fixed"] = float(good.dist_to_fixed[-1])
    res.check("gamma=0.5 converges to its fixed point", good.dist_to_fixed[-1] < 1e-10)
    return res


def nc3t_counterexample_demo(seed: int = 0, paths: int = 100_000, n_iters: int = 50) -> DemoResult:
    """``x+ = x/2 + eps`` with ``c^2 + omega^2 = 1``: the mean square grows without bound."""
    res = DemoResult("nc3t-counterexample")
    out = nc3t_counterexample(n_iters, paths, np.random.default_rng(seed))
    t = np.arange(n_iters + 1)
    worst = float(np.min(out.mean_sq + 4 * out.stderr - t))
    res.data.update(paths=paths, final_mean_sq=float(out.mean_sq[-1]), worst_margin=worst)
    res.check(f"E[x_t^2] >= t within 4 standard errors for t <= {n_iters}", worst >= 0)
    res.check("mean square keeps growing", out.mean_sq[-1] > out.mean_sq[n_iters // 2])
    return res


def fedavg_equivalence(seed: int = 0) -> DemoResult:
    """Federated averaging equals ATC diffusion on the complete graph, bit for bit."""
    res = DemoResult("fedavg-equivalence")
    rng = np.random.default_rng(seed)
    ens = random_quadratic(rng, 5, 2, mu=1.0, L=4.0, spread=2.0)
    X0 = rng.standard_normal((5, 2))
    complete = build_toy("complete", 5)
    noise = NoiseConfig.gradient(0.3, 0.1)
    for T in (1, 2, 5):
        step = StepSchedule.constant(0.05)
        fed = run(X0, 100, AlgorithmConfig(Variant.FEDERATED, step, T), None, ens, noise, seed=seed + T)
        atc = run(X0, 100, AlgorithmConfig(Variant.DIFFUSION_ATC, step, T), complete, ens, noise, seed=seed + T)
        same = np.array_equal(fed.iterates, atc.iterates)
        res.check(f"T={T}: identical iterates over 100 noisy iterations", same)
    return res


def linreg_variance(seed: int = 0, draws: int = 1_000_000) -> DemoResult:
    """Single-sample gradients of least squares have variance growing with x^2."""
    res = DemoResult("linreg-variance")
    ens = make_linear_regression([[[1.0, 1.0], [1.0, -1.0], [2.0, 0.0]]], 0.0)
    rng = np.random.default_rng(seed)
    for x in (0.0, 1.0, -2.0):
        X = np.full((draws, 1, 1), x)
        _, eps = sample_stochastic_grad(ens, X, rng)
        eps = eps.ravel()
        var = float(np.mean(eps**2))
        target = 8.0 / 3.0 + 8.0 * x * x
        mean = float(eps.mean())
        se = float(eps.std(ddof=1) / math.sqrt(draws))
        res.data[f"x={x:g}"] = {"second_moment": var, "target": target, "mean": mean}
        res.check(f"x={x:g}: E[eps^2] = {var:.4f} vs 8/3 + 8x^2 = {target:.4f}", abs(var / target - 1) <= 0.05)
        res.check(f"x={x:g}: mean {mean:.2e} within 4 standard errors", abs(mean) <= 4 * se)
    return res


def aux_distance(seed: int = 0, trials: int = 100) -> DemoResult:
    """Solutions of the distance system stay below ``eta (L/mu) Lambda ||v||``."""
    res = DemoResult("aux-distance")
    rng = np.random.default_rng(seed)
    topo = build_toy("ring", 8, 0.2)
    for variant, eta in ((Variant.DGD, 0.01), (Variant.DIFFUSION_ATC, 0.01)):
        worst = aux_distance_check(topo, eta, variant, trials, rng, mu=1.0, L=4.0)
        res.data[variant.value] = worst
        res.check(f"{variant.value}: worst ratio {worst:.4f} <= 1", worst <= 1 + 1e-9)
    return res


DEMOS: dict[str, Callable[..., DemoResult]] = {
    "gd-tightness": gd_tightness,
    "dgd-tightness": dgd_tightness,
    "bipartite-divergence": bipartite_divergence,
    "nc3t-counterexample": nc3t_counterexample_demo,
    "fedavg-equivalence": fedavg_equivalence,
    "linreg-variance": linreg_variance,
    "aux-distance": aux_distance,
}


def run_demo(name: str, seed: int = 0) -> DemoResult:
    """Run a curated demo by name.

    Raises
    ------
    KeyError
        Unknown demo name.
    """
    if name not in DEMOS:
        raise KeyError(f"unknown demo {name!r}; choose from {', '.join(DEMOS)}")
    return DEMOS[name](seed=seed)
