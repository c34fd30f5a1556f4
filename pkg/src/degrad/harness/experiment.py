"""Experiment orchestration: bounds assembly, Monte Carlo runs, comparison, sweeps."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from ..bounds import (
    BoundReport,
    comm_noise_envelope,
    contraction_factor,
    fixed_point_gap_bound,
    gradient_noise_envelope,
    multi_t_gradient_noise_envelope,
    noise_free_envelope,
    time_varying_envelope,
)
from ..dynamics import NoiseKind, PathGenerators, Trace, fixed_point, run
from ..errors import CapabilityError, DomainError, StepSizeError
from ..objectives import OptimumReport, grad_stack, solve_optimum
from ..topology import Topology, expected_Q, link_noise_variance_bound, topology_factor
from ..variants import Variant
from .config import ExperimentConfig, parse_config

__all__ = [
    "THREADS_ENV",
    "MAX_GRID_CELLS",
    "SWEEP_COLUMNS",
    "thread_count",
    "ComparisonReport",
    "ExperimentResult",
    "SweepResult",
    "compare",
    "assemble_bounds",
    "run_experiment",
    "run_paths",
    "sweep_cells",
    "run_sweep",
    "dumps",
]

THREADS_ENV = "DEGRAD_THREADS"
MAX_GRID_CELLS = 1_000_000
SWEEP_AXES = ("topology_kind", "variant", "T", "gamma", "eta")
SWEEP_COLUMNS = (
    "cell",
    "topology_kind",
    "variant",
    "T",
    "gamma",
    "eta",
    "c",
    "c_per_iteration",
    "Lambda",
    "gap_bound",
    "gap_slack",
    "empirical_gap",
    "empirical_asymptotic",
    "envelope_asymptote",
    "tightness",
    "verdict",
    "note",
)
DETERMINISTIC_SLACK = 1e-9
# Monte Carlo paths are stepped together in blocks of this size; fixed so
# that the arithmetic does not depend on the worker count
PATH_BLOCK = 64


def thread_count() -> int:
    """Worker cap from ``DEGRAD_THREADS`` (default: CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DomainError(f"{THREADS_ENV} must be a positive integer, got {n}")
    return n


def _clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if hasattr(obj, "value") and isinstance(obj.value, str):
        return obj.value
    return obj


def dumps(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


@dataclass(frozen=True)
class ComparisonReport:
    """Empirical error metric against its envelope.

    ``verdict == "pass"`` iff ``empirical[t] <= envelope[t] (1 + slack) + abs_slack``
    at every recorded t (and the run did not diverge).
    """

    empirical: np.ndarray
    envelope: np.ndarray
    verdict: str
    tightness: float
    slack: float
    abs_slack: float
    first_violation: int | None
    paths: int
    notes: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "tightness_ratio": self.tightness,
            "slack": self.slack,
            "abs_slack": self.abs_slack,
            "first_violation": self.first_violation,
            "paths": self.paths,
            "metric": "rms_dist_to_opt",
            "notes": list(self.notes),
            "t": list(range(self.empirical.size)),
            "empirical": self.empirical,
            "envelope": self.envelope,
        }


def compare(
    empirical: np.ndarray,
    envelope: np.ndarray,
    *,
    slack: float,
    abs_slack: float = 0.0,
    paths: int = 1,
    diverged: bool = False,
    notes: tuple[str, ...] = (),
) -> ComparisonReport:
    """Check dominance of ``empirical`` by ``envelope`` pointwise in t."""
    emp = np.asarray(empirical, dtype=float)
    env = np.asarray(envelope, dtype=float)[: emp.size]
    ok = emp <= env * (1.0 + slack) + abs_slack
    bad = np.flatnonzero(~ok)
    pos = env > 0
    tight = float(np.max(emp[pos] / env[pos])) if np.any(pos) else float("nan")
    notes = tuple(notes)
    if diverged:
        notes += ("run diverged although the bound predicts convergence",)
    verdict = "pass" if bad.size == 0 and not diverged else "fail"
    return ComparisonReport(
        empirical=emp,
        envelope=env,
        verdict=verdict,
        tightness=tight,
        slack=float(slack),
        abs_slack=float(abs_slack),
        first_violation=int(bad[0]) if bad.size else None,
        paths=int(paths),
        notes=notes,
    )


@dataclass(frozen=True)
class _Plan:
    bounds: BoundReport
    envelope: np.ndarray
    optimum: OptimumReport
    x_hat: np.ndarray | None
    extras: dict


def _mean_topology(exp: ExperimentConfig) -> Topology | None:
    if exp.noise.kind is NoiseKind.LINK_FAILURE:
        return Topology(expected_Q(exp.topology, exp.noise.link_model))
    return exp.topology


def _orbit_norms(exp: ExperimentConfig, x_hat: np.ndarray) -> tuple[float, float]:
    """Largest gradient-evaluation norm and mixing-input norm on the fixed orbit."""
    algo, ens = exp.algorithm, exp.ensemble
    eta = algo.step.eta
    X = x_hat
    grad_pts = [X]
    for _ in range(algo.T - 1):
        X = X - eta * grad_stack(ens, X)
        grad_pts.append(X)
    mix_in = X - eta * grad_stack(ens, X) if algo.variant is Variant.DIFFUSION_ATC else X
    M_grad = max(float(np.linalg.norm(P)) for P in grad_pts)
    return M_grad, float(np.linalg.norm(mix_in))


def assemble_bounds(exp: ExperimentConfig, optimum: OptimumReport | None = None) -> _Plan:
    """Theoretical quantities and the per-t envelope for ``exp``.

    Raises
    ------
    StepSizeError
        The configured step/noise lies outside the regime where the bounds hold.
    CapabilityError
        No envelope is available for this combination.
    """
    algo, ens, noise = exp.algorithm, exp.ensemble, exp.noise
    v = algo.variant
    mu, L = ens.mu, ens.L
    n = exp.n_iters
    opt = optimum or solve_optimum(ens)
    g = opt.grad_norm
    mean_topo = _mean_topology(exp)
    eff = algo.effective_topology(mean_topo, ens.n_agents)
    lam_n = None if eff is None else eff.spectrum.lambdaN
    extras: dict = {
        "variant": v.value,
        "T": algo.T,
        "mu": mu,
        "L": L,
        "grad_norm_at_opt": g,
        "lambda_2": None if exp.topology is None else exp.topology.spectrum.lambda2,
        "lambda_N": None if exp.topology is None else exp.topology.spectrum.lambdaN,
        "lambda_N_effective": lam_n,
    }
    notes: list[str] = []
    spec = contraction_factor(v, algo.step.eta, mu, L, lam_n, T=algo.T)
    if not spec.valid:
        msg = f"{v.value} update is not a contraction: {spec.violated}"
        if exp.topology is not None:
            base = exp.topology.spectrum.lambdaN
            msg += f"; lambda_N = {base:.6g}"
            if base <= -1.0 + 1e-12:
                msg += " (bipartite spectrum; use a consensus step size gamma < 1)"
        raise StepSizeError(msg, spec.violated)
    if v in (Variant.GD, Variant.FEDERATED) or eff is None or eff.n_agents == 1:
        Lam = 0.0
    else:
        Lam = topology_factor(eff, v)
    if noise.kind is NoiseKind.LINK_FAILURE:
        notes.append("contraction and gap use the mean mixing matrix E[Q]")

    dist0_opt = float(np.linalg.norm(exp.x0 - opt.X_star))
    if not algo.step.is_constant:
        if noise.is_random:
            raise CapabilityError("no envelope for noisy runs with a time-varying step")
        if v is Variant.DIFFUSION_CTA:
            raise CapabilityError("no time-varying envelope for CTA diffusion")
        tv = time_varying_envelope(
            algo.step.eta, algo.step.tau, mu, L, Lam, g, dist0_opt, n, variant=v, lambda_n=lam_n
        )
        gap0 = algo.step.eta * (L / mu) * Lam * g
        extras.update(envelope_kind="time_varying", decay_class=tv.decay_class)
        notes.append(f"time-varying step decays as {tv.decay_class}")
        report = BoundReport(spec, Lam, gap0, 0.0, False, None, tv, tuple(notes))
        return _Plan(report, tv.total, opt, None, extras)

    gb = fixed_point_gap_bound(v, algo.step.eta, algo.T, mu, L, eff, g)
    if gb.second_order:
        notes.append("eta*T*L is not small; second-order slack is significant")
    x_hat, _ = fixed_point(algo, mean_topo, ens)
    M_grad, M_mix = _orbit_norms(exp, x_hat)
    eta = algo.step.eta
    gap = gb.total
    if noise.kind is NoiseKind.NONE:
        env = noise_free_envelope(spec.per_iteration, float(np.linalg.norm(exp.x0 - x_hat)), gap)
    elif noise.kind is NoiseKind.GRADIENT:
        if noise.use_sampler:
            notes.append("sampler noise: sigma/omega are declared bounds, not verified")
        if algo.T == 1:
            env = gradient_noise_envelope(spec.factor, eta, mu, noise.sigma, noise.omega, M_grad, gap, dist0_opt)
        else:
            env = multi_t_gradient_noise_envelope(
                spec.factor, algo.T, eta, noise.sigma, noise.omega, gap, dist0_opt, M=M_grad
            )
    elif noise.kind is NoiseKind.COMMUNICATION:
        env = comm_noise_envelope(
            spec.per_iteration, algo.consensus_gamma, noise.sigma, noise.omega,
            float(np.linalg.norm(x_hat)), gap, dist0_opt, eta=eta, mu=mu,
        )
    else:
        lb = link_noise_variance_bound(exp.topology, noise.link_model)
        extras.update(link_tighter_sum=lb.tighter_sum, link_coefficient=lb.coefficient)
        env = comm_noise_envelope(
            spec.per_iteration, algo.consensus_gamma, 0.0, math.sqrt(lb.tighter_sum), M_mix, gap, dist0_opt
        )
    notes.append(f"gap bound: {gb.formula}")
    extras.update(
        envelope_kind=env.kind,
        envelope_asymptote=env.asymptote,
        envelope_rate=env.rate,
        envelope_transient=env.transient,
        empirical_gap=float(np.linalg.norm(x_hat - opt.X_star)),
    )
    for key in ("dhat_sqrt_eta", "dhat_gamma_sqrt_eta"):
        if key in env.params:
            extras[key] = env.params[key]
    report = BoundReport(
        spec, Lam, gb.value, gb.slack, gb.second_order, env.params.get("dhat"), env, tuple(notes)
    )
    return _Plan(report, env(np.arange(n + 1)), opt, x_hat, extras)


@dataclass(frozen=True)
class ExperimentResult:
    """Everything one configured run produces."""

    config: ExperimentConfig
    trace: Trace
    bounds: BoundReport
    comparison: ComparisonReport
    extras: dict

    @property
    def rms_dist_to_opt(self) -> np.ndarray:
        return self.comparison.empirical

    def asymptotic_error(self) -> float:
        """Mean of the RMS metric over the trailing ``tail_fraction`` of the run."""
        emp = self.comparison.empirical
        k = max(1, int(round(self.config.tail_fraction * emp.size)))
        return float(np.mean(emp[-k:]))

    def trace_csv(self) -> str:
        tr = self.trace
        cols = [tr.dist_to_fixed, tr.dist_to_opt, tr.consensus_residual]
        cols = [np.sqrt(np.mean(c**2, axis=1)) for c in cols]
        cmp_ = self.comparison
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "dist_to_fixed", "dist_to_opt", "consensus_residual", "envelope", "dominated"])
        for t in range(cols[0].size):
            ok = cmp_.empirical[t] <= cmp_.envelope[t] * (1 + cmp_.slack) + cmp_.abs_slack
            w.writerow([t] + [repr(float(c[t])) for c in cols] + [repr(float(cmp_.envelope[t])), int(ok)])
        return buf.getvalue()

    def bounds_json(self) -> str:
        return dumps({**self.bounds.to_json(), **self.extras})

    def comparison_json(self) -> str:
        return dumps(self.comparison.to_json())

    def write(self, out_dir: str | Path | None = None) -> list[Path]:
        """Write trace CSV, bounds JSON, comparison JSON (and iterates if configured)."""
        outs = self.config.outputs
        base = Path(out_dir) if out_dir is not None else Path(outs.dir)
        base.mkdir(parents=True, exist_ok=True)
        files = [
            (base / outs.trace, self.trace_csv()),
            (base / outs.bounds, self.bounds_json()),
            (base / outs.comparison, self.comparison_json()),
        ]
        if outs.iterates is not None:
            files.append((base / outs.iterates, self.trace.iterates_json() + "\n"))
        for path, text in files:
            path.write_text(text)
        return [p for p, _ in files]


def _combine(traces: list[Trace], seed: int) -> Trace:
    size = min(t.dist_to_opt.shape[0] for t in traces)
    notes: list[str] = []
    for tr in traces:
        for note in tr.notes:
            if note not in notes:
                notes.append(note)

    def col(name: str) -> np.ndarray:
        return np.concatenate([getattr(t, name)[:size] for t in traces], axis=1)

    first = traces[0]
    return Trace(
        iterates=None if first.iterates is None else first.iterates[:, 0],
        dist_to_fixed=col("dist_to_fixed"),
        dist_to_opt=col("dist_to_opt"),
        consensus_residual=col("consensus_residual"),
        diverged=any(t.diverged for t in traces),
        seed=seed,
        config=first.config,
        x_hat=first.x_hat,
        x_star=first.x_star,
        notes=tuple(notes),
    )


def run_paths(exp: ExperimentConfig, x_hat: np.ndarray | None, optimum: OptimumReport) -> Trace:
    """Run the Monte Carlo paths (path p seeded with ``seed + p``) and stack them.

    Noise-free experiments run a single path. Paths are advanced together
    in blocks of ``PATH_BLOCK``, each path drawing from its own generator;
    blocks are spread over at most ``DEGRAD_THREADS`` worker threads and
    collected in path order, so the output does not depend on scheduling.
    """
    paths = exp.mc_paths if exp.noise.is_random else 1
    want_iterates = exp.outputs.iterates is not None
    blocks = [range(lo, min(lo + PATH_BLOCK, paths)) for lo in range(0, paths, PATH_BLOCK)]

    def one(block: range) -> Trace:
        X0 = np.broadcast_to(exp.x0, (len(block),) + exp.x0.shape)
        return run(
            X0,
            exp.n_iters,
            exp.algorithm,
            exp.topology,
            exp.ensemble,
            exp.noise,
            PathGenerators.from_seeds(exp.seed + p for p in block),
            seed=exp.seed + block[0],
            store_iterates=want_iterates and block[0] == 0,
            x_hat=x_hat,
            optimum=optimum,
        )

    workers = min(thread_count(), len(blocks))
    if workers == 1:
        traces = [one(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(one, blocks))
    return _combine(traces, exp.seed)


def run_experiment(exp: ExperimentConfig) -> ExperimentResult:
    """Bounds, Monte Carlo trace and dominance verdict for one configuration.

    Raises
    ------
    StepSizeError
        Regime error (reported by the CLI with exit code 3).
    """
    plan = assemble_bounds(exp)
    trace = run_paths(exp, plan.x_hat, plan.optimum)
    paths = trace.dist_to_opt.shape[1]
    emp = np.sqrt(np.mean(trace.dist_to_opt**2, axis=1))
    if exp.slack is not None:
        slack = exp.slack
    elif exp.noise.is_random:
        slack = 3.0 / math.sqrt(paths)
    else:
        slack = DETERMINISTIC_SLACK
    scale = max(1.0, float(np.linalg.norm(plan.optimum.X_star)), float(np.linalg.norm(exp.x0)))
    cmp_ = compare(
        emp,
        plan.envelope,
        slack=slack,
        abs_slack=1e-12 * scale,
        paths=paths,
        diverged=trace.diverged,
        notes=plan.bounds.notes + trace.notes,
    )
    return ExperimentResult(exp, trace, plan.bounds, cmp_, plan.extras)


@dataclass(frozen=True)
class SweepResult:
    rows: list[dict]

    @property
    def violations(self) -> int:
        return sum(r["verdict"] == "fail" for r in self.rows)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([_cell_text(r.get(k)) for k in SWEEP_COLUMNS])
        return buf.getvalue()


def _cell_text(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return str(x)


def sweep_cells(exp: ExperimentConfig) -> list[dict]:
    """Grid cells in deterministic order (last axis varies fastest).

    Axes absent from ``sweep`` keep the base value; an empty sweep or any
    empty axis gives zero cells.

    Raises
    ------
    DomainError
        More than ``MAX_GRID_CELLS`` cells.
    """
    grid = exp.sweep or {}
    axes = [(k, list(grid[k])) for k in SWEEP_AXES if k in grid]
    if not axes:
        return []
    count = math.prod(len(vals) for _, vals in axes)
    if count > MAX_GRID_CELLS:
        raise DomainError(f"sweep grid has {count} cells, more than {MAX_GRID_CELLS}")
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(vals for _, vals in axes))]


def _cell_doc(raw: dict, cell: dict) -> dict:
    doc = copy.deepcopy(raw)
    doc.pop("sweep", None)
    algo = doc["algorithm"]
    if "variant" in cell:
        algo["variant"] = cell["variant"]
    if "T" in cell:
        algo["local_updates"] = cell["T"]
    if "gamma" in cell:
        algo["consensus_gamma"] = cell["gamma"]
    if "eta" in cell:
        algo["step"]["eta"] = cell["eta"]
    if "topology_kind" in cell:
        topo = doc.get("topology")
        if topo is None or "kind" not in topo:
            raise DomainError("a topology_kind axis needs a toy topology ({'kind', 'n', 'epsilon'})")
        topo["kind"] = cell["topology_kind"]
    return doc


def run_sweep(exp: ExperimentConfig) -> SweepResult:
    """One summary row per grid cell; regime errors are reported, not raised."""
    rows = []
    for i, cell in enumerate(sweep_cells(exp)):
        doc = _cell_doc(exp.raw, cell)
        row: dict[str, Any] = {
            "cell": i,
            "topology_kind": doc.get("topology", {}).get("kind"),
            "variant": doc["algorithm"]["variant"],
            "T": doc["algorithm"].get("local_updates", 1),
            "gamma": float(doc["algorithm"].get("consensus_gamma", 1.0)),
            "eta": float(doc["algorithm"]["step"]["eta"]),
        }
        try:
            res = run_experiment(parse_config(doc))
        except StepSizeError as exc:
            row.update(verdict="regime", note=str(exc))
        except (DomainError, CapabilityError) as exc:
            row.update(verdict="invalid", note=str(exc))
        else:
            b = res.bounds
            row.update(
                c=b.contraction.factor,
                c_per_iteration=b.contraction.per_iteration,
                Lambda=b.lambda_factor,
                gap_bound=b.fixed_point_gap,
                gap_slack=b.gap_slack,
                empirical_gap=res.extras.get("empirical_gap"),
                empirical_asymptotic=res.asymptotic_error(),
                envelope_asymptote=res.extras.get("envelope_asymptote"),
                tightness=res.comparison.tightness,
                verdict=res.comparison.verdict,
                note="",
            )
        rows.append(row)
    return SweepResult(rows)
