"""Experiment configuration: JSON schema validation and object building."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from ..dynamics import AlgorithmConfig, NoiseConfig, NoiseKind, StepSchedule
from ..errors import DegradError, DomainError
from ..objectives import ObjectiveEnsemble, ensemble_from_json
from ..topology import LinkFailureModel, LinkMode, Topology, topology_from_json
from ..variants import Variant, parse_variant

__all__ = [
    "SCHEMA_ID",
    "ConfigError",
    "ExperimentConfig",
    "Outputs",
    "load_schema",
    "validate_config",
    "load_config",
    "parse_config",
]

SCHEMA_ID = "degrad/1"
MAX_SEED = 2**64 - 1


class ConfigError(DegradError):
    """Unreadable, malformed or schema-invalid configuration."""


@lru_cache(maxsize=1)
def load_schema() -> dict:
    """The shipped JSON schema for ``"schema": "degrad/1"`` documents."""
    text = resources.files("degrad.harness").joinpath("schema.json").read_text()
    return json.loads(text)


def validate_config(doc: Any) -> None:
    """Raise :class:`ConfigError` unless ``doc`` conforms to the schema."""
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


@dataclass(frozen=True)
class Outputs:
    """Artifact locations; file names are relative to ``dir``."""

    dir: str = "out"
    trace: str = "trace.csv"
    bounds: str = "bounds.json"
    comparison: str = "comparison.json"
    iterates: str | None = None
    summary: str = "sweep.csv"

    def path(self, name: str) -> Path:
        return Path(self.dir) / name


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully built experiment.

    Attributes
    ----------
    topology : Topology or None
        Base weight matrix (None only for GD and federated averaging).
    ensemble : ObjectiveEnsemble
    algorithm : AlgorithmConfig
    noise : NoiseConfig
    x0 : ndarray, shape (N, d)
    n_iters, mc_paths : int
    seed : int
        Mandatory; Monte Carlo path p uses ``seed + p``.
    slack : float or None
        Relative dominance slack; None selects the default
        (``1e-9`` noise-free, ``3/sqrt(paths)`` noisy).
    raw : dict
        The validated JSON document.
    """

    topology: Topology | None
    ensemble: ObjectiveEnsemble
    algorithm: AlgorithmConfig
    noise: NoiseConfig
    x0: np.ndarray
    n_iters: int
    mc_paths: int
    seed: int
    slack: float | None = None
    tail_fraction: float = 0.1
    outputs: Outputs = field(default_factory=Outputs)
    sweep: dict | None = None
    raw: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return str(self.raw.get("name", "experiment"))


def _step(obj: dict) -> StepSchedule:
    if obj["kind"] == "constant":
        return StepSchedule.constant(obj["eta"])
    if obj.get("tau") is None:
        raise DomainError("inverse_time step needs 'tau'")
    return StepSchedule.inverse_time(obj["eta"], obj["tau"])


def algorithm_from_json(obj: dict) -> AlgorithmConfig:
    rounds = obj.get("consensus_rounds")
    return AlgorithmConfig(
        variant=parse_variant(obj["variant"]),
        step=_step(obj["step"]),
        local_updates=int(obj.get("local_updates", 1)),
        consensus_gamma=float(obj.get("consensus_gamma", 1.0)),
        consensus_rounds=None if rounds is None else tuple(rounds),
    )


def noise_from_json(obj: dict | None, topo: Topology | None) -> NoiseConfig:
    if obj is None or obj["kind"] == "none":
        return NoiseConfig.none()
    kind = obj["kind"]
    sigma = float(obj.get("sigma", 0.0))
    omega = float(obj.get("omega", 0.0))
    dist = obj.get("distribution", "gaussian")
    if kind == "gradient":
        if obj.get("use_sampler", False):
            # sigma/omega are then declared bounds used only by the envelope
            return NoiseConfig(NoiseKind.GRADIENT, sigma, omega, use_sampler=True)
        return NoiseConfig.gradient(sigma, omega, dist)
    if kind == "communication":
        return NoiseConfig.communication(sigma, omega, dist)
    link = obj.get("link")
    if link is None:
        raise DomainError("link_failure noise needs a 'link' object")
    if topo is None:
        raise DomainError("link_failure noise needs a topology")
    mode = LinkMode(link["mode"])
    if "p" in link:
        model = LinkFailureModel.uniform(topo.n_agents, link["p"], mode)
    else:
        model = LinkFailureModel(np.array(link["success_probs"], dtype=float), mode)
    return NoiseConfig.link_failure(model)


def _x0(spec: Any, topo: Topology | None, N: int, d: int) -> np.ndarray:
    if spec is None:
        return np.zeros((N, d))
    if isinstance(spec, (int, float)):
        return np.full((N, d), float(spec))
    if isinstance(spec, dict):
        if topo is None:
            raise DomainError("an eigenvector start needs a topology")
        k = int(spec["eigenvector"])
        if k > N:
            raise DomainError(f"eigenvector index {k} exceeds N={N}")
        u = topo.spectrum.eigenvectors[:, k - 1]
        return np.repeat(u[:, None], d, axis=1) * float(spec.get("scale", 1.0))
    X = np.array(spec, dtype=float)
    if X.ndim == 1 and d == 1 and X.size == N:
        X = X[:, None]
    if X.shape != (N, d):
        raise DomainError(f"x0 has shape {X.shape}, expected {(N, d)}")
    if not np.all(np.isfinite(X)):
        raise DomainError("x0 must be finite")
    return X


def parse_config(doc: Any, *, seed: int | None = None) -> ExperimentConfig:
    """Validate a JSON document and build the experiment objects.

    Parameters
    ----------
    doc : dict
        Parsed JSON.
    seed : int, optional
        Overrides the document's seed (applied before validation).

    Raises
    ------
    ConfigError
        Schema violations.
    DomainError
        Well-formed documents describing invalid objects.
    """
    if isinstance(doc, dict) and seed is not None:
        if not (0 <= int(seed) <= MAX_SEED):
            raise ConfigError(f"seed must lie in [0, 2^64 - 1], got {seed}")
        doc = {**doc, "seed": int(seed)}
    validate_config(doc)
    ens = ensemble_from_json(doc["objectives"])
    algo = algorithm_from_json(doc["algorithm"])
    topo = topology_from_json(doc["topology"]) if "topology" in doc else None
    if topo is None and algo.variant not in (Variant.GD, Variant.FEDERATED):
        raise DomainError(f"{algo.variant.value} needs a 'topology'")
    if topo is not None and topo.n_agents != ens.n_agents:
        raise DomainError(f"topology has {topo.n_agents} agents, objectives have {ens.n_agents}")
    if algo.variant is Variant.GD and ens.n_agents != 1:
        raise DomainError("GD runs on a single agent; use a decentralized variant for N > 1")
    noise = noise_from_json(doc.get("noise"), topo)
    x0 = _x0(doc.get("x0"), topo, ens.n_agents, ens.dim)
    out = dict(doc.get("outputs", {}))
    slack = doc.get("slack")
    tail = float(doc.get("tail_fraction", 0.1))
    return ExperimentConfig(
        topology=topo,
        ensemble=ens,
        algorithm=algo,
        noise=noise,
        x0=x0,
        n_iters=int(doc.get("n_iters", 100)),
        mc_paths=int(doc.get("mc_paths", 1)),
        seed=int(doc["seed"]),
        slack=None if slack is None else float(slack),
        tail_fraction=tail,
        outputs=Outputs(**out),
        sweep=doc.get("sweep"),
        raw=doc,
    )


def load_config(path: str | Path, *, seed: int | None = None) -> ExperimentConfig:
    """Read, validate and build a configuration file.

    Raises
    ------
    ConfigError
        Unreadable file, malformed JSON or schema violation.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from None
    return parse_config(doc, seed=seed)
