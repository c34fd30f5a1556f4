"""Random link failures: sampled mixing matrices against their bounds.

Draws many realizations of Q on a ring, checks the row sums (exactly one
only when the diagonal uses the realized mass) and the
empirical variance of ``(Q - E[Q]) x`` against the N/4 and N/2
coefficients, then runs configs/link_failure.json end to end.
"""

from pathlib import Path

import numpy as np

from degrad import LinkFailureModel, build_toy, expected_Q, link_noise_variance_bound
from degrad.harness.config import load_config
from degrad.harness.experiment import run_experiment
from degrad.topology import draw_link_matrices

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "link_failure.json"


def main():
    rng = np.random.default_rng(5)
    topo = build_toy("ring", 6, 0.3)
    x = rng.standard_normal((6, 1))
    for mode in ("known", "unknown"):
        model = LinkFailureModel.uniform(6, 0.7, mode)
        EQ = expected_Q(topo, model)
        Q = draw_link_matrices(topo.weights, model.success_probs, model.mode, rng, count=20000)
        rows = float(np.max(np.abs(Q.sum(axis=-1) - 1)))
        var = np.mean(np.sum(((Q - EQ) @ x) ** 2, axis=(1, 2))) / np.sum(x**2)
        b = link_noise_variance_bound(topo, model)
        print(
            f"{mode:8s} max |row sum - 1| = {rows:.1e}  variance/||x||^2 = {var:.4f}  "
            f"tighter sum = {b.tighter_sum:.4f}  coefficient = {b.coefficient:.1f}"
        )

    res = run_experiment(load_config(CONFIG))
    c = res.comparison
    print(f"link_failure.json: verdict {c.verdict}, tightness {c.tightness:.3f}, {c.paths} paths")


if __name__ == "__main__":
    main()
