"""How the graph shapes the fixed-point gap.

For each toy graph prints lambda_2, lambda_N, the DGD and diffusion
topology factors, the gap bound at eta = 0.01, and the measured gap of
the noise-free fixed point for a random heterogeneous quadratic. On the complete graph diffusion has a
zero gap; the printed value there is rounding noise.
"""

import numpy as np

from degrad import build_toy, fixed_point_gap_bound, heterogeneity, solve_optimum, topology_factor
from degrad.dynamics import AlgorithmConfig, StepSchedule, fixed_point
from degrad.errors import StepSizeError
from degrad.objectives import random_quadratic


def main():
    rng = np.random.default_rng(7)
    n, eta = 8, 0.01
    ens = random_quadratic(rng, n, 2, mu=1.0, L=4.0, spread=2.0)
    opt = solve_optimum(ens)
    g = heterogeneity(ens, opt).grad_norm

    print(f"{'graph':10s} {'lam2':>7s} {'lamN':>7s} {'variant':>15s} {'Lambda':>8s} {'bound':>9s} {'gap':>9s}")
    # Laplacian weights need epsilon < 1/k_max; the star hub has degree n-1
    for kind, eps in (("complete", None), ("ring", 0.2), ("line", 0.2), ("star", 0.1)):
        topo = build_toy(kind, n, eps)
        sp = topo.spectrum
        for variant in ("dgd", "diffusion_atc"):
            cfg = AlgorithmConfig(variant, StepSchedule.constant(eta))
            x_hat, _ = fixed_point(cfg, topo, ens)
            gap = float(np.linalg.norm(x_hat - opt.X_star))
            lam = topology_factor(topo, variant)
            try:
                bound = f"{fixed_point_gap_bound(variant, eta, 1, ens.mu, ens.L, topo, g).total:9.2e}"
            except StepSizeError:
                # the diffusion bound needs eta * L * Lambda <= 1
                bound = f"{'n/a':>9s}"
            print(f"{kind:10s} {sp.lambda2:7.3f} {sp.lambdaN:7.3f} {variant:>15s} {lam:8.2f} {bound} {gap:9.2e}")


if __name__ == "__main__":
    main()
