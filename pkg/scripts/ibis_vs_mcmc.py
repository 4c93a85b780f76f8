"""Compare final-time IBIS posterior means with a long parallel-chain MCMC run.

    python3 scripts/ibis_vs_mcmc.py --replicates 8 --particles 1000
"""

import argparse
import time

import numpy as np

from unspanned.inference import AtsmModel, Target, interpretable, mle_fit, run_mcmc, warm_start
from unspanned.simulate import default_truth, simulate_panel
from unspanned.smc import PURPOSE_INIT, SMCConfig, init_cloud, run_ibis, stage_rng, weighted_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=200)
    ap.add_argument("--t0", type=int, default=60, help="warm-start date")
    ap.add_argument("--replicates", type=int, default=8)
    ap.add_argument("--particles", type=int, default=1000)
    ap.add_argument("--chains", type=int, default=400)
    ap.add_argument("--sweeps", type=int, default=600)
    ap.add_argument("--burn", type=int, default=100)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    truth = default_truth()
    data = simulate_panel(truth, args.T, args.seed).model_data()
    model = AtsmModel(truth.spec, data, sigma_z=truth.sigma_z)
    keys = None
    rep = []
    for r in range(args.replicates):
        start = time.perf_counter()
        parts, props = warm_start(model, args.t0, args.particles, stage_rng(r, args.t0, 0, PURPOSE_INIT))
        cloud = run_ibis(init_cloud(parts, r, args.t0, props), model, args.T,
                         SMCConfig(n_particles=args.particles, seed=r))
        s = weighted_summary(cloud, model)
        keys = keys or [k for k in s if not k.startswith("_")]
        rep.append([s[k]["mean"] for k in keys])
        print(f"replicate {r}: {len(cloud.traces)} tempered steps, {time.perf_counter() - start:.0f} s", flush=True)
    rep = np.array(rep)

    fit = mle_fit(data, truth.spec, truth.sigma_z, rng=np.random.default_rng(5))
    target = Target(truth.spec, data, args.T, truth.sigma_z, model.prior)
    rng = np.random.default_rng(9)
    x0 = fit.x + 0.5 * rng.standard_normal((args.chains, fit.x.size)) @ np.linalg.cholesky(fit.cov).T
    xs, s2, state, _ = run_mcmc(target, x0, np.full(args.chains, fit.sigma_e2), fit.proposals, args.sweeps, rng,
                                burn=args.burn, adapt_every=25)
    print("MCMC acceptance", state.acceptance_rates())
    summ = interpretable(xs.reshape(-1, xs.shape[-1]), s2.ravel(), model.layout)
    print(f"{'parameter':16s} {'IBIS':>13s} {'s.e.':>10s} {'MCMC':>13s} {'s.e.':>10s} {'z':>6s}")
    for j, k in enumerate(keys):
        v = np.asarray(summ[k]).reshape(xs.shape[:2])
        m_se = v.mean(axis=0).std(ddof=1) / np.sqrt(args.chains)
        i_mean, i_se = rep[:, j].mean(), rep[:, j].std(ddof=1) / np.sqrt(args.replicates)
        z = (i_mean - v.mean()) / np.hypot(i_se, m_se)
        print(f"{k:16s} {i_mean:13.6g} {i_se:10.2g} {v.mean():13.6g} {m_se:10.2g} {z:+6.2f}")


if __name__ == "__main__":
    main()
