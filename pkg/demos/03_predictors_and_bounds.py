"""How well do score predictors work, and how tight is the perturbation bound?

Part one tracks every token of an uncompressed stream and compares each
predictor's estimate with the score it is trying to predict. Part two runs
a keepkv simulation and compares every audited merge perturbation with its
bound.
"""

import numpy as np

from kvlab.analysis import predictor_errors
from kvlab.harness import BENCHMARK_WORKLOAD
from kvlab.policy import PolicyConfig
from kvlab.simulate import Simulation
from kvlab.stream import generate_stream

w = BENCHMARK_WORKLOAD
stream = generate_stream(
    w["dim"], w["prefill_len"], w["decode_len"], 0,
    query_corr=w["query_corr"], salience=w["salience"], query_align=w["query_align"],
)

for alpha in (0.5, 0.9):
    err = predictor_errors(stream, alpha=alpha, window=8)
    print(f"alpha={alpha}: " + "  ".join(f"{k} {np.mean(v):.3f}" for k, v in err.items()))
# cumulative attention predicts normalized attention, which keeps being
# diluted by new tokens; raw-score predictors do not suffer from that.
# The EMA beats the 8-step window at alpha=0.5 but not at the default 0.9,
# whose effective memory is longer than the window.

sim = Simulation(stream, PolicyConfig("keepkv"), horizon=16)
sim.run()
records = [r for a in sim.audits for r in a.records]
bounded = [r for r in records if r.bound is not None]
ratio = np.array([r.theta / r.bound for r in bounded if r.bound > 0])
print(f"\n{len(sim.audits)} ZIP merges audited over {len(records)} (merge, step) pairs")
print(f"eps < 1 in {len(bounded)} pairs; violations: {sum(not r.bound_holds for r in bounded)}")
print(f"theta / bound: median {np.median(ratio):.2e}, max {ratio.max():.2e}")
by_lag = {}
for a in sim.audits:
    for r in a.records:
        by_lag.setdefault(r.step - a.step, []).append(r.relative_theta)
print("mean relative theta by steps since the merge:")
print("  " + " ".join(f"{lag}:{np.mean(v):.1e}" for lag, v in sorted(by_lag.items())[:8]))
