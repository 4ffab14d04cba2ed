"""
Ranking Q-learning candidates on Taxi from offline data
=======================================================

Train a handful of Q-learning runs on the 500-state Taxi MDP, roll out one
offline dataset, and ask BVFT which candidate to deploy. Because the MDP is
tabular we can also compute every candidate's true value and see how good
the choice was.

Run with ``python demos/01_rank_taxi_candidates.py`` (under a minute).
"""
import warnings

import numpy as np

from bvftselect import bvft
from bvftselect.candidates import build_eval_cache, sweep_candidates, taxi_spec_grid
from bvftselect.envs import TaxiSpec, behavior_for, build_taxi, generate_dataset
from bvftselect.mdp import solve_q_star
from bvftselect.metrics import topk_regret

mdp = build_taxi(TaxiSpec())
print(mdp)

###############################################################################
# Candidates: 5 learning rates times 7 training lengths. Many runs reach the
# optimal policy, the rest stop somewhere short of it.
pairs = sweep_candidates(mdp, taxi_spec_grid(), n_jobs=4)
values = np.array([p.true_value for p in pairs])
print(f"J* = {values.max():.3f}; {np.sum(values == values.max())} of {len(pairs)} candidates reach it")
print("sorted true values:", np.round(np.sort(values), 2))

###############################################################################
# The offline dataset comes from an epsilon-greedy expert. Nothing below this
# point looks at the MDP except the skyline at the end.
data = generate_dataset(mdp, behavior_for(mdp), 50_000, seed=1)
print(data.coverage())

evals = [build_eval_cache(p, data) for p in pairs]
grid = bvft.ResolutionGrid.default(data.v_max)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", bvft.DegenerateResolutionWarning)
    result, table = bvft.bvft_rank(evals, data, grid)

# each row is one candidate's loss across the grid; the chosen resolution
# is where the row bottoms out. Show the top three and the bottom three.
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("resolutions:", np.array(grid.resolutions))
for i in list(result.ranking[:3]) + list(result.ranking[-3:]):
    print(f"{pairs[i].label:30s} J={values[i]:6.2f}", table.losses[:, i])

###############################################################################
# Compare with the one-sample Bellman residual and with an oracle that knows
# the distance to Q*.
br = bvft.br1_rank(evals, data)
sky = bvft.skyline_losses(mdp, pairs, data, grid, q_star=solve_q_star(mdp))["qstar-distance"]
for name, res in (("bvft", result), ("br1", br), ("skyline", sky)):
    top = res.ranking[0]
    print(f"{name:8s} picks {pairs[top].label:32s} top-1 regret {topk_regret(res.ranking, values, 1):.3f}")
