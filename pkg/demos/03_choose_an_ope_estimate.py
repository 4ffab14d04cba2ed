"""
Picking among FQE estimates with BVFT-PE
========================================

Fitted-Q evaluation needs hyperparameters of its own (iterations, state
aggregation). Run a small grid of them for each policy, then let BVFT-PE
choose which estimate to trust. Strategy 1 scores every (policy, estimate)
pair together; strategy 2 first picks one estimate per policy and then
ranks policies by that estimate's average value.
"""
import warnings

import numpy as np

from bvftselect import bvft, ope
from bvftselect.envs import TransitionDataset
from bvftselect.mdp import Policy, evaluate_policy_exact, random_mdp, solve_q_pi

warnings.simplefilter("ignore", bvft.DegenerateResolutionWarning)
rng = np.random.default_rng(3)
mdp = random_mdp(40, 4, 0.9, rng, branching=4)

###############################################################################
# Uniform offline data over (s, a), with successors drawn from the MDP.
n = 30_000
s = rng.integers(40, size=n)
a = rng.integers(4, size=n)
cdf = np.cumsum(mdp.transition[s, a], axis=1)
s2 = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), 39)
data = TransitionDataset(s, a, mdp.reward[s, a], s2, mdp.terminal_mask[s2], {"gamma": 0.9, "r_max": 1.0, "n_states": 40, "n_actions": 4})

###############################################################################
# Six softmax policies of varying quality and an FQE grid per policy. Too few
# iterations truncate the horizon; heavy aggregation blurs states together.
policies = []
for temp in (0.05, 0.2, 0.5, 1.0, 2.0, 5.0):
    logits = rng.normal(size=(40, 4)) / temp
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    policies.append(Policy.stochastic(p / p.sum(axis=1, keepdims=True)))
configs = [ope.FqeConfig(100), ope.FqeConfig(5), ope.FqeConfig(100, aggregation_factor=8), ope.FqeConfig(15, aggregation_factor=2)]
cands = ope.run_ope_grid(data, policies, configs)

truth = np.array([evaluate_policy_exact(mdp, p) for p in policies])
print("true values:", np.round(truth, 3))

###############################################################################
grid = bvft.ResolutionGrid.default(data.v_max)
s1 = ope.strategy1_rank(cands, data, grid)
s2 = ope.strategy2_rank(cands, data, grid)
print("strategy 1 ranking:", s1.ranking.tolist())
print("strategy 2 ranking:", s2.ranking.tolist())
print("estimate chosen per policy:", [configs[l].label for l in s2.diagnostics["selected_ope_index"]])
print("true ranking:      ", np.argsort(-truth, kind="stable").tolist())

# how far the chosen estimates are from the exact Q^pi on the data
for i, l in enumerate(s2.diagnostics["selected_ope_index"]):
    q_hat = next(c.q_estimate for c in cands if c.policy_index == i and c.ope_index == l)
    err = np.sqrt(np.mean((q_hat[s, a] - solve_q_pi(mdp, policies[i])[s, a]) ** 2))
    print(f"policy {i}: RMS error of chosen estimate {err:.3f}")
