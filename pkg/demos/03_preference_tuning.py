"""
Preference tuning of the second adapter set
===========================================

Stage 2 freezes the base weights and phi_c and trains a fresh phi_d with a
DPO objective in flow-matching form. For a pair (winner, loser) with shared
noise time, each side's implicit reward is how much better the tuned policy
matches the target velocity than the frozen reference policy (phi_d off).

Since phi_d starts at zero, both policies agree at step 0. Every pair is
then a tie, the loss is ln 2 and the implicit-reward accuracy is exactly 0.5.
"""

import math

import numpy as np

from gsaflow import DiT, DpoConfig, ModelConfig, generate_dataset, loss_dpo, train_stage1, train_stage2
from gsaflow.dpo import build_preference_pools, draw_pairs, implicit_reward_accuracy, split_pools

model = DiT.create(ModelConfig(hidden_dim=32, num_heads=2, depth=2), seed=0)
data = generate_dataset(4, 6, seed=3)
train_stage1(model, data, steps=200, rng=np.random.default_rng(1), lr=1e-3, batch_size=2)

# winners are real frames, losers are the same frame with the identity patch
# swapped, scrambled or noised
pools = build_preference_pools(data, 3, np.random.default_rng(2))
train_pools, held_pools = split_pools(pools, 2)
held = draw_pairs(held_pools, 64, np.random.default_rng(3))
print(len(train_pools), "training pools,", len(held_pools), "held out")

model.adapters.reset_phi_d(np.random.default_rng(4))
print("loss at init: %.6f (ln 2 = %.6f)" % (loss_dpo(model, held[0], 1800.0).item(), math.log(2)))
print("accuracy at init:", implicit_reward_accuracy(model, held))

# %%
# A short run at a larger learning rate than the default so that something
# happens within a few hundred steps.

hist = train_stage2(model, train_pools, DpoConfig(steps=300, learning_rate=1e-4), np.random.default_rng(5),
                    heldout=held, eval_every=100)
for h in hist:
    if h.heldout_accuracy is not None:
        recent = hist[max(0, h.step - 100):h.step]
        print("step %3d  loss %.3f  held-out accuracy %.3f" % (h.step, np.mean([r.loss for r in recent]),
                                                             h.heldout_accuracy))
