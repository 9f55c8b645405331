"""Iterative magnitude pruning of projection rows with rewinding.

Each round trains the head, keeps the half of the active rows with the
largest mean absolute weight, and resets the survivors to their initial
values before retraining.

Run with ``python3 demos/06_pruning_with_rewinding.py``.
"""
import numpy as np

from embdistill import ProjectionHead, PruneState, TrainConfig, generate_synthetic, preset, prune_step, run_pruning

# A single step, by hand.
head = ProjectionHead.init(8, 6, seed=0)
state = PruneState.start(head)
trained_W = head.W + np.random.default_rng(1).normal(size=head.W.shape)
state, W_new, _ = prune_step(state, trained_W)
print("mask after one step:", state.active_mask.astype(int))
print("survivors equal initial rows:", np.array_equal(W_new[state.active_mask], state.W_init[state.active_mask]))

# The full loop on synthetic data, 128 -> 8 rows.
train_set, val = generate_synthetic(preset("separable"))
cfg = TrainConfig(loss="triplet", optimizer="adam", lr=0.01, epochs=8,
                  milestones=TrainConfig.scaled_milestones(8))
run = run_pruning(ProjectionHead.init(train_set.d, 128, seed=0), train_set, cfg, val,
                  max_iterations=6, max_map_drop=0.05, min_dim=8)
for row in run.state.history:
    print(f"iteration {row['iteration']}  rows {row['kept_dim']:>4}  val MAP {row['val_map']:.3f}")
print("stopped because:", run.stopped_because)
