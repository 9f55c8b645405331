"""Teacher-student distillation into a 16-dimensional embedding.

Run with ``python3 demos/05_distillation.py``.
"""
import numpy as np

from embdistill import ProjectionHead, TrainConfig, evaluate, generate_synthetic, pairwise_distances, preset, train

train_set, val = generate_synthetic(preset("separable"))
teacher_map = evaluate(val).map


def distance_gap(S, T):
    off = ~np.eye(len(T), dtype=bool)
    Ds, Dt = pairwise_distances(S, S), pairwise_distances(T, T)
    return np.abs(Ds - Dt)[off].mean() / Dt[off].mean()


# Distance matching: the student's normalized distances track the teacher's.
# Cluster matching: the student keeps the teacher's clique centroids apart.
for method in ("distance-match", "cluster-match"):
    cfg = TrainConfig(loss=method, optimizer="adam", lr=0.01, epochs=30,
                      milestones=TrainConfig.scaled_milestones(30), d_out=16, eval_metric="eq2")
    res = train(ProjectionHead.init(train_set.d, 16, seed=0), train_set, cfg, val=val)
    S = res.last.head.embed(val.vectors)
    print(f"{method:15s} student MAP {evaluate(val.with_vectors(S)).map:.3f} "
          f"(teacher {teacher_map:.3f}), distance gap {distance_gap(S, val.vectors):.1%}")

# A metric loss can be combined with a distillation term.
cfg = TrainConfig(loss="triplet", distill="distance-match", optimizer="adam", lr=0.01, epochs=15,
                  milestones=TrainConfig.scaled_milestones(15), d_out=16)
res = train(ProjectionHead.init(train_set.d, 16, seed=0), train_set, cfg, val=val)
print(f"triplet + distance-match: best MAP {res.best.val_map:.3f} at epoch {res.best.epoch}")
