"""The six training objectives and a finite-difference check of each gradient.

Run with ``python3 demos/03_losses_and_gradients.py``.
"""
import numpy as np

from embdistill import losses as L

rng = np.random.default_rng(3)
labels = np.repeat([0, 1, 2], 4)
emb = rng.normal(size=(12, 6)) + 2.0 * labels[:, None]
teacher = rng.normal(size=(12, 24)) + 2.0 * labels[:, None]

proxies = L.ProxyBank.create([0, 1, 2], 6, seed=0, std=1.0)
centroids = L.CentroidBank.from_teacher(teacher, labels, 6, seed=0)

objectives = {
    "triplet": lambda e: L.triplet_loss(e, labels),
    "proxynca": lambda e: L.proxynca_loss(e, labels, proxies),
    "normalized-softmax": lambda e: L.normalized_softmax_loss(e, labels, proxies),
    "group": lambda e: L.group_loss(e, labels),
    "distance-match": lambda e: L.distance_matching_loss(e, teacher),
    "cluster-match": lambda e: L.db_cluster_loss(e, labels, centroids),
}


def central_difference(f, x, h=1e-3):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


for name, f in objectives.items():
    out = f(emb)
    g = out.grads["emb"]
    numeric = central_difference(lambda e: f(e).value, emb.copy())
    err = np.linalg.norm(g - numeric) / max(np.linalg.norm(numeric), 1e-8)
    print(f"{name:20s} loss={out.value:9.4f}  |grad|={np.linalg.norm(g):8.4f}  rel.err={err:.1e}")

# Distance matching is zero for any student that reproduces the teacher's
# distances, e.g. a rotated copy of the teacher.
q, _ = np.linalg.qr(rng.normal(size=(24, 24)))
print("distance-match on a rotated teacher:", L.distance_matching_loss(teacher @ q, teacher).value)
