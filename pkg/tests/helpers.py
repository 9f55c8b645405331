"""Shared numerics for the test-suite."""

import numpy as np

FD_STEP = 1e-3


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def balanced_labels(rng, classes, per_class):
    labels = np.repeat(np.arange(classes), per_class)
    return rng.permutation(labels)


# --- random gradient-check cases -------------------------------------------------
#
# Several criteria are piecewise smooth (hinge, hardest-example mining, clipped
# correlations, L1 gaps, max over ratios). A central difference with step h is
# only meaningful when no selection flips inside the stencil, so case
# generators reject draws that sit within KINK_MARGIN of a switching point.

KINK_MARGIN = 0.05
LOSS_NAMES = ("triplet", "proxynca", "normalized-softmax", "group", "distance-match", "cluster-match")


def _second_gap(values):
    """Gap between the best and second-best entry of each row (inf if one entry)."""
    s = np.sort(values, axis=1)
    return np.inf if s.shape[1] < 2 else float(np.min(s[:, -1] - s[:, -2]))


def _triplet_margin(E, labels, margin):
    from embdistill.tensor import pairwise_sq_dist
    D = pairwise_sq_dist(E, E)
    gaps = []
    for i in range(len(labels)):
        pos = [D[i, j] for j in range(len(labels)) if j != i and labels[j] == labels[i]]
        neg = [D[i, j] for j in range(len(labels)) if labels[j] != labels[i]]
        if not pos or not neg:
            continue
        gaps.append(abs(max(pos) - min(neg) + margin))
        if len(pos) > 1:
            p = sorted(pos)
            gaps.append(p[-1] - p[-2])
        if len(neg) > 1:
            q = sorted(neg)
            gaps.append(q[1] - q[0])
    return min(gaps) if gaps else np.inf


def _group_margin(E, labels):
    from embdistill.losses import group_loss
    S = np.corrcoef(E)
    off = S[~np.eye(len(S), dtype=bool)]
    out = group_loss(E, labels)
    pt = np.exp(-np.nanmax(out.per_sample))
    # near-zero correlations flip the clipping; tiny probabilities make the
    # log curvature dominate the difference quotient
    return min(float(np.min(np.abs(off))), 1.0 if pt > 1e-3 else 0.0)


def _db_margin(E, labels, bank):
    from embdistill.losses import DB_EPS
    from embdistill.tensor import pairwise_sq_dist
    classes, y = np.unique(labels, return_inverse=True)
    Cp = bank.centroids[bank.index_of(classes)] @ bank.projection.T
    sigma = np.array([pairwise_sq_dist(E[y == k], Cp[k:k + 1]).mean() for k in range(len(classes))])
    Dc = pairwise_sq_dist(Cp, Cp)
    R = (sigma[:, None] + sigma[None, :]) / (Dc + DB_EPS)
    np.fill_diagonal(R, -np.inf)
    # nearly coincident projected centroids blow up the ratio's curvature
    closest = np.min(Dc[~np.eye(len(Dc), dtype=bool)])
    return min(_second_gap(R), 1.0 if closest > 0.5 else 0.0)


def _unit_rows(rng, A, lo=1.0, hi=2.0):
    """Rescale rows to norms in [lo, hi]: scale-invariant criteria keep their
    value, and the finite-difference step stays small relative to each row."""
    return A / np.linalg.norm(A, axis=1, keepdims=True) * rng.uniform(lo, hi, size=(len(A), 1))


def loss_case(name, seed):
    """One random configuration: ``(evaluate, params)`` where ``evaluate()``
    returns the LossOutput and ``params`` maps gradient keys to the arrays
    perturbed in place; ``None`` if the draw is too close to a kink."""
    import embdistill.losses as L
    rng = np.random.default_rng(seed)
    C, K, d = int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 7))
    labels = balanced_labels(rng, C, K) + int(rng.integers(0, 50))
    classes = sorted(set(labels.tolist()))
    E = rng.normal(size=(C * K, d))
    if name == "triplet":
        margin = float(rng.uniform(0.2, 2.0))
        if _triplet_margin(E, labels, margin) < KINK_MARGIN:
            return None
        return (lambda: L.triplet_loss(E, labels, margin)), {"emb": E}
    if name == "proxynca":
        bank = L.ProxyBank(rng.normal(size=(C, d)), classes)
        return (lambda: L.proxynca_loss(E, labels, bank)), {"emb": E, "proxies": bank.proxies}
    if name == "normalized-softmax":
        tau = float(rng.choice([0.05, 0.1, 0.5]))
        E[:] = _unit_rows(rng, E)
        bank = L.ProxyBank(_unit_rows(rng, rng.normal(size=(C, d))), classes)
        return (lambda: L.normalized_softmax_loss(E, labels, bank, tau)), {"emb": E, "proxies": bank.proxies}
    if name == "group":
        # Pearson similarity of 2-vectors is always +-1, so use d >= 3
        d = max(d, 3)
        E = rng.normal(size=(C * K, d))
        E[:] = E.mean(axis=1, keepdims=True) + _unit_rows(rng, E - E.mean(axis=1, keepdims=True))
        if _group_margin(E, labels) < KINK_MARGIN:
            return None
        return (lambda: L.group_loss(E, labels)), {"emb": E}
    if name == "distance-match":
        T = rng.normal(size=(C * K, int(rng.integers(d, 12))))
        from embdistill.tensor import pairwise_sq_dist
        gap = np.abs(pairwise_sq_dist(E, E) - pairwise_sq_dist(T, T))[~np.eye(C * K, dtype=bool)]
        if gap.min() < KINK_MARGIN:
            return None
        return (lambda: L.distance_matching_loss(E, T)), {"emb": E}
    if name == "cluster-match":
        d_t = int(rng.integers(3, 10))
        bank_labels = np.concatenate([labels, rng.choice(classes, size=5)])
        centers = {c: rng.normal(0.0, 3.0, size=d_t) for c in classes}
        T = np.stack([centers[c] for c in bank_labels]) + rng.normal(size=(len(bank_labels), d_t))
        bank = L.CentroidBank.from_teacher(T, bank_labels, d, seed=seed)
        if _db_margin(E, labels, bank) < KINK_MARGIN:
            return None
        return (lambda: L.db_cluster_loss(E, labels, bank)), {"emb": E, "projection": bank.projection}
    raise ValueError(name)


def gradient_cases(name, count=100, start=0):
    """``count`` accepted ``(seed, evaluate, params)`` cases."""
    seed = start
    while count:
        case = loss_case(name, seed)
        if case is not None:
            yield (seed, *case)
            count -= 1
        seed += 1


def max_grad_error(evaluate, params, h=FD_STEP):
    out = evaluate()
    return max(rel_error(out.grads[k], numeric_grad(lambda: evaluate().value, v, h)) for k, v in params.items())
