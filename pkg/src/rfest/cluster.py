"""k-means++ clustering, cluster-count diagnostics, exact t-SNE and cluster profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rfest.tabular import CATEGORICAL, Dataset

NO_STRUCTURE_SILHOUETTE = 0.4


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _check_complete(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if np.isnan(X).any():
        raise ValueError("clustering needs complete rows; impute missing cells first")
    return X


@dataclass(frozen=True, eq=False)
class KMeansModel:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    n_iter: int
    inertia_history: tuple[float, ...] = field(default=(), repr=False)

    def predict(self, X) -> np.ndarray:
        return np.argmin(_sq_dists(_check_complete(X), self.centroids), axis=1)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """First center uniform, each next one drawn with probability ~ D(x)^2."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dists(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300):
    """Alternate assignment and mean updates until the assignment is stable.

    Empty clusters keep their previous centroid. Returns
    (centroids, labels, inertia history, iterations).
    """
    centroids = centroids.copy()
    d = _sq_dists(X, centroids)
    labels = np.argmin(d, axis=1)
    history = [float(d[np.arange(len(X)), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
        d = _sq_dists(X, centroids)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(X)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, history, n_iter


def _exact_inertia(X, centroids, labels) -> float:
    return float(((X - centroids[labels]) ** 2).sum())


def kmeans_fit(X, k: int, seed: int = 0, max_iter: int = 300, init=None) -> KMeansModel:
    X = _check_complete(X)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if init is None:
        init = kmeans_pp_init(X, k, np.random.default_rng(seed))
    centroids, labels, history, n_iter = lloyd(X, np.asarray(init, dtype=float), max_iter)
    return KMeansModel(k, centroids, labels, _exact_inertia(X, centroids, labels), seed,
                       n_iter, tuple(history))


def silhouette(X, labels) -> float:
    """Mean silhouette width with Euclidean distances."""
    X = _check_complete(X)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = np.sqrt(_sq_dists(X, X))
    np.fill_diagonal(D, 0.0)
    n = len(labels)
    sums = np.column_stack([D[:, labels == c].sum(axis=1) for c in uniq])
    sizes = np.array([(labels == c).sum() for c in uniq])
    own = np.searchsorted(uniq, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes[None, :]
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    s = np.where(own_size > 1, (b - a) / np.maximum(a, b), 0.0)
    return float(s.mean())


@dataclass(frozen=True)
class KDiagnostics:
    ks: tuple[int, ...]
    inertia: tuple[float, ...]
    silhouette: tuple[float, ...]
    models: dict = field(repr=False, compare=False)

    @property
    def best_k(self) -> int:
        return self.ks[int(np.argmax(self.silhouette))]

    @property
    def has_structure(self) -> bool:
        return max(self.silhouette) >= NO_STRUCTURE_SILHOUETTE

    def rows(self) -> list[dict]:
        return [{"k": k, "inertia": i, "silhouette": s, "selected": k == self.best_k}
                for k, i, s in zip(self.ks, self.inertia, self.silhouette)]


def best_of_restarts(X, k: int, seed: int, restarts: int = 10, extra_inits=()) -> KMeansModel:
    best = None
    for r in range(restarts):
        m = kmeans_fit(X, k, seed=int(np.random.default_rng([seed, k, r]).integers(2**31)))
        if best is None or m.inertia < best.inertia:
            best = m
    for init in extra_inits:
        m = kmeans_fit(X, k, seed=seed, init=init)
        if m.inertia < best.inertia:
            best = m
    return best


def choose_k(X, k_max: int, seed: int = 0, restarts: int = 10) -> KDiagnostics:
    """Fit k = 2..k_max and report inertia and silhouette for each.

    Besides the k-means++ restarts, each k is also started from the best
    (k-1) solution plus its worst-fit point, so the best inertia cannot
    increase with k.
    """
    X = _check_complete(X)
    n = X.shape[0]
    if not 2 <= k_max <= n - 1:
        raise ValueError(f"k_max must satisfy 2 <= k_max <= n - 1, got {k_max} (n={n})")
    ks, inertias, sils, models = [], [], [], {}
    prev = None
    for k in range(2, k_max + 1):
        extra = []
        if prev is not None:
            resid = ((X - prev.centroids[prev.labels]) ** 2).sum(axis=1)
            extra.append(np.vstack([prev.centroids, X[int(np.argmax(resid))]]))
        model = best_of_restarts(X, k, seed, restarts, extra)
        ks.append(k)
        inertias.append(model.inertia)
        sils.append(silhouette(X, model.labels))
        models[k] = model
        prev = model
    return KDiagnostics(tuple(ks), tuple(inertias), tuple(sils), models)


# ---------------------------------------------------------------- t-SNE

PERPLEXITY_RTOL = 1e-3


def _row_entropy(d_row: np.ndarray, beta: float):
    p = np.exp(-(d_row - d_row.min()) * beta)
    total = p.sum()
    p /= total
    nz = p > 0
    h = -float((p[nz] * np.log2(p[nz])).sum())
    return p, h


def conditional_probabilities(X, perplexity: float, tol: float = 1e-5, max_steps: int = 200):
    """Row-stochastic p_{j|i} with per-point Gaussian bandwidths.

    Each bandwidth is found by bisection on the Gaussian precision
    so that 2 ** entropy matches ``perplexity`` to relative ``tol``.
    Returns (P_conditional, achieved perplexities, precisions).
    """
    X = _check_complete(X)
    n = X.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if not 1.0 < perplexity <= n - 1:
        raise ValueError(f"perplexity must lie in (1, n - 1], got {perplexity} for n={n}")
    D = _sq_dists(X, X)
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    perps = np.empty(n)
    betas = np.empty(n)
    for i in range(n):
        d_row = np.delete(D[i], i)
        scale = np.median(d_row[d_row > 0]) if np.any(d_row > 0) else 1.0
        lo, hi = 0.0, np.inf
        beta = 1.0 / scale
        for _ in range(max_steps):
            p, h = _row_entropy(d_row, beta)
            if abs(2.0 ** h - perplexity) <= tol * perplexity:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
        perps[i] = 2.0 ** h
        betas[i] = beta
    return P, perps, betas


def joint_probabilities(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def student_q(Y: np.ndarray):
    """Low-dimensional affinities; returns (Q, unnormalized kernel)."""
    num = 1.0 / (1.0 + _sq_dists(Y, Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


def tsne_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    Q, num = student_q(Y)
    W = (P - Q) * num
    return 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y


@dataclass(frozen=True, eq=False)
class EmbeddingResult:
    Y: np.ndarray
    kl: float
    kl_after_exaggeration: float
    perplexity: float
    achieved_perplexity: np.ndarray
    seed: int
    n_iter: int
    history: tuple = field(default=(), repr=False)  # (iteration, kl, q_sum)


def tsne_embed(X, perplexity: float = 30.0, seed: int = 0, n_iter: int = 1000,
               learning_rate: float = 200.0, exaggeration: float = 12.0,
               record_every: int = 50) -> EmbeddingResult:
    """Exact t-SNE into two dimensions.

    Early exaggeration for the first 20% of iterations, momentum 0.5 then
    0.8, and per-coordinate adaptive gains.
    """
    X = _check_complete(X)
    n = X.shape[0]
    if n < 5:
        raise ValueError(f"t-SNE needs at least 5 points, got {n}")
    if not perplexity < n - 1:
        raise ValueError(f"perplexity {perplexity} infeasible for {n} points (need < n - 1)")
    P_cond, perps, _ = conditional_probabilities(X, perplexity, tol=PERPLEXITY_RTOL / 10)
    P = joint_probabilities(P_cond)
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    stop_exag = max(1, int(round(0.2 * n_iter)))
    history = []
    kl_exag = math.nan
    for it in range(n_iter):
        exag = exaggeration if it < stop_exag else 1.0
        momentum = 0.5 if it < stop_exag else 0.8
        grad = tsne_gradient(exag * P, Y)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"t-SNE gradient became non-finite at iteration {it}")
        gains = np.where(np.sign(grad) != np.sign(velocity), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if it + 1 == stop_exag or (it + 1) % record_every == 0 or it + 1 == n_iter:
            Q, _ = student_q(Y)
            kl = kl_divergence(P, Q)
            history.append((it + 1, kl, float(Q.sum())))
            if it + 1 == stop_exag:
                kl_exag = kl
    Q, _ = student_q(Y)
    return EmbeddingResult(Y, kl_divergence(P, Q), kl_exag, perplexity, perps, seed,
                           n_iter, tuple(history))


# ---------------------------------------------------------------- profiles

def cluster_profile(ds: Dataset, labels, columns=None) -> dict:
    """Per-cluster counts, numeric quartiles, categorical shares, target summary."""
    labels = np.asarray(labels)
    if len(labels) != ds.n:
        raise ValueError(f"{len(labels)} labels for {ds.n} rows")
    columns = list(columns) if columns is not None else ds.feature_names
    try:
        target = ds.target_name
    except ValueError:
        target = None
    out = {}
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        sub = ds.take(rows)
        entry = {"count": int(len(rows)), "numeric": {}, "categorical": {}}
        for name in columns:
            if sub.spec(name).kind == CATEGORICAL:
                vals = [v for v in sub[name] if v is not None]
                shares = {}
                for v in sorted(set(vals)):
                    shares[v] = vals.count(v) / len(vals)
                mode = max(shares, key=lambda v: (shares[v], v)) if shares else None
                entry["categorical"][name] = {"mode": mode, "shares": shares}
            else:
                entry["numeric"][name] = _summary(sub[name])
        if target is not None:
            entry["target"] = _summary(sub[target])
        out[int(c)] = entry
    return out


def _summary(values: np.ndarray) -> dict:
    v = values[~np.isnan(values)]
    if len(v) == 0:
        return {"n": 0, "mean": None, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(len(v)), "mean": float(v.mean()), "median": float(med),
            "q1": float(q1), "q3": float(q3), "min": float(v.min()), "max": float(v.max())}
