"""Patch-feature measurements: PCA, kNN entropy and mutual information,
feature-norm maps and expert-utilization tables."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from . import autodiff as ad
from .backbone import forward_bvt, forward_vel
from .data import substream
from .errors import ContractError
from .fileio import write_csv, write_pgm

JITTER = 1e-10


# ------------------------------------------------------------------------ PCA


@dataclass(frozen=True)
class PCAProjector:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def k(self):
        return len(self.explained_variance)

    def apply(self, x):
        return pca_apply(self, x)

    def inverse(self, coords):
        return np.asarray(coords) @ self.components + self.mean


def pca_fit(samples, k=5):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"PCA expects an (n, d) array, got shape {x.shape}")
    n, d = x.shape
    if k > d:
        raise ContractError(f"cannot keep {k} components of {d}-dimensional data")
    if n <= k:
        raise ContractError(f"PCA to {k} dims needs more than {k} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    return PCAProjector(mean, vecs[:, order].T.copy(), np.maximum(vals[order], 0.0))


def pca_apply(projector, samples):
    x = np.asarray(samples, dtype=np.float64)
    return (x - projector.mean) @ projector.components.T


# ------------------------------------------------------------ kNN estimators


@dataclass(frozen=True)
class MIEstimate:
    value: float  # nats
    n: int
    k: int

    def __float__(self):
        return self.value


def _as_samples(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ContractError(f"{name} must be (n,) or (n, d), got shape {x.shape}")
    return x


def _jitter(x, seed):
    return x + JITTER * substream(seed, "knn-jitter").standard_normal(x.shape)


def _cheb(a, b):
    """Max-norm distances between rows of ``a`` (c, d) and ``b`` (n, d)."""
    out = np.abs(a[:, None, 0] - b[None, :, 0])
    for j in range(1, a.shape[1]):
        np.maximum(out, np.abs(a[:, None, j] - b[None, :, j]), out=out)
    return out


def _chunks(n, size=512):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def _kth_distance(x, k):
    n = len(x)
    eps = np.empty(n)
    for s, e in _chunks(n):
        d = _cheb(x[s:e], x)
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        eps[s:e] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return eps


def _check_n(n, k):
    if k < 1:
        raise ContractError("k must be >= 1")
    if n < 2 * k:
        raise ContractError(f"kNN estimation with k={k} needs at least {2 * k} samples, got {n}")


def knn_entropy(x, k=3, seed=0):
    """Kozachenko-Leonenko differential entropy in nats (max-norm balls)."""
    x = _as_samples(x, "x")
    n, d = x.shape
    _check_n(n, k)
    r = _kth_distance(_jitter(x, seed), k)
    return float(digamma(n) - digamma(k) + d * np.log(2.0) + d * np.mean(np.log(r)))


def knn_mutual_information(x, y, k=3, seed=0):
    """Kraskov-Stoegbauer-Grassberger estimator (algorithm 1, max-norm)."""
    x, y = _as_samples(x, "x"), _as_samples(y, "y")
    if len(x) != len(y):
        raise ContractError(f"x has {len(x)} samples but y has {len(y)}")
    n = len(x)
    _check_n(n, k)
    x = _jitter(x, seed)
    y = _jitter(y, seed + 1)
    acc = 0.0
    for s, e in _chunks(n, 256):
        rows = np.arange(e - s)
        dx, dy = _cheb(x[s:e], x), _cheb(y[s:e], y)
        joint = np.maximum(dx, dy)
        joint[rows, np.arange(s, e)] = np.inf
        eps = np.partition(joint, k - 1, axis=1)[:, k - 1][:, None]
        # strict inequality; the self-distance (0) is counted, then removed
        nx = (dx < eps).sum(axis=1) - 1
        ny = (dy < eps).sum(axis=1) - 1
        acc += float(np.sum(digamma(nx + 1) + digamma(ny + 1)))
    value = digamma(k) + digamma(n) - acc / n
    return MIEstimate(float(value), n, k)


# ---------------------------------------------------------------- maps, tables


def feature_norm_map(tokens, grid):
    t = np.asarray(tokens.data if isinstance(tokens, ad.Tensor) else tokens, dtype=np.float64)
    rows, cols = grid
    if t.ndim != 2 or t.shape[0] != rows * cols:
        raise ContractError(f"tokens of shape {t.shape} do not fit a {rows}x{cols} grid")
    return np.sqrt((t * t).sum(axis=1)).reshape(rows, cols)


@dataclass
class Utilization:
    per_layer: np.ndarray  # (N, L)
    per_teacher: np.ndarray | None  # (N, I, L), rows with no events stay zero
    events: int


def expert_utilization(logs, n_layers=None, n_experts=None, n_teachers=None):
    """Normalised hard-selection frequencies from ``forward_vel`` trace records.

    ``logs`` is a list of records, or a list of such lists (one per run).
    Records with a ``teacher`` entry also feed the per-teacher table.
    """
    flat = []
    for item in logs:
        flat.extend(item if isinstance(item, (list, tuple)) else [item])
    if not flat:
        raise ContractError("no selection records")
    n_layers = n_layers or 1 + max(r["layer"] for r in flat)
    n_experts = n_experts or 1 + max(int(np.max(r["selected"])) for r in flat)
    with_teacher = [r for r in flat if r.get("teacher") is not None]
    if with_teacher and n_teachers is None:
        n_teachers = 1 + max(int(np.max(r["teacher"])) for r in with_teacher)

    counts = np.zeros((n_layers, n_experts))
    tcounts = np.zeros((n_layers, n_teachers, n_experts)) if with_teacher else None
    for r in flat:
        sel = np.asarray(r["selected"])
        counts[r["layer"]] += np.bincount(sel.ravel(), minlength=n_experts)
        if tcounts is not None and r.get("teacher") is not None:
            per_frame = sel.reshape(sel.shape[0], -1) if sel.ndim == 3 else sel.reshape(1, -1)
            teacher = np.broadcast_to(np.asarray(r["teacher"]), (per_frame.shape[0],))
            for i in np.unique(teacher):
                tcounts[r["layer"], i] += np.bincount(per_frame[teacher == i].ravel(), minlength=n_experts)
    per_layer = _normalise(counts)
    per_teacher = _normalise(tcounts) if tcounts is not None else None
    return Utilization(per_layer, per_teacher, int(counts[0].sum()))


def _normalise(c):
    tot = c.sum(axis=-1, keepdims=True)
    return np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)


# ------------------------------------------------------------ per-patch MI


def collect_features(source, images, strategy=None, *, step=0, k=None, cta=None, batch_size=100):
    """Pre-VEL ``z`` and post-VEL ``y`` token features, both (n, T, M).

    ``source`` is a finetuned run (its own strategy, K and schedule are used)
    or a model together with ``strategy``.
    """
    if hasattr(source, "features"):
        model, strategy, step, k, cta = source.model, source.strategy, source.steps, source.k, source.cta
    else:
        model = source
        if strategy is None:
            raise ContractError("a routing strategy is required when passing a bare model")
    zs, ys = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            z = forward_bvt(model, images[s:s + batch_size])
            ys.append(forward_vel(model, z, strategy, step, k=k, cta=cta).data)
            zs.append(z.data)
    return np.concatenate(zs), np.concatenate(ys)


def per_patch_mi_before_after(source, images, strategy=None, fraction=0.3, *, seed=0, k=3,
                              n_components=5, grid=None, **route):
    """Per-patch KSG mutual information between pre- and post-VEL features.

    A seeded ``fraction`` of ``images`` is used. At every patch position both
    feature sets are reduced to ``n_components`` dims by PCA before estimation.
    Returns an array shaped like the patch grid.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError("fraction must lie in (0, 1]")
    images = np.asarray(images)
    n = int(round(fraction * len(images)))
    if n < max(2 * k, n_components + 1):
        raise ContractError(f"{n} samples are too few for PCA to {n_components} dims and k={k}")
    pick = np.sort(substream(seed, "mi-subset").choice(len(images), size=n, replace=False))
    z, y = collect_features(source, images[pick], strategy, **route)
    T = z.shape[1]
    if grid is None:
        side = int(round(np.sqrt(T)))
        grid = (side, T // side)
    if grid[0] * grid[1] != T:
        raise ContractError(f"{T} patches do not fit a {grid[0]}x{grid[1]} grid")
    out = np.empty(T)
    for t in range(T):
        a = pca_apply(pca_fit(z[:, t], n_components), z[:, t])
        b = pca_apply(pca_fit(y[:, t], n_components), y[:, t])
        out[t] = knn_mutual_information(a, b, k, seed).value
    return out.reshape(grid)


def save_map(path_stem, values):
    """Write ``<stem>.pgm`` (scaled) and ``<stem>.csv`` (raw values); returns both paths."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ContractError(f"maps are 2-D, got shape {v.shape}")
    stem = os.fspath(path_stem)
    write_pgm(stem + ".pgm", v)
    write_csv(stem + ".csv", ["row"] + [f"col{j}" for j in range(v.shape[1])],
              [[i] + [float(x) for x in row] for i, row in enumerate(v)])
    return stem + ".pgm", stem + ".csv"


def save_table(path, table, row_label="layer", col_label="expert"):
    t = np.asarray(table, dtype=np.float64)
    if t.ndim == 2:
        write_csv(path, [row_label] + [f"{col_label}{j}" for j in range(t.shape[1])],
                  [[i] + [float(x) for x in row] for i, row in enumerate(t)])
    elif t.ndim == 3:
        write_csv(path, [row_label, "teacher"] + [f"{col_label}{j}" for j in range(t.shape[2])],
                  [[n, i] + [float(x) for x in t[n, i]] for n in range(t.shape[0]) for i in range(t.shape[1])])
    else:
        raise ContractError(f"tables are 2-D or 3-D, got shape {t.shape}")
    return os.fspath(path)
