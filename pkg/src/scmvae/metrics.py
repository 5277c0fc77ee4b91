"""Disentanglement, prediction and generative-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class ScoreMatrix:
    """R^2 of single-latent linear regression per (latent, factor) pair."""

    scores: np.ndarray  # (d_z, k), clipped to [0, 1]


@dataclass(frozen=True)
class EvalReport:
    sap_cls: float
    sap_reg: float
    sap_mean: float
    pcc: float
    pbc: float
    knn_acc: float
    knn_mse: float
    recon_err: float
    nna_cd: float
    nna_emd: float
    t_stat: float
    p_value: float

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Disentanglement


def _simple_regression_r2(x, y):
    """R^2 of one-variable least squares y ~ a*x + b (equals corr^2)."""
    vx = x - x.mean()
    vy = y - y.mean()
    sxx = (vx * vx).sum()
    syy = (vy * vy).sum()
    if sxx == 0 or syy == 0:
        return 0.0
    r = (vx * vy).sum() / np.sqrt(sxx * syy)
    return float(r * r)


def sap(latents, factors):
    """(ScoreMatrix, per-factor SAP, mean SAP).

    Per factor, SAP is the gap between the best and second-best single
    latent dimension's predictability (regression R^2) of that factor.
    """
    latents = np.asarray(latents, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if factors.ndim == 1:
        factors = factors[:, None]
    if latents.shape[0] < 10:
        raise ValueError("sap needs at least 10 samples")
    dz, k = latents.shape[1], factors.shape[1]
    s = np.zeros((dz, k))
    for i in range(dz):
        for j in range(k):
            s[i, j] = _simple_regression_r2(latents[:, i], factors[:, j])
    s = np.clip(s, 0.0, 1.0)
    per_factor = np.empty(k)
    for j in range(k):
        top2 = np.sort(s[:, j])[-2:]
        per_factor[j] = top2[1] - top2[0]
    return ScoreMatrix(s), per_factor, float(per_factor.mean())


def pcc(x, y) -> float:
    """Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("pcc needs two equal-length vectors of >= 3 samples")
    vx, vy = x - x.mean(), y - y.mean()
    den = np.sqrt((vx * vx).sum() * (vy * vy).sum())
    if den == 0:
        raise ValueError("pcc undefined for zero-variance input")
    return float((vx * vy).sum() / den)


def pbc(binary, continuous) -> float:
    """Point-biserial correlation between a binary label and a continuous variable."""
    b = np.asarray(binary)
    x = np.asarray(continuous, dtype=np.float64)
    if b.shape != x.shape or b.size < 3:
        raise ValueError("pbc needs two equal-length vectors of >= 3 samples")
    n = b.size
    n1 = int(np.sum(b == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("pbc needs both classes present")
    s = x.std(ddof=1)
    if s == 0:
        raise ValueError("pbc undefined for zero-variance input")
    m1 = x[b == 1].mean()
    m0 = x[b == 0].mean()
    return float((m1 - m0) / s * np.sqrt(n1 * n0 / (n * (n - 1))))


# ---------------------------------------------------------------------------
# KNN prediction


def knn_predict(train_values, train_labels, test_values, test_labels,
                k: int = 5, mode: str = "classify") -> float:
    """KNN on a single latent slot: accuracy (%) or MSE against test labels.

    Ties in the vote are broken towards the lower label; neighbor ties are
    resolved by index order (stable argsort), keeping the result
    deterministic.
    """
    tr = np.asarray(train_values, dtype=np.float64).reshape(len(train_labels), -1)
    te = np.asarray(test_values, dtype=np.float64).reshape(len(test_labels), -1)
    tr_y = np.asarray(train_labels)
    te_y = np.asarray(test_labels)
    k = min(k, len(tr_y))
    d = ((te[:, None, :] - tr[None, :, :]) ** 2).sum(axis=2)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    if mode == "classify":
        preds = np.empty(len(te_y), dtype=tr_y.dtype)
        for i, row in enumerate(nn):
            labels, counts = np.unique(tr_y[row], return_counts=True)
            preds[i] = labels[np.argmax(counts)]
        return float(np.mean(preds == te_y) * 100.0)
    if mode == "regress":
        preds = tr_y[nn].mean(axis=1)
        return float(np.mean((preds - te_y) ** 2))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Reconstruction / point-set distances


def recon_error(x, x_hat) -> float:
    """Mean over meshes of the per-vertex mean squared Euclidean distance."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"recon_error: {x.shape} vs {x_hat.shape}")
    d2 = ((x - x_hat) ** 2).sum(axis=-1)  # (B, N)
    return float(d2.mean(axis=-1).mean())


def chamfer(x, y) -> float:
    """Symmetric mean nearest-neighbor squared distance between point sets."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    if len(x) * len(y) > 65536:
        # KD-tree nearest neighbors; exact, avoids the quadratic matrix
        tx, ty = cKDTree(x), cKDTree(y)
        dx = ty.query(x, k=1)[0]
        dy = tx.query(y, k=1)[0]
        return float((dx ** 2).mean() + (dy ** 2).mean())
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def emd(x, y) -> float:
    """Minimum-cost perfect matching (mean squared-Euclidean cost per point).

    Exact, via the Hungarian algorithm; requires equal-size sets.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError(f"emd requires equal sizes, got {len(x)} and {len(y)}")
    if len(x) == 0:
        raise ValueError("emd needs non-empty point sets")
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(d)
    return float(d[rows, cols].mean())


def _subsample(points, size, seed):
    if len(points) <= size:
        return points
    idx = np.random.default_rng(seed).choice(len(points), size=size, replace=False)
    return points[np.sort(idx)]


def one_nna(generated, reference, distance: str = "cd",
            emd_points: int = 256, seed: int = 0) -> float:
    """Leave-one-out 1-NN two-sample classification accuracy (percent).

    Elements of both sets are point clouds; pairwise dissimilarity is
    Chamfer or EMD (clouds subsampled to ``emd_points`` for EMD
    tractability). 50% means the two sets are indistinguishable.
    Nearest-neighbor ties break towards the lowest index.
    """
    gen = [np.asarray(p, dtype=np.float64) for p in generated]
    ref = [np.asarray(p, dtype=np.float64) for p in reference]
    if len(gen) != len(ref) or len(gen) < 2:
        raise ValueError("one_nna needs equal-size sets with >= 2 elements each")
    if distance == "emd":
        clouds = [_subsample(p, emd_points, seed) for p in gen + ref]
        fn = emd
    elif distance == "cd":
        clouds = gen + ref
        fn = chamfer
    else:
        raise ValueError(f"unknown distance {distance!r}")
    m = len(clouds)
    d = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            d[i, j] = d[j, i] = fn(clouds[i], clouds[j])
    np.fill_diagonal(d, np.inf)
    nearest = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
    labels = np.array([0] * len(gen) + [1] * len(ref))
    return float(np.mean(labels[nearest] == labels) * 100.0)


# ---------------------------------------------------------------------------
# Significance


def one_sample_ttest(differences, hypothesized_mean: float = 0.0):
    """One-sample t statistic and two-sided p-value."""
    d = np.asarray(differences, dtype=np.float64)
    if d.size < 2:
        raise ValueError("one_sample_ttest needs n >= 2")
    s = d.std(ddof=1)
    if s == 0:
        raise ValueError("one_sample_ttest undefined for zero sample variance")
    t = (d.mean() - hypothesized_mean) / (s / np.sqrt(d.size))
    p = 2.0 * stats.t.sf(abs(t), df=d.size - 1)
    return float(t), float(p)
