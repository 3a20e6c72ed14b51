"""Gaussian-copula features, shrunk covariances and Mahalanobis distances."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from mrcgat.data import RELATIONS, ModalityPartition
from mrcgat.errors import DegenerateEpisodeError
from mrcgat.numeric.linalg import whiten
from mrcgat.numeric.special import rank_quantile_table

LAMBDA_MIN = 0.05


def rank_gaussianize(x: np.ndarray) -> np.ndarray:
    """Map each column to normal scores ``Phi^-1((r + 1) / (N + 1))``.

    ``r`` is the 0-based rank within the column; tied values share the
    average of their ranks. The result depends on the data only through
    ranks, so it is unchanged by any strictly increasing transform.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise DegenerateEpisodeError(f"rank Gaussianization needs N >= 2 samples, got {n}")
    twice_rank = (2.0 * rankdata(x, method="average", axis=0)).astype(np.intp) - 2
    return rank_quantile_table(n)[twice_rank]


@dataclass(frozen=True)
class ShrunkCovariance:
    cov: np.ndarray
    lambda_used: float


def ledoit_wolf_lambda(z: np.ndarray) -> float:
    """Optimal shrinkage intensity towards ``mu * I`` (Ledoit and Wolf, 2004).

    ``z`` is treated as already centred, which holds for copula scores.
    The estimate is ``min(b2, d2) / d2`` with ``d2`` the squared distance of
    the scatter matrix from its scaled-identity target and ``b2`` the
    averaged squared deviation of the per-sample outer products.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    s = z.T @ z / n
    mu = np.trace(s) / d
    d2 = float(((s - mu * np.eye(d)) ** 2).sum())
    if d2 <= 0.0:
        return 1.0
    sq = z ** 2
    # sum_k ||z_k z_k^T - S||_F^2 expanded without the n x d x d tensor
    b2 = float(((sq.T @ sq).sum() / n - (s ** 2).sum()) / n)
    return min(max(b2, 0.0), d2) / d2


def shrink_covariance(z: np.ndarray, lam: float | None = None,
                      lam_min: float = LAMBDA_MIN) -> ShrunkCovariance:
    """``(1 - lam) * S + lam * tr(S) / d * I`` with ``S = Z^T Z / (N - 1)``.

    When ``lam`` is None it is estimated with :func:`ledoit_wolf_lambda`
    and clamped to ``[lam_min, 1]``.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if n < 2:
        raise DegenerateEpisodeError(f"covariance needs N >= 2 samples, got {n}")
    if lam is None:
        lam = min(1.0, max(lam_min, ledoit_wolf_lambda(z)))
    elif not 0.0 <= lam <= 1.0:
        raise ValueError(f"shrinkage must lie in [0, 1], got {lam}")
    s = z.T @ z / (n - 1)
    target = np.trace(s) / d
    if lam == 1.0:
        cov = target * np.eye(d)
    else:
        cov = (1.0 - lam) * s
        cov[np.diag_indices(d)] += lam * target
        cov = 0.5 * (cov + cov.T)
    return ShrunkCovariance(cov, float(lam))


def mahalanobis_matrix(z: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances between all rows of ``z``.

    Rows are whitened with the Cholesky factor of ``cov`` and compared by
    explicit differences, which keeps the result exactly symmetric with a
    zero diagonal.
    """
    y = whiten(z, cov)
    diff = y[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


class CopulaReference:
    """Copula statistics fitted once on a reference split.

    New rows are ranked by insertion into the reference column, i.e. with
    ``N_ref + 1`` samples, and share the reference covariance.
    """

    def __init__(self, features: np.ndarray, partition: ModalityPartition, lam: float | None = None):
        self.partition = partition
        self.sorted = np.sort(np.asarray(features, dtype=np.float64), axis=0)
        self.n_ref = self.sorted.shape[0]
        z_ref = rank_gaussianize(features)
        self.covariances = {g: shrink_covariance(z_ref[:, partition.slice(g)], lam) for g in RELATIONS}

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        twice_rank = np.empty(x.shape, dtype=np.intp)
        for j in range(x.shape[1]):
            col = self.sorted[:, j]
            # 2 * (#smaller + #equal / 2) among the reference plus the new value
            twice_rank[:, j] = (np.searchsorted(col, x[:, j], side="left")
                                + np.searchsorted(col, x[:, j], side="right"))
        return rank_quantile_table(self.n_ref + 1)[twice_rank]


def copula_distances(x: np.ndarray, partition: ModalityPartition, lam: float | None = None,
                     reference: CopulaReference | None = None):
    """Per-relation copula scores, covariances and distance matrices for a node set.

    Returns ``(z, covariances, distances)``: ``z`` is the full ``(N, F)``
    score matrix and the other two are dicts keyed by relation.
    """
    if reference is None:
        z = rank_gaussianize(x)
        covs = {g: shrink_covariance(z[:, partition.slice(g)], lam) for g in RELATIONS}
    else:
        z = reference.transform(x)
        covs = reference.covariances
    dists = {g: mahalanobis_matrix(z[:, partition.slice(g)], covs[g].cov) for g in RELATIONS}
    return z, covs, dists


def relation_blocks(z: np.ndarray, partition: ModalityPartition) -> Mapping[str, np.ndarray]:
    return {g: z[:, partition.slice(g)] for g in RELATIONS}
