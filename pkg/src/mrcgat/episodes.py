"""Episode sampling and construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mrcgat.config import TrainingConfig
from mrcgat.copula import CopulaReference, ShrunkCovariance, copula_distances
from mrcgat.data import Dataset, InputScaler, ModalityPartition
from mrcgat.errors import SamplingError
from mrcgat.graph import RelationalGraph, build_relational_graphs
from mrcgat.numeric.rng import RngStream


@dataclass
class Episode:
    """``C * q`` support nodes (class-major) followed by one query node.

    ``labels`` gives each node's class with the query's true label last
    (``-1`` when unknown). ``x`` is the network input: the node features
    (scaled raw values or copula scores, see ``node_input``) plus, when
    enabled, a one-hot support-label channel that is all zeros on the query
    row.
    """

    subject_ids: tuple[str, ...]
    labels: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariances: Mapping[str, ShrunkCovariance]
    distances: Mapping[str, np.ndarray]
    graphs: Mapping[str, RelationalGraph]
    q: int
    n_classes: int

    @property
    def n_nodes(self) -> int:
        return self.labels.size

    @property
    def query(self) -> int:
        return self.n_nodes - 1

    @property
    def query_label(self) -> int | None:
        lab = int(self.labels[-1])
        return None if lab < 0 else lab


def sample_support(labels: np.ndarray, pool: np.ndarray, n_classes: int, q: int, rng: RngStream,
                   class_names: Sequence[str] | None = None, exclude: int | None = None) -> np.ndarray:
    """Draw ``q`` pool positions per class without replacement, class-major."""
    chosen = []
    for c in range(n_classes):
        cand = pool[(labels[pool] == c) & (pool != (-1 if exclude is None else exclude))]
        if cand.size < q:
            name = class_names[c] if class_names else str(c)
            raise SamplingError(f"class {name} has {cand.size} labeled subjects, need q={q}")
        chosen.append(cand[rng.choice(cand.size, q)])
    return np.concatenate(chosen)


def sample_training_indices(dataset: Dataset, pool: np.ndarray, q: int, rng: RngStream) -> tuple[np.ndarray, int]:
    """Balanced support plus a query drawn from the remaining labeled pool subjects."""
    pool = pool[dataset.labels[pool] >= 0]
    support = sample_support(dataset.labels, pool, dataset.n_classes, q, rng, dataset.class_names)
    rest = np.setdiff1d(pool, support)
    if rest.size == 0:
        raise SamplingError("no labeled subject left for the query after drawing the support")
    return support, int(rest[rng.choice(rest.size, 1)[0]])


def build_episode(support_features: np.ndarray, support_labels: np.ndarray, query_features: np.ndarray,
                  partition: ModalityPartition, n_classes: int, config: TrainingConfig, *,
                  query_label: int | None = None, subject_ids: Sequence[str] | None = None,
                  reference: CopulaReference | None = None, scaler: InputScaler | None = None) -> Episode:
    """Copula graphs over support plus query, and the matching network input.

    With ``node_input = "raw"`` the input is ``scaler.apply(features)``
    (the unscaled features when ``scaler`` is None).
    """
    feats = np.vstack([support_features, np.asarray(query_features, dtype=np.float64)[None, :]])
    labels = np.append(np.asarray(support_labels, dtype=np.int64), -1 if query_label is None else query_label)
    z, covs, dists = copula_distances(feats, partition, config.shrinkage, reference)
    # tiny episodes (small q) cannot offer k neighbours; use all of them instead
    graphs = build_relational_graphs(dists, min(config.k, labels.size - 1), config.tau, config.fallback)
    if config.node_input == "copula":
        x = z
    else:
        x = feats if scaler is None else scaler.apply(feats)
    if config.label_channel:
        onehot = np.zeros((labels.size, n_classes))
        onehot[np.arange(labels.size - 1), labels[:-1]] = 1.0
        x = np.hstack([x, onehot])
    ids = tuple(subject_ids) if subject_ids is not None else tuple(str(i) for i in range(labels.size))
    q = (labels.size - 1) // n_classes
    return Episode(ids, labels, z, x, covs, dists, graphs, q, n_classes)


def episode_from_indices(dataset: Dataset, support: np.ndarray, query: int, config: TrainingConfig,
                         reference: CopulaReference | None = None, query_dataset: Dataset | None = None,
                         reveal_query_label: bool = True, scaler: InputScaler | None = None) -> Episode:
    qd = query_dataset or dataset
    qlab = int(qd.labels[query]) if reveal_query_label and qd.labels[query] >= 0 else None
    ids = [dataset.subject_ids[i] for i in support] + [qd.subject_ids[query]]
    return build_episode(dataset.features[support], dataset.labels[support], qd.features[query],
                         dataset.partition, dataset.n_classes, config, query_label=qlab,
                         subject_ids=ids, reference=reference, scaler=scaler)


def sample_episode(dataset: Dataset, q: int, rng: RngStream, config: TrainingConfig,
                   pool: np.ndarray | None = None, reference: CopulaReference | None = None,
                   scaler: InputScaler | None = None) -> Episode:
    """Draw a balanced support and a query from the labeled ``pool`` and build the episode."""
    pool = np.arange(len(dataset)) if pool is None else np.asarray(pool)
    support, query = sample_training_indices(dataset, pool, q, rng)
    return episode_from_indices(dataset, support, query, config.replace(q=q), reference, scaler=scaler)
