"""Episodic training, inference and cross-validation."""
from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from mrcgat.config import TrainingConfig
from mrcgat.copula import CopulaReference
from mrcgat.data import Dataset, InputScaler
from mrcgat.episodes import Episode, episode_from_indices, sample_support, sample_training_indices
from mrcgat.errors import LeakageError, NumericalError
from mrcgat.metrics import ScoredPrediction, metrics_report
from mrcgat.model import Architecture, forward, init_params
from mrcgat.numeric.rng import RngStream, derive_stream

FOCAL_CLAMP = 1e-12


def focal_loss(probs, target: int, gamma: float) -> float:
    """``-(1 - p_c)^gamma * log(p_c)`` with ``p_c`` clamped to ``>= 1e-12``."""
    p = max(float(np.asarray(probs, dtype=np.float64)[target]), FOCAL_CLAMP)
    return -((1.0 - p) ** gamma) * math.log(p)


# -- optimizers -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


class SgdState:
    """Plain gradient descent with the same interface as :class:`AdamState`."""

    def __init__(self):
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        return {k: p - lr * grads[k] for k, p in params.items()}


def make_optimizer(config: TrainingConfig, params):
    return AdamState.zeros(params) if config.optimizer == "adam" else SgdState()


# -- per-episode work -------------------------------------------------------------

@dataclass
class EpisodeOutcome:
    loss: float
    probs: np.ndarray
    grads: dict[str, np.ndarray]


def evaluate_episode(params, arch: Architecture, episode: Episode, config: TrainingConfig,
                     dropout_rng: RngStream | None = None) -> EpisodeOutcome:
    fp = forward(params, arch, episode.x, episode.graphs, episode.query, target=episode.query_label,
                 focal_gamma=config.focal_gamma, dropout=config.dropout, rng=dropout_rng)
    grads = fp.gradients(params)
    return EpisodeOutcome(float(fp.loss.value.item()), fp.probabilities, grads)


def _grad_digest(grads: Mapping[str, np.ndarray]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(grads):
        h.update(np.ascontiguousarray(grads[k]).tobytes())
    return h.digest()


def reduce_outcomes(outcomes: Sequence[EpisodeOutcome]) -> tuple[float, dict[str, np.ndarray]]:
    """Batch mean loss and gradient, independent of the order of ``outcomes``.

    Contributions are summed in a canonical order (by loss, then by a
    digest of the gradient bytes), so permuting a batch gives bit-identical
    results.
    """
    if not outcomes:
        raise ValueError("empty batch")
    ordered = sorted(outcomes, key=lambda o: (o.loss, _grad_digest(o.grads)))
    n = len(ordered)
    loss = math.fsum(o.loss for o in ordered) / n
    total = {k: g.copy() for k, g in ordered[0].grads.items()}
    for o in ordered[1:]:
        for k, g in o.grads.items():
            total[k] += g
    return loss, {k: g / n for k, g in total.items()}


@contextmanager
def _executor(threads: int) -> Iterator[Callable]:
    """Yield an order-preserving ``map``; serial when ``threads <= 1``."""
    if threads <= 1:
        yield lambda fn, items: list(map(fn, items))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield lambda fn, items: list(pool.map(fn, items))


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    arch: Architecture
    config: TrainingConfig
    batch_losses: np.ndarray                  # (iterations, batch_size)
    class_names: tuple[str, ...] = ()
    scaler: InputScaler | None = None

    @property
    def mean_loss(self) -> np.ndarray:
        return np.array([math.fsum(row) / row.size for row in self.batch_losses])

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_loss"])
            for i, v in enumerate(self.mean_loss, start=1):
                w.writerow([i, repr(float(v))])


def meta_update(params, arch: Architecture, episodes: Sequence[Episode], optimizer, config: TrainingConfig,
                dropout_rngs: Sequence[RngStream | None] | None = None, run=None):
    """One optimizer step on the mean query focal loss of ``episodes``.

    Returns ``(new_params, batch_loss, per_episode_losses)``.
    """
    rngs = list(dropout_rngs) if dropout_rngs is not None else [None] * len(episodes)
    run = run or (lambda fn, items: list(map(fn, items)))
    outcomes = run(lambda pair: evaluate_episode(params, arch, pair[0], config, pair[1]),
                   list(zip(episodes, rngs)))
    return _apply(params, outcomes, optimizer, config, "batch")


def _apply(params, outcomes, optimizer, config, where):
    loss, grads = reduce_outcomes(outcomes)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError(f"non-finite loss or gradient at {where}")
    return optimizer.step(params, grads, config.learning_rate), loss, [o.loss for o in outcomes]


def fit_scaler(dataset: Dataset, pool: np.ndarray, config: TrainingConfig) -> InputScaler | None:
    return InputScaler.fit(dataset.features[pool]) if config.node_input == "raw" else None


def copula_reference(dataset: Dataset, pool: np.ndarray, config: TrainingConfig) -> CopulaReference | None:
    if config.copula_scope != "split":
        return None
    return CopulaReference(dataset.features[pool], dataset.partition, config.shrinkage)


def train(dataset: Dataset, config: TrainingConfig, *, threads: int = 1,
          pool: np.ndarray | None = None, progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``config.iterations`` meta-updates on episodes drawn from ``pool``.

    Episode ``b`` of iteration ``t`` uses its own random streams derived
    from ``(seed, t, b)``, so results do not depend on ``threads``.
    """
    pool = np.arange(len(dataset)) if pool is None else np.asarray(pool)
    pool = pool[dataset.labels[pool] >= 0]
    arch = Architecture.from_config(config, dataset.n_features, dataset.n_classes)
    params = init_params(arch, config.seed)
    optimizer = make_optimizer(config, params)
    reference = copula_reference(dataset, pool, config)
    scaler = fit_scaler(dataset, pool, config)
    losses = np.zeros((config.iterations, config.batch_size))

    with _executor(threads) as run:
        for t in range(config.iterations):
            snapshot = params

            def job(b, t=t, snapshot=snapshot):
                rng = RngStream(config.seed, derive_stream("episode", t, b))
                support, query = sample_training_indices(dataset, pool, config.q, rng)
                ep = episode_from_indices(dataset, support, query, config, reference, scaler=scaler)
                drop = RngStream(config.seed, derive_stream("dropout", t, b))
                return evaluate_episode(snapshot, arch, ep, config, drop)

            outcomes = run(job, range(config.batch_size))
            params, loss, per = _apply(params, outcomes, optimizer, config,
                                       f"iteration {t + 1} (seed {config.seed})")
            losses[t] = per
            if progress is not None:
                progress(t + 1, loss)
    return TrainResult(params, arch, config, losses, dataset.class_names, scaler)


# -- inference -----------------------------------------------------------------------

def infer(params, arch: Architecture, config: TrainingConfig, pool_dataset: Dataset, queries: Dataset, *,
          ensemble: int | None = None, threads: int = 1, forbidden_ids: set[str] | None = None,
          reference: CopulaReference | None = None, scaler: InputScaler | None = None) -> np.ndarray:
    """Class probabilities for every row of ``queries``.

    Each query is classified in ``ensemble`` episodes whose balanced
    supports are drawn from the labeled rows of ``pool_dataset`` (never the
    query itself). The draws depend only on ``(seed, subject_id, r)`` and
    the query's label is never read. Dropout is off. ``scaler`` must be
    the one fitted at training time when ``node_input`` is raw.
    """
    r_count = ensemble or config.infer_ensemble
    pool = np.flatnonzero(pool_dataset.labels >= 0)
    if reference is None:
        reference = copula_reference(pool_dataset, pool, config)
    row_of = {sid: i for i, sid in enumerate(pool_dataset.subject_ids)}
    eval_cfg = config.replace(dropout=0.0)

    def one(j: int) -> np.ndarray:
        sid = queries.subject_ids[j]
        exclude = row_of.get(sid)
        total = np.zeros(arch.n_classes)
        for r in range(r_count):
            rng = RngStream(config.seed, derive_stream("infer:" + sid, r))
            support = sample_support(pool_dataset.labels, pool, pool_dataset.n_classes, eval_cfg.q, rng,
                                     pool_dataset.class_names, exclude=exclude)
            if forbidden_ids and any(pool_dataset.subject_ids[i] in forbidden_ids for i in support):
                raise LeakageError(f"support for {sid} contains a held-out subject")
            ep = episode_from_indices(pool_dataset, support, j, eval_cfg, reference, queries,
                                      reveal_query_label=False, scaler=scaler)
            total += forward(params, arch, ep.x, ep.graphs, ep.query).probabilities
        probs = total / r_count
        if not np.all(np.isfinite(probs)):
            raise NumericalError(f"non-finite probabilities for subject {sid}")
        return probs

    with _executor(threads) as run:
        rows = run(one, range(len(queries)))
    return np.vstack(rows) if rows else np.zeros((0, arch.n_classes))


def predictions_for(queries: Dataset, probs: np.ndarray) -> list[ScoredPrediction]:
    return [ScoredPrediction(sid, int(lab), p) for sid, lab, p in zip(queries.subject_ids, queries.labels, probs)
            if lab >= 0]


def evaluate_model(params, arch: Architecture, config: TrainingConfig, dataset: Dataset,
                   support_dataset: Dataset | None = None, *, threads: int = 1,
                   scaler: InputScaler | None = None) -> dict:
    """Score every labeled subject of ``dataset`` with a fixed model (no retraining)."""
    labeled = dataset.subset(np.flatnonzero(dataset.labels >= 0))
    probs = infer(params, arch, config, support_dataset or dataset, labeled, threads=threads, scaler=scaler)
    preds = predictions_for(labeled, probs)
    return {
        "mode": "single",
        "config": config.to_dict(),
        "report": metrics_report(preds, dataset.class_names),
        "predictions": _prediction_rows(preds, dataset.class_names),
    }


def _prediction_rows(preds: Sequence[ScoredPrediction], class_names) -> list[dict]:
    return [{"subject_id": p.subject_id, "true_label": class_names[p.true_class],
             "predicted_label": class_names[p.predicted], "probs": [float(v) for v in p.probs]}
            for p in preds]


# -- cross-validation ---------------------------------------------------------------

def stratified_folds(labels: np.ndarray, fold_count: int, seed: int) -> np.ndarray:
    """Fold index per subject (``-1`` for unlabeled rows).

    Within each class, subjects are shuffled and dealt round-robin, so fold
    sizes per class differ by at most one.
    """
    labels = np.asarray(labels)
    folds = np.full(labels.size, -1, dtype=np.int64)
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        perm = RngStream(seed, derive_stream("folds", int(c))).permutation(idx.size)
        folds[idx[perm]] = np.arange(idx.size) % fold_count
    return folds


@dataclass
class CrossValidationResult:
    folds: np.ndarray
    fold_reports: list[dict]
    predictions: list[ScoredPrediction]
    class_names: tuple[str, ...]
    config: TrainingConfig
    traces: list[np.ndarray] = field(default_factory=list)

    def summary(self) -> dict:
        acc = [r["accuracy"] for r in self.fold_reports]
        auc = [r["micro_auc"] for r in self.fold_reports if r["micro_auc"] is not None]
        return {"accuracy_mean": _mean(acc), "accuracy_std": _std(acc),
                "micro_auc_mean": _mean(auc), "micro_auc_std": _std(auc)}

    def to_dict(self) -> dict:
        return {
            "mode": "cross_validation",
            "config": self.config.to_dict(),
            "fold_count": len(self.fold_reports),
            "aggregate": self.summary(),
            "folds": [{"fold": i, "report": r} for i, r in enumerate(self.fold_reports)],
            "pooled": metrics_report(self.predictions, self.class_names),
            "predictions": _prediction_rows(self.predictions, self.class_names),
        }


def _mean(v):
    return math.fsum(v) / len(v) if v else None


def _std(v):
    if len(v) < 2:
        return 0.0 if v else None
    m = _mean(v)
    return math.sqrt(math.fsum((x - m) ** 2 for x in v) / (len(v) - 1))


def fold_seed(seed: int, fold: int) -> int:
    return derive_stream("fold", seed, fold) >> 33


def cross_validate(dataset: Dataset, config: TrainingConfig, *, threads: int = 1,
                   progress: Callable[[int, int, float], None] | None = None) -> CrossValidationResult:
    """Stratified k-fold: retrain per fold, infer each held-out subject from training-side supports."""
    folds = stratified_folds(dataset.labels, config.fold_count, config.seed)
    reports, preds, traces = [], [], []
    for f in range(config.fold_count):
        train_idx = np.flatnonzero((folds >= 0) & (folds != f))
        test_idx = np.flatnonzero(folds == f)
        cfg = config.replace(seed=fold_seed(config.seed, f))
        train_ds = dataset.subset(train_idx)
        test_ds = dataset.subset(test_idx)
        cb = (lambda t, loss, f=f: progress(f, t, loss)) if progress else None
        result = train(train_ds, cfg, threads=threads, progress=cb)
        held_out = set(test_ds.subject_ids)
        if held_out & set(train_ds.subject_ids):
            raise LeakageError(f"fold {f}: training and test subjects overlap")
        probs = infer(result.params, result.arch, cfg, train_ds, test_ds, threads=threads,
                      forbidden_ids=held_out, scaler=result.scaler)
        fold_preds = predictions_for(test_ds, probs)
        reports.append(metrics_report(fold_preds, dataset.class_names))
        preds.extend(fold_preds)
        traces.append(result.mean_loss)
    order = {sid: i for i, sid in enumerate(dataset.subject_ids)}
    preds.sort(key=lambda p: order[p.subject_id])
    return CrossValidationResult(folds, reports, preds, dataset.class_names, config, traces)
