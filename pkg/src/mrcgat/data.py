"""Subject records, modality partitions, CSV I/O and the synthetic cohort."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import beta as beta_dist
from scipy.special import ndtr

from mrcgat.errors import RowError, SchemaError
from mrcgat.numeric.rng import RngStream, derive_stream

RELATIONS = ("RF", "COG", "MRI")
PREFIXES = {"rf_": "RF", "cog_": "COG", "mri_": "MRI"}
CLASS_NAMES = ("CN", "MCI", "AD")
DEFAULT_DIMS = (5, 8, 20)


@dataclass(frozen=True)
class ModalityPartition:
    """Column ranges ``[start, stop)`` of each relation in the feature vector."""

    ranges: dict[str, tuple[int, int]]

    def __post_init__(self):
        spans = sorted(self.ranges.values())
        if set(self.ranges) != set(RELATIONS):
            raise SchemaError(f"partition must cover relations {RELATIONS}, got {sorted(self.ranges)}")
        pos = 0
        for start, stop in spans:
            if start != pos or stop <= start:
                raise SchemaError(f"partition ranges do not tile the feature axis: {self.ranges}")
            pos = stop

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "ModalityPartition":
        bounds = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        return cls({g: (int(bounds[i]), int(bounds[i + 1])) for i, g in enumerate(RELATIONS)})

    @property
    def n_features(self) -> int:
        return max(stop for _, stop in self.ranges.values())

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.ranges[g][1] - self.ranges[g][0] for g in RELATIONS)

    def slice(self, relation: str) -> slice:
        start, stop = self.ranges[relation]
        return slice(start, stop)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: int | None
    features: np.ndarray = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.label == other.label
                and np.array_equal(self.features, other.features))


class Dataset:
    """Immutable collection of subject records sharing one modality partition.

    ``features`` is the ``(n_subjects, F)`` matrix and ``labels`` holds class
    indices with ``-1`` marking unlabeled subjects.
    """

    def __init__(self, subject_ids: Sequence[str], labels: Sequence[int | None], features,
                 partition: ModalityPartition, class_names: Sequence[str] = CLASS_NAMES,
                 feature_names: Sequence[str] | None = None):
        self.subject_ids = tuple(str(s) for s in subject_ids)
        self.labels = np.array([-1 if lab is None else int(lab) for lab in labels], dtype=np.int64)
        self.features = np.array(features, dtype=np.float64, copy=True)
        self.partition = partition
        self.class_names = tuple(class_names)
        if feature_names is None:
            feature_names = _default_feature_names(partition)
        self.feature_names = tuple(feature_names)

        n, f = self.features.shape if self.features.ndim == 2 else (len(self.subject_ids), -1)
        if self.features.ndim != 2 or n != len(self.subject_ids) or n != self.labels.size:
            raise SchemaError("subject ids, labels and feature rows disagree in length")
        if f != partition.n_features or len(self.feature_names) != f:
            raise SchemaError(f"feature width {f} does not match partition width {partition.n_features}")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError("features must be finite")
        if len(set(self.subject_ids)) != n:
            raise SchemaError("duplicate subject_id")
        if np.any((self.labels < -1) | (self.labels >= len(self.class_names))):
            raise SchemaError("label index out of range")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.subject_ids)

    def __repr__(self) -> str:
        return (f"Dataset(n={len(self)}, F={self.n_features}, dims={self.partition.dims}, "
                f"classes={self.class_names})")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.subject_ids == other.subject_ids and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features) and self.partition == other.partition
                and self.class_names == other.class_names and self.feature_names == other.feature_names)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def records(self) -> list[SubjectRecord]:
        return [SubjectRecord(s, None if lab < 0 else int(lab), self.features[i])
                for i, (s, lab) in enumerate(zip(self.subject_ids, self.labels))]

    def class_counts(self) -> np.ndarray:
        lab = self.labels[self.labels >= 0]
        return np.bincount(lab, minlength=self.n_classes)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.intp)
        return Dataset([self.subject_ids[i] for i in idx], self.labels[idx], self.features[idx],
                       self.partition, self.class_names, self.feature_names)

    def with_labels(self, labels: Sequence[int | None]) -> "Dataset":
        return Dataset(self.subject_ids, labels, self.features, self.partition,
                       self.class_names, self.feature_names)

    def restrict_classes(self, names: Sequence[str]) -> "Dataset":
        """Binary (or reduced) task: keep subjects of the named classes, re-indexed in that order.

        Unlabeled subjects are kept.
        """
        missing = [n for n in names if n not in self.class_names]
        if missing or len(set(names)) != len(names) or len(names) < 2:
            raise SchemaError(f"invalid class selection {list(names)} for {self.class_names}")
        remap = {self.class_names.index(n): k for k, n in enumerate(names)}
        keep = [i for i, lab in enumerate(self.labels) if lab < 0 or lab in remap]
        labels = [None if self.labels[i] < 0 else remap[int(self.labels[i])] for i in keep]
        return Dataset([self.subject_ids[i] for i in keep], labels, self.features[keep],
                       self.partition, names, self.feature_names)


def _default_feature_names(partition: ModalityPartition) -> list[str]:
    names = [""] * partition.n_features
    for prefix, g in PREFIXES.items():
        start, stop = partition.ranges[g]
        for k, col in enumerate(range(start, stop)):
            names[col] = f"{prefix}{k}"
    return names


def _relation_of(column: str) -> str | None:
    for prefix, g in PREFIXES.items():
        if column.startswith(prefix):
            return g
    return None


def load_csv(path: str | Path, classes: Sequence[str] = CLASS_NAMES) -> Dataset:
    """Read ``subject_id,label,rf_*,cog_*,mri_*`` rows into a Dataset.

    Label cells must name one of ``classes`` or be empty (unlabeled).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[:2] != ["subject_id", "label"]:
            raise SchemaError(f"{path}: header must start with 'subject_id,label'")
        feature_names = header[2:]
        groups: dict[str, list[int]] = {g: [] for g in RELATIONS}
        for k, name in enumerate(feature_names):
            g = _relation_of(name)
            if g is None:
                raise SchemaError(f"{path}: column {name!r} has no rf_/cog_/mri_ prefix")
            groups[g].append(k)
        ranges = {}
        for g, cols in groups.items():
            if not cols:
                raise SchemaError(f"{path}: no columns for relation {g}")
            if cols != list(range(cols[0], cols[-1] + 1)):
                raise SchemaError(f"{path}: columns of relation {g} are not contiguous")
            ranges[g] = (cols[0], cols[-1] + 1)
        partition = ModalityPartition(ranges)

        ids, labels, rows, seen = [], [], [], set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} cells, got {len(row)}")
            sid, lab = row[0].strip(), row[1].strip()
            if sid in seen:
                raise SchemaError(f"{path}: duplicate subject_id {sid!r} (line {line})")
            seen.add(sid)
            if lab == "":
                labels.append(None)
            elif lab in classes:
                labels.append(classes.index(lab))
            else:
                raise RowError(line, f"unknown label {lab!r}")
            values = []
            for name, cell in zip(feature_names, row[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise RowError(line, f"non-numeric value {cell!r} in column {name}") from None
                if not math.isfinite(v):
                    raise RowError(line, f"non-finite value {cell!r} in column {name}")
                values.append(v)
            ids.append(sid)
            rows.append(values)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_names))
    return Dataset(ids, labels, feats, partition, classes, feature_names)


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset in the schema read by :func:`load_csv` (lossless floats)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", *dataset.feature_names])
        for sid, lab, x in zip(dataset.subject_ids, dataset.labels, dataset.features):
            w.writerow([sid, "" if lab < 0 else dataset.class_names[lab], *(repr(float(v)) for v in x)])


def synth_generate(seed: int, n_per_class: int = 50, dims: Sequence[int] = DEFAULT_DIMS,
                   separation: float = 3.0, signal: Sequence[str] = RELATIONS) -> Dataset:
    """Synthetic three-class multimodal cohort with non-Gaussian marginals.

    Per relation, class means sit at ``(c - 1) * separation`` along a random
    unit direction. Latent Gaussian (COG: Student-t, 3 dof) noise is then
    warped monotonically: RF is log-normal, COG a shifted and scaled t,
    MRI a scaled Beta(2, 5). Relations not listed in ``signal`` get no class
    shift.
    """
    if n_per_class < 1 or len(dims) != 3 or min(dims) < 1 or separation < 0:
        raise ValueError("synth_generate needs n_per_class >= 1, three dims >= 1 and separation >= 0")
    rng = RngStream(seed, derive_stream("synth"))
    n = 3 * n_per_class
    labels = np.repeat(np.arange(3), n_per_class)
    shift = (labels - 1).astype(np.float64)[:, None]
    blocks = []
    for g, d in zip(RELATIONS, dims):
        direction = rng.normal(d)
        direction /= np.linalg.norm(direction)
        mean = shift * separation * direction[None, :] if g in signal else np.zeros((n, d))
        if g == "RF":
            blocks.append(np.exp(mean + rng.normal(n * d).reshape(n, d)))
        elif g == "COG":
            z = rng.normal(n * d).reshape(n, d)
            chi2 = (rng.normal(3 * n * d).reshape(n, d, 3) ** 2).sum(axis=2)
            blocks.append(25.0 + 4.0 * (mean + z / np.sqrt(chi2 / 3.0)))
        else:
            u = ndtr(mean + rng.normal(n * d).reshape(n, d))
            blocks.append(1000.0 * beta_dist.ppf(np.clip(u, 1e-300, 1.0), 2.0, 5.0))
    order = rng.permutation(n)
    features = np.concatenate(blocks, axis=1)[order]
    ids = [f"S{i:04d}" for i in range(n)]
    return Dataset(ids, labels[order].tolist(), features, ModalityPartition.from_dims(dims))


def label_copy_generate(seed: int, n_per_class: int = 50, n_classes: int = 3, noise: float = 0.1) -> Dataset:
    """Every modality block is the one-hot class vector plus Gaussian noise."""
    rng = RngStream(seed, derive_stream("label_copy"))
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)[rng.permutation(n)]
    onehot = np.eye(n_classes)[labels]
    blocks = [onehot + noise * rng.normal(n * n_classes).reshape(n, n_classes) for _ in RELATIONS]
    names = tuple(f"C{c}" for c in range(n_classes))
    return Dataset([f"S{i:04d}" for i in range(n)], labels, np.hstack(blocks),
                   ModalityPartition.from_dims([n_classes] * 3), names)


@dataclass(frozen=True)
class InputScaler:
    """Per-feature map ``(x - mean) / scale`` fitted on a training split.

    Constant columns keep ``scale = 1``.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "InputScaler":
        features = np.asarray(features, dtype=np.float64)
        sd = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "scale": [float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, doc: dict | None) -> "InputScaler | None":
        if not doc:
            return None
        mean = np.array(doc["mean"], dtype=np.float64)
        scale = np.array(doc["scale"], dtype=np.float64)
        if mean.shape != scale.shape or mean.ndim != 1 or not np.all(np.isfinite(mean)) \
                or not np.all(scale > 0):
            raise SchemaError("input scaler needs finite means and positive scales of equal length")
        return cls(mean, scale)
