"""Training configuration and its flat key-value file format."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from mrcgat.errors import ConfigError

# key -> help text; defaults come from the dataclass
HELP = {
    "q": "support subjects per class in every episode",
    "batch_size": "episodes per meta-update (B)",
    "iterations": "number of meta-updates",
    "k": "KNN neighbour budget per node",
    "tau": "maximum Mahalanobis distance for an edge to survive gating",
    "learning_rate": "optimizer step size",
    "dropout": "dropout rate on attention coefficients",
    "focal_gamma": "focusing exponent of the focal loss",
    "shrinkage": "fixed covariance shrinkage in [0, 1]; unset = Ledoit-Wolf estimate",
    "seed": "master seed for every random stream",
    "label_channel": "append one-hot support labels to node features",
    "fold_count": "cross-validation folds",
    "infer_ensemble": "support redraws averaged per query at inference (R)",
    "optimizer": "adam or sgd",
    "heads1": "attention heads in layer 1 (concatenated)",
    "heads2": "attention heads in layer 2 (averaged)",
    "hidden1": "per-head width of layer 1",
    "hidden2": "per-head width of layer 2",
    "mlp_hidden": "hidden width of the classifier",
    "leaky_slope": "negative slope of the attention LeakyReLU",
    "fallback": "isolated-node policy after gating: on or error",
    "copula_scope": "episode (ranks within each episode) or split (ranks over the training split)",
    "node_input": "network input: raw (features standardized with training-split mean and std) "
                  "or copula (episode copula scores)",
}


@dataclass(frozen=True)
class TrainingConfig:
    q: int = 10
    batch_size: int = 32
    iterations: int = 1200
    k: int = 6
    tau: float = 1.0
    learning_rate: float = 0.01
    dropout: float = 0.2
    focal_gamma: float = 2.0
    shrinkage: float | None = None
    seed: int = 0
    label_channel: bool = True
    fold_count: int = 5
    infer_ensemble: int = 5
    optimizer: str = "adam"
    heads1: int = 4
    heads2: int = 2
    hidden1: int = 16
    hidden2: int = 32
    mlp_hidden: int = 32
    leaky_slope: float = 0.2
    fallback: str = "on"
    copula_scope: str = "episode"
    node_input: str = "raw"

    def __post_init__(self):
        positive = ["q", "batch_size", "k", "heads1", "heads2", "hidden1", "hidden2", "mlp_hidden",
                    "infer_ensemble"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.shrinkage is not None and not 0 <= self.shrinkage <= 1:
            raise ConfigError("shrinkage must lie in [0, 1]")
        if self.fold_count < 2:
            raise ConfigError("fold_count must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.fallback not in ("on", "error"):
            raise ConfigError(f"fallback must be on or error, got {self.fallback!r}")
        if self.copula_scope not in ("episode", "split"):
            raise ConfigError(f"copula_scope must be episode or split, got {self.copula_scope!r}")
        if self.node_input not in ("raw", "copula"):
            raise ConfigError(f"node_input must be raw or copula, got {self.node_input!r}")

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any], base: "TrainingConfig | None" = None) -> "TrainingConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = "shrinkage" if key == "lambda" else key
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw)
        return dataclasses.replace(base, **changes)


_TYPES = {f.name: f.type for f in fields(TrainingConfig)}


def _coerce(key: str, raw: Any) -> Any:
    kind = _TYPES[key]
    if isinstance(raw, str):
        raw = raw.strip()
        if raw.lower() in ("none", "null", "") and "None" in kind:
            return None
    try:
        if kind == "int":
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError
            return int(raw)
        if kind.startswith("float"):
            return None if raw is None else float(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("true", "on", "yes", "1"):
                return True
            if str(raw).lower() in ("false", "off", "no", "0"):
                return False
            raise ValueError
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {key} ({kind})") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a flat config: a JSON object, or ``key = value`` lines with ``#`` comments."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(values, dict) or any(isinstance(v, (dict, list)) for v in values.values()):
            raise ConfigError(f"{path}: config must be a flat object")
        return values
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value.strip("\"'")
    return values
