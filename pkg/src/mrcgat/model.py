"""Two-layer relational graph attention network with node-wise gated fusion.

Per relation ``g`` and head ``m`` a layer computes::

    e_ij  = LeakyReLU(a^T [W h_i || W h_j])      for each edge j -> i
    alpha = softmax of e over the in-edges of i
    h_i   = ELU(sum_j alpha_ij W h_j)

Layer 1 concatenates its heads, layer 2 averages them. After each layer
the relation embeddings are mixed per node with softmax gates
``gamma_i^g ~ exp(u_g^T h_i^g)``. The query row of the second fused
embedding feeds a ReLU MLP whose softmax gives class probabilities.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from mrcgat.config import TrainingConfig
from mrcgat.data import RELATIONS
from mrcgat.errors import SchemaError
from mrcgat.graph import RelationalGraph
from mrcgat.numeric.rng import RngStream, derive_stream
from mrcgat.numeric.tape import Tape, Var

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    n_classes: int
    heads1: int = 4
    heads2: int = 2
    hidden1: int = 16
    hidden2: int = 32
    mlp_hidden: int = 32
    leaky_slope: float = 0.2

    @classmethod
    def from_config(cls, config: TrainingConfig, n_features: int, n_classes: int) -> "Architecture":
        input_dim = n_features + (n_classes if config.label_channel else 0)
        return cls(input_dim, n_classes, config.heads1, config.heads2, config.hidden1,
                   config.hidden2, config.mlp_hidden, config.leaky_slope)

    @property
    def width1(self) -> int:
        return self.heads1 * self.hidden1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for g in RELATIONS:
            for m in range(self.heads1):
                out[f"l1.{g}.h{m}.W"] = (self.hidden1, self.input_dim)
                out[f"l1.{g}.h{m}.a"] = (2 * self.hidden1,)
            out[f"l1.{g}.gate"] = (self.width1,)
        for g in RELATIONS:
            for m in range(self.heads2):
                out[f"l2.{g}.h{m}.W"] = (self.hidden2, self.width1)
                out[f"l2.{g}.h{m}.a"] = (2 * self.hidden2,)
            out[f"l2.{g}.gate"] = (self.hidden2,)
        out["cls.W1"] = (self.mlp_hidden, self.hidden2)
        out["cls.b1"] = (self.mlp_hidden,)
        out["cls.W2"] = (self.n_classes, self.mlp_hidden)
        out["cls.b2"] = (self.n_classes,)
        return out


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, uniform(+-sqrt(6/len)) vectors, zero biases."""
    rng = RngStream(seed, derive_stream("init"))
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith((".b1", ".b2")):
            params[name] = np.zeros(shape)
            continue
        limit = math.sqrt(6.0 / sum(shape)) if len(shape) == 2 else math.sqrt(6.0 / shape[0])
        params[name] = limit * (2.0 * rng.uniform(int(np.prod(shape))) - 1.0).reshape(shape)
    return params


def zero_params(arch: Architecture) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in arch.shapes().items()}


@dataclass
class AttentionRecord:
    """Pre-dropout attention per (layer, relation) and gates per layer.

    ``alpha[(layer, g)]`` has shape ``(heads, E)`` aligned with the edges of
    ``graphs[g]``; ``gamma[layer]`` has shape ``(N, 3)`` in relation order.
    """

    graphs: Mapping[str, RelationalGraph]
    alpha: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    gamma: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ForwardPass:
    tape: Tape
    leaves: dict[str, Var]
    probs: Var
    embeddings: dict[str, np.ndarray]
    record: AttentionRecord
    loss: Var | None = None

    @property
    def probabilities(self) -> np.ndarray:
        return self.probs.value.reshape(-1)

    def gradients(self, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Per-parameter gradients, split back out of the stacked head leaves."""
        if self.loss is None:
            raise RuntimeError("forward pass was run without a target")
        self.tape.backward(self.loss)
        grads = {}
        for name, leaf in self.leaves.items():
            g = self.tape.grad(leaf)
            if name.endswith("/W"):
                prefix = name[:-2]
                for m in range(g.shape[0]):
                    grads[f"{prefix}.h{m}.W"] = g[m].T.copy()
            elif name.endswith("/a"):
                prefix = name[:-2]
                for m in range(g.shape[0]):
                    grads[f"{prefix}.h{m}.a"] = g[m, :, 0].copy()
            elif name.endswith(".gate"):
                grads[name] = g[:, 0].copy()
            elif name in ("cls.W1", "cls.W2"):
                grads[name] = g.T.copy()
            else:
                grads[name] = g.reshape(params[name].shape).copy()
        return grads


def _attention_layer(tape: Tape, h: Var, graph: RelationalGraph, wt: Var, a: Var, slope: float,
                     mask: np.ndarray | None, mode: str):
    """One relation's multi-head attention; returns (combined embedding, alpha)."""
    proj = tape.matmul(h, wt)                                   # (K, N, d)
    pair = tape.concat([tape.gather_rows(proj, graph.dst), tape.gather_rows(proj, graph.src)], axis=-1)
    logits = tape.leaky_relu(tape.matmul(pair, a), slope)      # (K, E, 1)
    offsets = graph.offsets
    alpha = tape.segment_softmax(logits, offsets, axis=-2)
    msg = tape.weighted_neighbor_sum(proj, tape.dropout(alpha, mask), graph.src, offsets)
    return tape.merge_heads(tape.elu(msg), mode), alpha.value[..., 0]


def _fuse(tape: Tape, hs: list[Var], gates: list[Var]) -> tuple[Var, np.ndarray]:
    n = hs[0].shape[0]
    r = len(hs)
    scores = tape.concat([tape.matmul(h, u) for h, u in zip(hs, gates)], axis=-1)   # (N, R)
    gamma = tape.segment_softmax(scores, [0], axis=-1)
    stacked = tape.concat(hs, axis=0)                                               # (R*N, w)
    src = (np.arange(r)[None, :] * n + np.arange(n)[:, None]).reshape(-1)
    fused = tape.weighted_neighbor_sum(stacked, tape.reshape(gamma, (n * r, 1)), src, np.arange(n) * r)
    return fused, gamma.value


def forward(params: Mapping[str, np.ndarray], arch: Architecture, x: np.ndarray,
            graphs: Mapping[str, RelationalGraph], query: int, *, target: int | None = None,
            focal_gamma: float = 2.0, dropout: float = 0.0, rng: RngStream | None = None) -> ForwardPass:
    """Run the network on one episode graph.

    ``x`` holds the ``(N, input_dim)`` node features and ``query`` the row
    whose class distribution is returned. With ``target`` set the focal
    loss is recorded too. Dropout on attention coefficients is active only
    when ``dropout > 0`` and an ``rng`` is supplied.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise SchemaError(f"node features must be (N, {arch.input_dim}), got {x.shape}")
    tape = Tape()
    leaves: dict[str, Var] = {}
    record = AttentionRecord(graphs)
    embeddings: dict[str, np.ndarray] = {}
    use_dropout = dropout > 0 and rng is not None

    def stacked(layer: int, g: str, heads: int) -> tuple[Var, Var]:
        wt = np.stack([params[f"l{layer}.{g}.h{m}.W"].T for m in range(heads)])
        av = np.stack([params[f"l{layer}.{g}.h{m}.a"][:, None] for m in range(heads)])
        leaves[f"l{layer}.{g}/W"] = tape.leaf(wt)
        leaves[f"l{layer}.{g}/a"] = tape.leaf(av)
        return leaves[f"l{layer}.{g}/W"], leaves[f"l{layer}.{g}/a"]

    def mask_for(heads: int, graph: RelationalGraph) -> np.ndarray | None:
        if not use_dropout:
            return None
        keep = rng.uniform(heads * graph.n_edges) >= dropout
        return (keep / (1.0 - dropout)).reshape(heads, graph.n_edges, 1)

    h = tape.leaf(x)
    for layer, heads, mode in ((1, arch.heads1, "concat"), (2, arch.heads2, "mean")):
        per_rel, gates = [], []
        for g in RELATIONS:
            wt, a = stacked(layer, g, heads)
            out, alpha = _attention_layer(tape, h, graphs[g], wt, a, arch.leaky_slope,
                                          mask_for(heads, graphs[g]), mode)
            record.alpha[(layer, g)] = alpha
            embeddings[f"h{layer}.{g}"] = out.value
            per_rel.append(out)
            leaves[f"l{layer}.{g}.gate"] = tape.leaf(params[f"l{layer}.{g}.gate"][:, None])
            gates.append(leaves[f"l{layer}.{g}.gate"])
        h, gamma = _fuse(tape, per_rel, gates)
        record.gamma[layer] = gamma
        embeddings[f"H{layer}"] = h.value

    for name in ("cls.W1", "cls.b1", "cls.W2", "cls.b2"):
        v = params[name]
        leaves[name] = tape.leaf(v.T if v.ndim == 2 else v[None, :])
    hq = tape.gather_rows(h, [query])
    hidden = tape.relu(tape.add(tape.matmul(hq, leaves["cls.W1"]), leaves["cls.b1"]))
    logits = tape.add(tape.matmul(hidden, leaves["cls.W2"]), leaves["cls.b2"])
    probs = tape.segment_softmax(logits, [0], axis=-1)
    fp = ForwardPass(tape, leaves, probs, embeddings, record)
    if target is not None:
        fp.loss = tape.focal(probs, int(target), focal_gamma)
    return fp


# -- model file ---------------------------------------------------------------

def save_model(path: str | Path, params: Mapping[str, np.ndarray], arch: Architecture,
               config: TrainingConfig, meta: Mapping | None = None) -> None:
    doc = model_document(params, arch, config, meta)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def model_document(params, arch: Architecture, config: TrainingConfig, meta=None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "architecture": {k: getattr(arch, k) for k in arch.__dataclass_fields__},
        "meta": dict(meta or {}),
        "tensors": {name: {"shape": list(params[name].shape),
                           "values": [float(v) for v in params[name].reshape(-1)]}
                    for name in arch.shapes()},
    }


def load_model(path: str | Path):
    """Read a model file; returns ``(params, arch, config, meta)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return parse_model_document(doc)


def parse_model_document(doc: Mapping):
    if doc.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported model format_version {doc.get('format_version')!r}")
    try:
        config = TrainingConfig.from_dict(doc["config"])
        arch = Architecture(**doc["architecture"])
        tensors = doc["tensors"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from None
    expected = arch.shapes()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise SchemaError(f"tensor names mismatch; missing={missing} unexpected={extra}")
    params = {}
    for name, shape in expected.items():
        t = tensors[name]
        if tuple(t["shape"]) != shape or len(t["values"]) != int(np.prod(shape)):
            raise SchemaError(f"tensor {name}: shape {t['shape']} does not match {list(shape)}")
        params[name] = np.array(t["values"], dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(params[name])):
            raise SchemaError(f"tensor {name} has non-finite entries")
    return params, arch, config, dict(doc.get("meta", {}))
