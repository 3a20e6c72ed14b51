"""Gating heatmap and attention-graph exports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mrcgat.config import TrainingConfig
from mrcgat.data import RELATIONS, Dataset, InputScaler
from mrcgat.episodes import Episode, sample_episode
from mrcgat.model import Architecture, AttentionRecord, forward
from mrcgat.numeric.rng import RngStream, derive_stream

GATING_HEADER = ("episode", "layer", "gamma_rf", "gamma_cog", "gamma_mri")


@dataclass
class ExplainedEpisode:
    index: int
    episode: Episode
    record: AttentionRecord
    probs: np.ndarray


def explain_episodes(params, arch: Architecture, config: TrainingConfig, dataset: Dataset,
                     n_episodes: int = 10, scaler: InputScaler | None = None) -> list[ExplainedEpisode]:
    """Evaluate ``n_episodes`` freshly sampled episodes with dropout off.

    Episode ``e`` depends only on ``(config.seed, e)`` and the dataset.
    """
    out = []
    for e in range(n_episodes):
        rng = RngStream(config.seed, derive_stream("explain", e))
        ep = sample_episode(dataset, config.q, rng, config, scaler=scaler)
        fp = forward(params, arch, ep.x, ep.graphs, ep.query)
        out.append(ExplainedEpisode(e, ep, fp.record, fp.probabilities))
    return out


def gating_rows(explained: Sequence[ExplainedEpisode], layers: Sequence[int] = (1, 2)) -> list[tuple]:
    rows = []
    for item in explained:
        for layer in layers:
            g = item.record.gamma[layer][item.episode.query]
            rows.append((item.index, layer, *(float(v) for v in g)))
    return rows


def export_gating(explained: Sequence[ExplainedEpisode], path: str | Path, layers: Sequence[int] = (1, 2)) -> None:
    """CSV of the query node's relation gates, one row per (episode, layer)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATING_HEADER)
        for e, layer, *g in gating_rows(explained, layers):
            w.writerow([e, layer, *(f"{v:.6f}" for v in g)])


def attention_document(record: AttentionRecord, labels: Sequence[int], subject_ids: Sequence[str],
                       query: int, class_names: Sequence[str]) -> dict:
    """Per-relation node and edge lists; ``alpha`` is the head mean, per-head values kept alongside."""
    nodes = [{"index": i, "subject_id": sid, "class": class_names[lab] if 0 <= lab < len(class_names) else None,
              "query": i == query}
             for i, (sid, lab) in enumerate(zip(subject_ids, (int(v) for v in labels)))]
    doc = {"nodes": nodes, "relations": {}}
    for g in RELATIONS:
        graph = record.graphs[g]
        edges = []
        for layer in sorted({layer for layer, rel in record.alpha if rel == g}):
            heads = record.alpha[(layer, g)]
            mean = heads.mean(axis=0)
            for e in range(graph.n_edges):
                edges.append({"layer": layer, "src": int(graph.src[e]), "dst": int(graph.dst[e]),
                              "alpha": float(mean[e]), "alpha_heads": [float(v) for v in heads[:, e]],
                              "fallback": bool(graph.fallback[e])})
        doc["relations"][g] = {"edges": edges}
    return doc


def attention_lines(doc: dict) -> list[str]:
    """Plain ``relation layer src dst alpha`` lines with six decimals."""
    return [f"{g} {e['layer']} {e['src']} {e['dst']} {e['alpha']:.6f}"
            for g, rel in doc["relations"].items() for e in rel["edges"]]


def export_attention(item: ExplainedEpisode, class_names: Sequence[str], json_path: str | Path,
                     text_path: str | Path) -> dict:
    ep = item.episode
    doc = attention_document(item.record, ep.labels, ep.subject_ids, ep.query, class_names)
    doc["episode"] = item.index
    doc["query_probs"] = [float(v) for v in item.probs]
    Path(json_path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    Path(text_path).write_text("\n".join(attention_lines(doc)) + "\n", encoding="utf-8")
    return doc


def explain_to_dir(params, arch: Architecture, config: TrainingConfig, dataset: Dataset, out_dir: str | Path,
                   n_episodes: int = 10, scaler: InputScaler | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    explained = explain_episodes(params, arch, config, dataset, n_episodes, scaler)
    written = [out / "gating.csv"]
    export_gating(explained, written[0])
    for item in explained:
        stem = f"episode_{item.index:03d}"
        export_attention(item, dataset.class_names, out / f"{stem}_attention.json", out / f"{stem}_edges.txt")
        written += [out / f"{stem}_attention.json", out / f"{stem}_edges.txt"]
    return written
