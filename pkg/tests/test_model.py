import math

import numpy as np
import pytest

from mrcgat.config import TrainingConfig
from mrcgat.data import RELATIONS, InputScaler, synth_generate
from mrcgat.episodes import episode_from_indices, sample_training_indices
from mrcgat.errors import SchemaError
from mrcgat.model import (Architecture, _fuse, forward, init_params, load_model, model_document,
                          parse_model_document, save_model, zero_params)
from mrcgat.numeric import RngStream, Tape

from gradcheck import rel_err

SMALL = TrainingConfig(q=2, k=6, hidden1=3, hidden2=4, mlp_hidden=5)
# ungated graphs give nodes several in-edges, so attention vectors get live gradients
DENSE = SMALL.replace(tau=math.inf)


def small_episode(seed=0, config=SMALL):
    ds = synth_generate(seed, n_per_class=3, dims=(3, 3, 4))
    support, query = sample_training_indices(ds, np.arange(len(ds)), config.q, RngStream(seed, 1))
    return ds, episode_from_indices(ds, support, query, config, scaler=InputScaler.fit(ds.features))


def test_episode_shape():
    _, ep = small_episode()
    assert ep.n_nodes == 7 and ep.x.shape == (7, 13)
    assert np.all(ep.x[-1, 10:] == 0) and np.all(ep.x[:-1, 10:].sum(axis=1) == 1)


def _loss(params, arch, ep, dropout, seed):
    rng = RngStream(seed, 99) if dropout else None
    fp = forward(params, arch, ep.x, ep.graphs, ep.query, target=ep.query_label, dropout=dropout, rng=rng)
    return fp


@pytest.mark.parametrize("dropout", [0.0, 0.2])
def test_full_gradient_check(dropout):
    _, ep = small_episode(config=DENSE)
    arch = Architecture.from_config(SMALL, 10, 3)
    params = init_params(arch, 3)
    analytic = _loss(params, arch, ep, dropout, 5).gradients(params)
    assert set(analytic) == set(params)
    step = 1e-5
    for name, value in params.items():
        num = np.zeros_like(value)
        for ix in np.ndindex(value.shape):
            vals = []
            for sgn in (1, -1):
                p = dict(params)
                p[name] = value.copy()
                p[name][ix] += sgn * step
                vals.append(_loss(p, arch, ep, dropout, 5).loss.value.item())
            num[ix] = (vals[0] - vals[1]) / (2 * step)
        assert np.abs(analytic[name]).max() > 1e-10, name
        assert rel_err(analytic[name], num) <= 1e-4, name


def test_gradient_spot_check_default_widths():
    cfg = TrainingConfig(q=2, tau=math.inf)
    _, ep = small_episode(1, cfg)
    arch = Architecture.from_config(cfg, 10, 3)
    params = init_params(arch, 4)
    analytic = _loss(params, arch, ep, 0.2, 2).gradients(params)
    rng = np.random.default_rng(0)
    for name, value in params.items():
        assert np.abs(analytic[name]).max() > 1e-10, name
        flat = value.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            vals = []
            for sgn in (1, -1):
                p = dict(params)
                p[name] = value.copy()
                p[name].reshape(-1)[i] += sgn * 1e-5
                vals.append(_loss(p, arch, ep, 0.2, 2).loss.value.item())
            num = (vals[0] - vals[1]) / 2e-5
            got = analytic[name].reshape(-1)[i]
            assert abs(got - num) <= 1e-4 * max(abs(num), np.abs(analytic[name]).max(), 1e-8), name


def test_attention_and_gate_normalization():
    _, ep = small_episode(2)
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    fp = forward(init_params(arch, 0), arch, ep.x, ep.graphs, ep.query, dropout=0.2, rng=RngStream(0, 1))
    for (layer, g), alpha in fp.record.alpha.items():
        graph = ep.graphs[g]
        assert alpha.shape == ((4 if layer == 1 else 2), graph.n_edges)
        for head in alpha:
            sums = np.bincount(graph.dst, weights=head, minlength=graph.n_nodes)
            assert np.all(np.abs(sums - 1) <= 1e-9)
    for gamma in fp.record.gamma.values():
        assert gamma.shape == (7, 3)
        assert np.all(np.abs(gamma.sum(axis=1) - 1) <= 1e-9)
    assert abs(fp.probabilities.sum() - 1) <= 1e-12


def test_zero_network_uniform():
    _, ep = small_episode()
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    fp = forward(zero_params(arch), arch, ep.x, ep.graphs, ep.query)
    assert np.allclose(fp.probabilities, 1 / 3, atol=1e-15)


def test_uniform_attention_on_identical_features():
    _, ep = small_episode()
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    x = np.ones_like(ep.x)
    fp = forward(init_params(arch, 1), arch, x, ep.graphs, ep.query)
    for (_, g), alpha in fp.record.alpha.items():
        deg = ep.graphs[g].in_degree[ep.graphs[g].dst]
        assert np.allclose(alpha, 1.0 / deg, atol=1e-12)


def test_forward_deterministic_with_dropout():
    _, ep = small_episode()
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    p = init_params(arch, 1)
    a = forward(p, arch, ep.x, ep.graphs, ep.query, dropout=0.2, rng=RngStream(3, 4)).probabilities
    b = forward(p, arch, ep.x, ep.graphs, ep.query, dropout=0.2, rng=RngStream(3, 4)).probabilities
    assert np.array_equal(a, b)


def _fuse_values(hs, us):
    tape = Tape()
    fused, gamma = _fuse(tape, [tape.leaf(np.asarray(h, float)) for h in hs],
                         [tape.leaf(np.asarray(u, float)[:, None]) for u in us])
    return fused.value, gamma


def test_gated_fusion_examples():
    hs = [[[1.0, 0.0]], [[0.0, 2.0]], [[0.0, -3.0]]]
    us = [[1.0, 0.0]] * 3
    fused, gamma = _fuse_values(hs, us)
    e = math.e
    w = (e / (e + 2), 1 / (e + 2), 1 / (e + 2))
    assert gamma[0] == pytest.approx(w, abs=1e-15)
    assert w[0] == pytest.approx(0.5761, abs=1e-4) and w[1] == pytest.approx(0.2119, abs=1e-4)
    assert fused[0] == pytest.approx([w[0], 2 * w[1] - 3 * w[2]], abs=1e-15)
    # equal scores average the embeddings
    fused, gamma = _fuse_values(hs, [[0.0, 0.0]] * 3)
    assert np.allclose(gamma, 1 / 3) and fused[0] == pytest.approx([1 / 3, -1 / 3])
    # a margin of 40 saturates the gate
    fused, _ = _fuse_values(hs, [[40.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    assert np.abs(fused[0] - np.array([1.0, 0.0])).max() <= 1e-12


def test_attention_softmax_example():
    tape = Tape()
    a = tape.segment_softmax(tape.leaf(np.array([[1.0], [0.0], [-1.0]])), [0], axis=-2)
    assert a.value[:, 0] == pytest.approx([0.6652, 0.2447, 0.0900], abs=1e-4)


def _elu(v):
    return v if v > 0 else math.expm1(v)


def test_layer_one_against_dense_loops():
    _, ep = small_episode(4)
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    params = init_params(arch, 7)
    fp = forward(params, arch, ep.x, ep.graphs, ep.query)
    n = ep.n_nodes
    for g in RELATIONS:
        graph = ep.graphs[g]
        out = np.zeros((n, arch.width1))
        for m in range(arch.heads1):
            W = params[f"l1.{g}.h{m}.W"]
            a = params[f"l1.{g}.h{m}.a"]
            wh = [W @ ep.x[i] for i in range(n)]
            for i in range(n):
                nbrs = [int(s) for s, d in zip(graph.src, graph.dst) if d == i]
                e = []
                for j in nbrs:
                    s = float(a @ np.concatenate([wh[i], wh[j]]))
                    e.append(s if s > 0 else 0.2 * s)
                mx = max(e)
                ex = [math.exp(v - mx) for v in e]
                alpha = [v / sum(ex) for v in ex]
                agg = sum(al * wh[j] for al, j in zip(alpha, nbrs))
                out[i, m * arch.hidden1:(m + 1) * arch.hidden1] = [_elu(v) for v in agg]
        assert np.abs(out - fp.embeddings[f"h1.{g}"]).max() <= 1e-10


def test_support_permutation_equivariance():
    ds = synth_generate(11, n_per_class=12, dims=(3, 3, 4))
    cfg = TrainingConfig(q=4)
    support, query = sample_training_indices(ds, np.arange(len(ds)), cfg.q, RngStream(1, 1))
    arch = Architecture.from_config(cfg, 10, 3)
    params = init_params(arch, 2)
    ep = episode_from_indices(ds, support, query, cfg)
    base = forward(params, arch, ep.x, ep.graphs, ep.query)
    perm = np.random.default_rng(0).permutation(support.size)
    ep2 = episode_from_indices(ds, support[perm], query, cfg)
    moved = forward(params, arch, ep2.x, ep2.graphs, ep2.query)
    assert np.abs(base.probabilities - moved.probabilities).max() <= 1e-12
    for key in ("H1", "H2"):
        assert np.abs(base.embeddings[key][:-1][perm] - moved.embeddings[key][:-1]).max() <= 1e-12


def test_model_file_round_trip(tmp_path):
    cfg = TrainingConfig(seed=3)
    arch = Architecture.from_config(cfg, 33, 3)
    params = init_params(arch, 3)
    save_model(tmp_path / "m.json", params, arch, cfg, {"class_names": ["CN", "MCI", "AD"]})
    p2, a2, c2, meta = load_model(tmp_path / "m.json")
    assert a2 == arch and c2 == cfg and meta["class_names"] == ["CN", "MCI", "AD"]
    assert all(np.array_equal(params[k], p2[k]) for k in params)


def test_model_document_validation():
    cfg = TrainingConfig()
    arch = Architecture.from_config(cfg, 6, 2)
    doc = model_document(init_params(arch, 0), arch, cfg)
    bad = dict(doc, tensors=dict(doc["tensors"]))
    bad["tensors"]["cls.b2"] = {"shape": [3], "values": [0.0, 0.0, 0.0]}
    with pytest.raises(SchemaError):
        parse_model_document(bad)
    bad["tensors"]["cls.b2"] = {"shape": [2], "values": [0.0, float("nan")]}
    with pytest.raises(SchemaError):
        parse_model_document(bad)
    with pytest.raises(SchemaError):
        parse_model_document(dict(doc, format_version=9))
    del bad["tensors"]["cls.b2"]
    with pytest.raises(SchemaError):
        parse_model_document(bad)


def test_wrong_input_width():
    _, ep = small_episode()
    arch = Architecture.from_config(TrainingConfig(), 10, 3)
    with pytest.raises(SchemaError):
        forward(zero_params(arch), arch, ep.x[:, :5], ep.graphs, ep.query)
