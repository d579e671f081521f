import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hsgt.coarsen import build_hierarchy
from hsgt.data import LabeledDataset, generate_sbm
from hsgt.engine import Tensor, finite_difference_check
from hsgt.errors import InputError
from hsgt.gradcheck_suite import full_model_case
from hsgt.graph import load_edge_list
from hsgt.model import HSGT, MAX_DEGREE, ModelConfig, TransformerLayer
from hsgt.sampler import MASKED, SamplerConfig, sample_batch
from hsgt.store import HistoricalStore


def as_dataset(g, features, labels=None, classes=2):
    n = g.num_nodes
    labels = np.zeros(n, np.int64) if labels is None else np.asarray(labels)
    return LabeledDataset(g, np.asarray(features, float), labels, np.zeros(n, np.int8), classes)


def full_batch(h, p=0.0, seed=0):
    cfg = SamplerConfig(full_batch=True, p=p, max_spd=2)
    return sample_batch(h, np.arange(h.num_nodes(h.depth)), cfg, np.random.default_rng(seed))


def randomize_structure(model, rng):
    for name, p in model.named_parameters():
        if name.endswith("spd_bias") or name == "degree":
            p.data[...] = rng.uniform(-1, 1, p.shape)


def test_config_validation():
    with pytest.raises(InputError):
        ModelConfig(hidden=10, heads=4)
    with pytest.raises(InputError):
        ModelConfig(max_spd=-1)
    with pytest.raises(InputError):
        ModelConfig.from_dict({"hidden": 8, "width": 3})
    cfg = ModelConfig(hidden=8, heads=2, no_readout=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_input_transform_examples():
    model = HSGT(ModelConfig(hidden=2, heads=1, depth=1), 2, 2)
    for lin in model.input:
        lin.weight.data[...] = np.eye(2)
        lin.bias.data[...] = 0.0
    model.degree.data[2] = [0.5, 0.5]
    model.degree.data[MAX_DEGREE] = [7.0, 7.0]
    assert model.input_transform([[1.0, 0.0]], 0, [2]).data.tolist() == [[1.5, 0.5]]
    assert model.input_transform([[1.0, 0.0]], 1).data.tolist() == [[1.0, 0.0]]
    assert model.input_transform([[0.0, 0.0]], 0, [500]).data.tolist() == [[7.0, 7.0]]
    with pytest.raises(InputError):
        model.input_transform([[1.0, 0.0]], 0)


def test_singleton_attention_ignores_bias():
    rng = np.random.default_rng(0)
    layer = TransformerLayer(4, 2, rng, spd_slots=3)
    h = Tensor(rng.standard_normal((1, 4)))
    rows = cols = np.array([0])
    codes = np.array([0])
    a = layer(h, rows, cols, codes=codes).data
    layer.attn.spd_bias.data[...] = 5.0
    b = layer(h, rows, cols, codes=codes).data
    assert np.allclose(a, b, rtol=0, atol=1e-14)


def test_k2_swap_symmetry():
    rng = np.random.default_rng(1)
    layer = TransformerLayer(4, 2, rng, spd_slots=3)
    x = rng.standard_normal((2, 4))
    rows, cols = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
    codes = np.array([0, 1, 1, 0])
    out = layer(Tensor(x), rows, cols, codes=codes).data
    swapped = layer(Tensor(x[::-1].copy()), rows, cols, codes=codes).data
    assert np.allclose(out[::-1], swapped, rtol=0, atol=1e-14)


def test_zero_layers_is_identity():
    model = HSGT(ModelConfig(hidden=4, heads=2, layers_per_horizontal=0, depth=0), 3, 2)
    h = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    out = model.horizontal_block(0)(h, np.array([0, 1, 2]), np.array([0, 1, 2]), np.zeros(3, int))
    assert out is h


def test_shared_horizontal_serves_every_level():
    model = HSGT(ModelConfig(hidden=4, heads=2, depth=2), 3, 2)
    assert model.horizontal_block(0) is model.horizontal_block(2)
    assert model.vertical_block(1) is model.vertical_block(2)
    h = Tensor(np.random.default_rng(0).standard_normal((2, 4)))
    rows, cols, codes = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]), np.array([0, 1, 1, 0])
    a = model.horizontal_block(0)(h, rows, cols, codes).data
    b = model.horizontal_block(1)(h, rows, cols, codes).data
    assert a.tobytes() == b.tobytes()
    unshared = HSGT(ModelConfig(hidden=4, heads=2, depth=2, share_horizontal=False), 3, 2)
    assert unshared.horizontal_block(0) is not unshared.horizontal_block(1)


def test_no_structural_matches_zero_bias():
    ds = generate_sbm(2, 10, 0.4, 0.05, 0.3, 0)
    h = build_hierarchy(ds, [0.3])
    batch = full_batch(h)
    base = HSGT(ModelConfig(hidden=4, heads=2, dropout=0.0), 2, 2, seed=3)
    ablated = HSGT(ModelConfig(hidden=4, heads=2, dropout=0.0, no_structural=True), 2, 2, seed=3)
    assert not any(n.endswith("spd_bias") for n, _ in ablated.named_parameters())
    a = base(batch, HistoricalStore([h.num_nodes(1)], 4)).data
    b = ablated(batch, HistoricalStore([h.num_nodes(1)], 4)).data
    assert a.tobytes() == b.tobytes()


def test_vertical_examples():
    model = HSGT(ModelConfig(hidden=4, heads=2, depth=1), 3, 2)
    rng = np.random.default_rng(0)
    query = Tensor(rng.standard_normal((1, 4)))
    child = rng.standard_normal((1, 4))
    one = model.vertical_aggregate(1, query, Tensor(child), [0]).data
    two = model.vertical_aggregate(1, query, Tensor(np.vstack([child, child])), [0, 0]).data
    assert np.allclose(one, two, rtol=0, atol=1e-14)
    with pytest.raises(InputError):
        model.vertical_aggregate(1, Tensor(np.ones((2, 4))), Tensor(child), [0])

    mean_model = HSGT(ModelConfig(hidden=2, heads=1, depth=1, no_vertical=True), 3, 2)
    out = mean_model.vertical_aggregate(1, Tensor(np.zeros((1, 2))), Tensor([[1.0, 3.0], [3.0, 5.0]]), [0, 0])
    assert out.data.tolist() == [[2.0, 4.0]]
    assert mean_model.vertical == []


def test_readout_examples():
    rng = np.random.default_rng(0)
    flat = HSGT(ModelConfig(hidden=4, heads=2, depth=0), 3, 2)
    h0 = Tensor(rng.standard_normal((3, 4)))
    a = flat.readout_block([h0]).data
    b = flat.readout(h0, np.arange(3), np.arange(3), hkv=h0).data
    assert a.tobytes() == b.tobytes()

    concat = HSGT(ModelConfig(hidden=2, heads=1, depth=1, no_readout=True), 3, 2)
    assert concat.readout.weight.shape == (4, 2)
    out = concat.readout_block([Tensor(np.ones((5, 2))), Tensor(np.ones((5, 2)))])
    assert out.shape == (5, 2)


def test_forward_shape_examples():
    k2 = load_edge_list([(0, 1)], 2)
    h = build_hierarchy(as_dataset(k2, [[1.0, 0.0], [0.0, 1.0]]), [])
    model = HSGT(ModelConfig(hidden=4, heads=2, depth=0), 2, 2)
    logits = model(full_batch(h)).data
    assert logits.shape == (2, 2) and np.isfinite(logits).all()

    g = load_edge_list([(0, 1), (1, 2), (2, 3)], 4)
    h1 = build_hierarchy(as_dataset(g, np.eye(4)[:, :3]), [], "import", partitions=[np.array([0, 0, 1, 1])])
    model = HSGT(ModelConfig(hidden=4, heads=2, depth=1), 3, 5)
    cfg = SamplerConfig(fanout_1hop=0, fanout_2hop=0, fanout_high=0, p=0.0)
    batch = sample_batch(h1, [1], cfg, np.random.default_rng(0))
    assert model(batch, HistoricalStore([2], 4)).shape == (2, 5)
    with pytest.raises(InputError):
        HSGT(ModelConfig(hidden=4, heads=2, depth=2), 3, 5)(batch)


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_forward_oracle(seed):
    rng = np.random.default_rng(seed)
    ds = generate_sbm(3, 8, 0.4, 0.05, 0.5, seed)
    h = build_hierarchy(ds, [0.25])
    model = HSGT(ModelConfig(hidden=8, heads=2, dropout=0.0), 3, 3, seed=seed)
    randomize_structure(model, rng)
    batch = full_batch(h)
    got = model(batch, HistoricalStore([h.num_nodes(1)], 8)).data
    expect = oracles.dense_forward(
        model.state_dict(), 2, 2, h.features, h.graphs[0].degrees,
        [lb.bias_index.astype(np.int64) for lb in batch.levels], [m.phi for m in h.mappings],
    )
    assert np.allclose(got, expect, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_dense_and_pair_routes_agree(seed):
    ds = generate_sbm(4, 15, 0.2, 0.02, 0.5, seed)
    h = build_hierarchy(ds, [0.2])
    model = HSGT(ModelConfig(hidden=8, heads=4, dropout=0.0), 4, 4, seed=seed)
    randomize_structure(model, np.random.default_rng(seed))
    cfg = SamplerConfig(batch_size=3, p=0.2)
    batch = sample_batch(h, [0, 4, 7], cfg, np.random.default_rng(seed))
    store = HistoricalStore([h.num_nodes(1)], 8)
    store.push(1, np.arange(h.num_nodes(1)), np.random.default_rng(9).standard_normal((h.num_nodes(1), 8)))
    a = model(batch, store.copy(), impl="pairs").data
    b = model(batch, store.copy(), impl="dense").data
    assert np.allclose(a, b, rtol=1e-11, atol=1e-11)


def test_masking_soundness():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 20:
        n = int(rng.integers(4, 16))
        g = load_edge_list(rng.integers(0, n, size=(n, 2)), n)
        h = build_hierarchy(as_dataset(g, rng.standard_normal((n, 3))), [])
        model = HSGT(ModelConfig(hidden=4, heads=2, depth=0, layers_per_horizontal=1, dropout=0.0), 3, 2,
                     seed=checked)
        randomize_structure(model, rng)
        batch = full_batch(h, p=0.2, seed=checked)
        lb = batch.levels[0]
        masked = np.argwhere(lb.bias_index == MASKED)
        if masked.size == 0:
            continue
        v, u = masked[rng.integers(0, len(masked))]
        before = model(batch).data[v].copy()
        lb.features[u] += rng.standard_normal(3) * 10.0
        after = model(batch).data[v]
        assert before.tobytes() == after.tobytes()
        checked += 1


def test_parameter_sharing_counts():
    def count(depth, share):
        return HSGT(ModelConfig(hidden=8, heads=2, depth=depth, share_horizontal=share), 5, 3).horizontal_parameter_count()

    assert count(1, True) == count(2, True) == count(0, True)
    assert count(1, False) == 2 * count(0, False)
    assert count(2, False) == 3 * count(0, False)


@given(st.integers(0, 10_000))
def test_permutation_consistency(seed):
    rng = np.random.default_rng(seed)
    ds = generate_sbm(2, 6, 0.5, 0.1, 0.5, seed)
    h = build_hierarchy(ds, [0.5])
    n = ds.num_nodes
    perm = rng.permutation(n)  # old id i becomes new id perm[i]
    inv = np.argsort(perm)
    g2 = load_edge_list(perm[ds.graph.edges()], n)
    ds2 = as_dataset(g2, ds.features[inv], ds.labels[inv])
    phi2 = h.mappings[0].phi[inv]
    h2 = build_hierarchy(ds2, [], "import", partitions=[phi2])
    model = HSGT(ModelConfig(hidden=4, heads=2, dropout=0.0), 2, 2, seed=seed)
    randomize_structure(model, rng)
    a = model(full_batch(h), HistoricalStore([h.num_nodes(1)], 4)).data
    b = model(full_batch(h2), HistoricalStore([h2.num_nodes(1)], 4)).data
    assert np.allclose(a, b[perm], rtol=1e-10, atol=1e-10)


def test_full_model_gradient():
    f, params = full_model_case(0)
    assert finite_difference_check(f, params, eps=1e-5) < 1e-5


def test_state_dict_round_trip(tmp_path):
    cfg = ModelConfig(hidden=8, heads=2)
    a = HSGT(cfg, 5, 3, seed=0)
    b = HSGT(cfg, 5, 3, seed=1)
    a.save(tmp_path / "m.ckpt")
    b.load(tmp_path / "m.ckpt")
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and (pa.data == pb.data).all()
    assert sum(v.size for v in a.state_dict().values()) == a.num_parameters()
    other = HSGT(ModelConfig(hidden=8, heads=2, no_readout=True), 5, 3)
    with pytest.raises(InputError):
        other.load(tmp_path / "m.ckpt")
