"""Finite-difference cases for every engine op and for a tiny full model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from hsgt import engine as E
from hsgt.coarsen import build_hierarchy
from hsgt.data import LabeledDataset
from hsgt.engine import Parameter, Tensor
from hsgt.graph import load_edge_list
from hsgt.model import HSGT, ModelConfig
from hsgt.sampler import SamplerConfig, sample_batch
from hsgt.store import HistoricalStore

TOLERANCE = 1e-5
EPS = 1e-5

Case = tuple[Callable[[], Tensor], list[Parameter]]


def _param(rng, *shape, low=-1.0, high=1.0) -> Parameter:
    return Parameter(rng.uniform(low, high, size=shape))


def _away_from_zero(rng, *shape) -> Parameter:
    # relu has a kink at 0; keep inputs well clear of it
    x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Parameter(x)


def _project(out: Tensor, seed: int) -> Tensor:
    """Scalar ``sum(out * W)`` with fixed random ``W`` so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return E.tsum(out * Tensor(w))


def op_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    cases: dict[str, Case] = {}

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    cases["add"] = (lambda: _project(E.add(a, b), 1), [a, b])
    r = _param(rng, 4)
    cases["add_broadcast"] = (lambda: _project(E.add(a, r), 2), [a, r])
    cases["mul"] = (lambda: _project(E.mul(a, b), 3), [a, b])
    cases["neg"] = (lambda: _project(E.neg(a), 4), [a])
    cases["scale"] = (lambda: _project(E.scale(a, 2.5), 5), [a])
    m = _param(rng, 4, 5)
    cases["matmul"] = (lambda: _project(E.matmul(a, m), 6), [a, m])
    ba, bb = _param(rng, 2, 3, 4), _param(rng, 2, 4, 2)
    cases["matmul_batched"] = (lambda: _project(E.matmul(ba, bb), 7), [ba, bb])
    cases["transpose"] = (lambda: _project(E.transpose(ba, (1, 0, 2)), 8), [ba])
    cases["reshape"] = (lambda: _project(E.reshape(a, (2, 6)), 9), [a])
    c = _param(rng, 2, 4)
    cases["concat_rows"] = (lambda: _project(E.concat_rows([a, c]), 10), [a, c])
    d = _param(rng, 3, 2)
    cases["concat_cols"] = (lambda: _project(E.concat_cols([a, d]), 11), [a, d])
    cases["slice_rows"] = (lambda: _project(E.slice_rows(a, 1, 3), 12), [a])
    idx = np.array([2, 0, 2, 1])
    cases["gather_rows"] = (lambda: _project(E.gather_rows(a, idx), 13), [a])
    cases["take_cols"] = (lambda: _project(E.take_cols(a, np.array([3, 3, 0])), 14), [a])
    cases["tsum"] = (lambda: _project(E.tsum(ba, axis=1), 15), [ba])
    cases["mean"] = (lambda: _project(E.mean(ba, axis=2), 16), [ba])
    z = _away_from_zero(rng, 3, 4)
    cases["relu"] = (lambda: _project(E.relu(z), 17), [z])
    cases["dropout"] = (lambda: _project(E.dropout(a, 0.3, np.random.default_rng(3), True), 18), [a])

    lg = _param(rng, 2, 3, 4)
    mask = rng.random((2, 3, 4)) < 0.4
    mask[..., 0] = False
    cases["masked_softmax"] = (lambda: _project(E.masked_softmax(lg, mask), 19), [lg])
    cases["softmax"] = (lambda: _project(E.softmax(a), 20), [a])
    gamma, beta = _param(rng, 4, low=0.5, high=1.5), _param(rng, 4)
    cases["layer_norm"] = (lambda: _project(E.layer_norm(a, gamma, beta), 21), [a, gamma, beta])
    labels = np.array([1, 3, 0])
    cases["cross_entropy"] = (lambda: E.cross_entropy(a, labels), [a])
    seg = np.array([0, 2, 1, 2, 0])
    x5 = _param(rng, 5, 3)
    cases["segment_mean"] = (lambda: _project(E.segment_mean(x5, seg, 3), 22), [x5])

    q, k, v = _param(rng, 3, 4), _param(rng, 5, 4), _param(rng, 5, 4)
    rows = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    cols = np.array([0, 2, 4, 1, 3, 0, 1, 2, 4])
    bias = _param(rng, 2, rows.size)
    cases["pair_attention"] = (
        lambda: _project(E.pair_attention(q, k, v, rows, cols, 2, bias=bias), 23), [q, k, v, bias])
    cases["pair_attention_dropout"] = (
        lambda: _project(E.pair_attention(q, k, v, rows, cols, 2, dropout_rate=0.25,
                                          rng=np.random.default_rng(4), train=True), 24), [q, k, v])
    return cases


def toy_instance(seed: int = 0, hidden: int = 4, heads: int = 2):
    """6-node graph, 2 classes, one coarsening level, full batch."""
    g = load_edge_list([(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)], 6)
    rng = np.random.default_rng(seed)
    labels = np.array([0, 0, 0, 1, 1, 1])
    features = rng.standard_normal((6, 3)) + labels[:, None]
    ds = LabeledDataset(g, features, labels, np.zeros(6, dtype=np.int8), 2, [str(i) for i in range(6)])
    h = build_hierarchy(ds, [0.5], "multilevel", 0)
    cfg = ModelConfig(hidden=hidden, heads=heads, depth=1, dropout=0.0)
    model = HSGT(cfg, ds.num_features, ds.num_classes, seed=seed)
    # Nonzero structural terms so their gradients are exercised.
    for name, p in model.named_parameters():
        if name.endswith("spd_bias") or name == "degree":
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    sampler = SamplerConfig(full_batch=True, p=0.5, max_spd=cfg.max_spd)
    batch = sample_batch(h, np.arange(h.num_nodes(1)), sampler, np.random.default_rng(seed))
    store = HistoricalStore([h.num_nodes(1)], hidden)
    return ds, h, model, batch, store


def full_model_case(seed: int = 0) -> Case:
    ds, _, model, batch, store = toy_instance(seed)
    labels = ds.labels[batch.targets0]

    def f() -> Tensor:
        return E.cross_entropy(model(batch, store.copy(), train=False), labels)

    return f, model.parameters()


def run_suite(full_model: bool = True, ops: bool = True) -> dict[str, float]:
    """Max relative error per case; raises NumericError on the first failure."""
    results = {}
    if ops:
        for name, (f, params) in op_cases().items():
            results[name] = E.finite_difference_check(f, params, eps=EPS, tolerance=TOLERANCE)
    if full_model:
        f, params = full_model_case()
        results["full_model"] = E.finite_difference_check(f, params, eps=EPS, tolerance=TOLERANCE)
    return results
