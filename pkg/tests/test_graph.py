import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hsgt.errors import InputError
from hsgt.graph import (
    ABSENT,
    induced_subgraph,
    k_hop_neighborhood,
    load_edge_list,
    spd_matrix,
    truncated_spd,
)


@st.composite
def graphs(draw, max_nodes=50):
    n = draw(st.integers(1, max_nodes))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    return n, edges


def path4():
    return load_edge_list([(0, 1), (1, 2), (2, 3)], 4)


def test_empty_edge_list():
    g = load_edge_list([], 3)
    assert g.num_nodes == 3
    assert g.num_edges == 0
    assert g.degrees.tolist() == [0, 0, 0]


def test_dedup_and_self_loop_drop():
    g = load_edge_list([(0, 1), (1, 0), (1, 1), (1, 2)], 3)
    assert g.edges().tolist() == [[0, 1], [1, 2]]
    assert g.degrees.tolist() == [1, 2, 1]


def test_path_neighbors():
    assert path4().neighbors(1).tolist() == [0, 2]


def test_out_of_range_id():
    with pytest.raises(InputError):
        load_edge_list([(0, 3)], 3)
    with pytest.raises(InputError):
        load_edge_list([(-1, 0)], 3)


@given(graphs())
def test_canonical_form(case):
    n, edges = case
    g = load_edge_list(edges, n)
    adj = g.adjacency().toarray()
    assert (adj == adj.T).all()
    assert not adj.diagonal().any()
    assert adj.max(initial=0) <= 1
    assert (g.degrees == adj.sum(axis=1)).all()
    for v in range(n):
        nb = g.neighbors(v)
        assert (np.diff(nb) > 0).all()


@given(graphs())
def test_reload_is_idempotent(case):
    n, edges = case
    g = load_edge_list(edges, n)
    again = load_edge_list(g.edges(), g.num_nodes)
    assert again == g


def test_k_hop_examples():
    g = path4()
    assert k_hop_neighborhood(g, 0, 2) == {1, 2}
    assert k_hop_neighborhood(g, 1, 1) == {0, 2}
    assert k_hop_neighborhood(g, 2, 0) == set()


@given(graphs(), st.integers(0, 4))
def test_k_hop_matches_bfs(case, hops):
    n, edges = case
    g = load_edge_list(edges, n)
    adj = oracles.adjacency_sets(n, edges)
    for v in range(n):
        dist = oracles.bfs(adj, v)
        expect = {u for u, d in dist.items() if u != v and d <= hops}
        assert k_hop_neighborhood(g, v, hops) == expect


def test_truncated_spd_examples():
    g = path4()
    assert truncated_spd(g, {0}, {0, 1, 2, 3}, 2) == {(0, 0): 0, (0, 1): 1, (0, 2): 2, (0, 3): ABSENT}
    single = load_edge_list([], 1)
    assert truncated_spd(single, {0}, {0}, 5) == {(0, 0): 0}
    two = load_edge_list([], 2)
    assert truncated_spd(two, {0}, {1}, 7) == {(0, 1): ABSENT}


@given(graphs(max_nodes=20), st.integers(0, 4))
def test_truncated_spd_matches_floyd_warshall(case, cap):
    n, edges = case
    g = load_edge_list(edges, n)
    d = oracles.floyd_warshall(n, edges)
    got = truncated_spd(g, range(n), range(n), cap)
    for (s, t), dist in got.items():
        assert dist == (int(d[s, t]) if d[s, t] <= cap else ABSENT)
    assert len(got) == n * n


@given(graphs(), st.integers(0, 4))
def test_spd_matrix_matches_floyd_warshall(case, cap):
    n, edges = case
    g = load_edge_list(edges, n)
    assert (spd_matrix(g, cap) == oracles.capped_spd(n, edges, cap)).all()


def test_induced_subgraph_examples():
    g = path4()
    sub, ids = induced_subgraph(g, {0, 1, 3})
    assert ids.tolist() == [0, 1, 3]
    assert sub.edges().tolist() == [[0, 1]]
    whole, ids = induced_subgraph(g, set(range(4)))
    assert whole == g
    single, _ = induced_subgraph(g, {2})
    assert single.num_nodes == 1 and single.num_edges == 0


def test_induced_subgraph_keeps_sequence_order():
    sub, ids = induced_subgraph(path4(), [3, 2, 0])
    assert ids.tolist() == [3, 2, 0]
    assert sub.edges().tolist() == [[0, 1]]


@given(graphs(), st.data())
def test_induced_subgraph_edges_and_degrees(case, data):
    n, edges = case
    g = load_edge_list(edges, n)
    nodes = data.draw(st.sets(st.integers(0, n - 1)))
    sub, ids = induced_subgraph(g, nodes)
    keep = set(nodes)
    expect = {(min(u, v), max(u, v)) for u, v in g.edges().tolist() if u in keep and v in keep}
    got = {tuple(sorted((int(ids[a]), int(ids[b])))) for a, b in sub.edges().tolist()}
    assert got == expect
    for new, old in enumerate(ids):
        assert sub.degrees[new] == len(keep.intersection(g.neighbors(old).tolist()))
