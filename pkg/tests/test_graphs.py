import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokengt.graphs import (
    UNREACHABLE,
    Graph,
    barabasi_albert,
    graph_to_dense,
    hop_distances,
    loads_graph,
    dumps_graph,
    normalized_laplacian,
    permute_graph,
    permute_tensor,
    triangle_count,
)
from tokengt.numerics import sym_eig

PATH3 = Graph(3, [(0, 1), (1, 2)])


@st.composite
def graphs(draw, max_n=7):
    n = draw(st.integers(1, max_n))
    pairs = list(itertools.combinations(range(n), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    return Graph(n, chosen)


@st.composite
def graph_and_perm(draw):
    g = draw(graphs())
    return g, np.array(draw(st.permutations(range(g.n))))


def test_graph_rejects_duplicates_and_bad_endpoints():
    with pytest.raises(ValueError):
        Graph(3, [(0, 1), (1, 0)])
    with pytest.raises(ValueError):
        Graph(2, [(0, 2)])


def test_ba_edge_count():
    g = barabasi_albert(10, 2, 0)
    assert (g.n, g.m) == (10, 16)


@given(st.integers(3, 20), st.integers(2, 3), st.integers(0, 1000))
def test_ba_structure(n, k, seed):
    if k >= n:
        return
    g = barabasi_albert(n, k, seed)
    assert g.m == (n - k) * k
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    assert np.all(np.isfinite(hop_distances(g)))  # connected after the first wave


def test_ba_deterministic():
    assert barabasi_albert(12, 3, 5) == barabasi_albert(12, 3, 5)


def test_ba_rejects_k_ge_n():
    with pytest.raises(ValueError):
        barabasi_albert(3, 3, 0)


def test_laplacian_single_edge():
    assert np.allclose(normalized_laplacian(Graph(2, [(0, 1)])), [[1, -1], [-1, 1]])


def test_laplacian_edgeless_is_identity():
    assert np.array_equal(normalized_laplacian(Graph(3)), np.eye(3))


def test_laplacian_triangle_null_vector():
    g = Graph(3, [(0, 1), (1, 2), (0, 2)])
    w, u = sym_eig(normalized_laplacian(g))
    assert abs(w[0]) < 1e-12
    target = np.sqrt(g.degrees())
    assert np.allclose(u[:, 0], target / np.linalg.norm(target))


@given(graphs())
def test_laplacian_spectrum_range(g):
    w = np.linalg.eigvalsh(normalized_laplacian(g))
    assert w.min() >= -1e-9 and w.max() <= 2 + 1e-9


def test_hops_path_and_sentinel():
    d = hop_distances(PATH3)
    assert d[0, 2] == 2 and np.all(np.diag(d) == 0)
    assert hop_distances(Graph(2))[0, 1] == UNREACHABLE


@given(graphs())
def test_hops_symmetric_triangle_inequality(g):
    d = hop_distances(g)
    assert np.array_equal(d, d.T)
    for i, j, k in itertools.product(range(g.n), repeat=3):
        if np.isfinite(d[i, j]) and np.isfinite(d[j, k]):
            assert d[i, k] <= d[i, j] + d[j, k]


def test_permute_graph_swap():
    h = permute_graph(PATH3, [2, 1, 0])
    assert sorted(map(tuple, np.sort(h.edges, axis=1).tolist())) == [(0, 1), (1, 2)]
    assert np.array_equal(h.degrees(), PATH3.degrees()[[2, 1, 0]])


def test_permute_graph_rejects_non_bijection():
    with pytest.raises(ValueError):
        permute_graph(PATH3, [0, 0, 1])


def test_permute_tensor_order1():
    x = np.array([[1.0], [2.0]])
    assert np.array_equal(permute_tensor(x, [1, 0]), [[2.0], [1.0]])


@given(graph_and_perm())
def test_permute_roundtrip(gp):
    g, pi = gp
    inv = np.argsort(pi)
    assert permute_graph(permute_graph(g, pi), inv) == g
    x = graph_to_dense(g)
    assert np.array_equal(permute_tensor(permute_tensor(x, pi), inv), x)


@given(graph_and_perm())
def test_dense_equivariant(gp):
    g, pi = gp
    assert np.array_equal(graph_to_dense(permute_graph(g, pi)), permute_tensor(graph_to_dense(g), pi))


def test_dense_single_edge():
    x = graph_to_dense(Graph(2, [(0, 1)]))
    assert x.shape == (2, 2, 2)
    assert np.array_equal(x[..., 0], [[0, 1], [1, 0]])
    assert np.array_equal(x[..., 1], np.eye(2))


def test_triangle_count_small():
    k4 = Graph(4, list(itertools.combinations(range(4), 2)))
    assert triangle_count(k4) == 4
    assert triangle_count(PATH3) == 0


@given(graphs())
def test_triangle_count_matches_trace(g):
    a = (graph_to_dense(g)[..., 0]).astype(int)
    assert triangle_count(g) == np.trace(a @ a @ a) // 6


def test_jsonl_roundtrip(tmp_path):
    g = Graph(3, [(0, 2)], node_features=np.arange(6.0).reshape(3, 2), edge_features=[[0.5]])
    assert loads_graph(dumps_graph(g)) == g


def test_jsonl_rejects_bad_header():
    with pytest.raises(ValueError):
        loads_graph('{"id": 0}\n')


def test_ba_mean_node_count():
    from tokengt.experiments import ba_dataset

    train, _ = ba_dataset(1000, 1, 0)
    assert abs(np.mean([g.n for g in train]) - 15.0) <= 0.5
