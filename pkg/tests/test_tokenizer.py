import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokengt.equivariant import class_of, enumerate_classes
from tokengt.graphs import Graph, barabasi_albert, graph_to_dense, permute_tensor
from tokengt.identifiers import equispaced_type_identifiers, exact_orthonormal_identifiers, orf_identifiers, random_type_identifiers
from tokengt.tokenizer import InputProjection, prepend_special, project_input, token_class, tokenize_dense, tokenize_sparse

EDGE = Graph(2, [(0, 1)])


def test_sparse_counts():
    assert len(tokenize_sparse(EDGE, None, None)) == 3
    assert len(tokenize_sparse(EDGE, None, None, symmetrize=True)) == 4


@given(st.integers(3, 15), st.integers(0, 500), st.booleans())
def test_sparse_count_formula(n, seed, sym):
    g = barabasi_albert(n, 2, seed)
    ts = prepend_special(tokenize_sparse(g, orf_identifiers(n, 4, seed), random_type_identifiers(2, 3, seed), sym), "graph_special")
    assert len(ts) == n + g.m * (1 + sym) + 1


def test_sparse_channel_layout():
    g = Graph(3, [(0, 2)], node_features=[[1.0], [2.0], [3.0]], edge_features=[[9.0]])
    P = exact_orthonormal_identifiers(3, 3)
    E = equispaced_type_identifiers(2, 2)
    ts = tokenize_sparse(g, P, E)
    assert ts.width == ts.C + 2 * ts.d_p + ts.d_e == 2 + 6 + 2
    node1 = ts.channels[1]
    assert np.array_equal(node1[2:5], node1[5:8])  # P_v written twice
    assert np.array_equal(node1[:2], [2.0, 0.0]) and np.array_equal(node1[8:], E.E[0])
    edge = ts.channels[3]
    assert np.array_equal(edge[:2], [0.0, 9.0])
    assert np.array_equal(edge[2:5], P.P[0]) and np.array_equal(edge[5:8], P.P[2])
    assert np.array_equal(edge[8:], E.E[1])
    assert ts.multi_indices[1] == (1, 1) and ts.multi_indices[3] == (0, 2)


def test_sparse_rejects_wrong_rows():
    with pytest.raises(ValueError):
        tokenize_sparse(EDGE, exact_orthonormal_identifiers(3, 3), None)


def test_dense_k2():
    E = equispaced_type_identifiers(2, 2)
    ts = tokenize_dense(np.zeros((2, 2, 1)), exact_orthonormal_identifiers(2, 2), E)
    assert len(ts) == 4
    assert np.array_equal(ts.channels[0, -2:], E.E[0])
    assert np.array_equal(ts.channels[1, -2:], E.E[1])
    assert ts.kinds == ("node", "edge", "edge", "node")


def test_dense_k1():
    x = np.array([[5.0], [6.0]])
    P = exact_orthonormal_identifiers(2, 2)
    E = equispaced_type_identifiers(1, 2)
    ts = tokenize_dense(x, P, E)
    assert np.array_equal(ts.channels[1], [6.0, 0.0, 1.0, 1.0, 0.0])


@pytest.mark.parametrize("k,n", [(1, 4), (2, 3), (3, 2)])
def test_dense_type_rows_follow_class(k, n):
    E = equispaced_type_identifiers(k, 2)
    ts = tokenize_dense(np.zeros((n,) * k + (1,)), exact_orthonormal_identifiers(n, n), E)
    assert len(ts) == n**k
    classes = enumerate_classes(k)
    for pos in range(len(ts)):
        assert np.array_equal(ts.channels[pos, -2:], E.E[classes.index(token_class(ts, pos))])
        assert classes[ts.type_index[pos]] == class_of(ts.multi_indices[pos])


@given(st.integers(2, 5), st.integers(0, 1000))
def test_dense_permutation_consistency(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, n, 2))
    P = orf_identifiers(n, n, seed)
    pi = rng.permutation(n)
    a = tokenize_dense(permute_tensor(x, pi), P.permuted(pi), equispaced_type_identifiers(2, 2))
    b = tokenize_dense(x, P, equispaced_type_identifiers(2, 2))
    # token (i, j) of b moves to (pi[i], pi[j]) in a
    for pos, (i, j) in enumerate(b.multi_indices):
        assert np.array_equal(a.channels[pi[i] * n + pi[j]], b.channels[pos])


def test_dense_rejects_wrong_type_rows():
    with pytest.raises(ValueError):
        tokenize_dense(np.zeros((2, 2, 1)), None, equispaced_type_identifiers(1, 2))


def test_prepend_special():
    ts = tokenize_sparse(EDGE, None, None)
    s = prepend_special(ts, "graph_special")
    assert len(s) == 4 and s.kinds[0] == "graph_special" and s.multi_indices[0] == ()
    with pytest.raises(ValueError):
        prepend_special(s, "graph_special")
    with pytest.raises(ValueError):
        prepend_special(ts, "bogus")


def test_project_input():
    ts = prepend_special(tokenize_sparse(EDGE, exact_orthonormal_identifiers(2, 2), None), "null_special")
    w = np.zeros((4, 3))
    w[0, 0] = w[3, 2] = 1.0
    emb = np.array([7.0, 8.0, 9.0])
    z = project_input(ts, InputProjection(w, {"null_special": emb}))
    assert z.shape == (4, 3)
    assert np.array_equal(z[0], emb)
    assert np.array_equal(z[1:, 0], ts.channels[1:, 0]) and np.array_equal(z[1:, 2], ts.channels[1:, 3])
    z0 = project_input(ts, InputProjection(np.zeros((4, 3)), {"null_special": emb}))
    assert not z0[1:].any() and np.array_equal(z0[0], emb)
    with pytest.raises(ValueError):
        project_input(ts, InputProjection(np.zeros((5, 3)), {"null_special": emb}))


def test_dense_from_graph_matches_adjacency():
    g = barabasi_albert(6, 2, 0)
    ts = tokenize_dense(graph_to_dense(g), None, None)
    assert ts.C == 2 and len(ts) == 36
