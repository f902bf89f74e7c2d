import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_attention
from tokengt.attention import (
    KernelAttentionConfig,
    MLPParams,
    MSAParams,
    TransformerLayerParams,
    attention_distance,
    attention_logits,
    attention_score_gradients,
    exact_attention,
    favor_attention,
    gelu,
    layer_norm,
    msa_backward,
    msa_forward,
    random_layer,
    random_msa_params,
    transformer_layer_backward,
    transformer_layer_forward,
    write_attention_csv,
)
from tokengt.graphs import Graph, hop_distances
from tokengt.tokenizer import prepend_special, tokenize_sparse

PATH3 = Graph(3, [(0, 1), (1, 2)])


def random_instance(seed, N=5, d=6, H=2, d_H=3):
    rng = np.random.default_rng(seed)
    p = random_msa_params(H, d, d_H, d_H, rng, scale=0.7)
    p = MSAParams(p.w_q, 0.3 * rng.standard_normal(p.b_q.shape), p.w_k, 0.3 * rng.standard_normal(p.b_k.shape), p.w_v, p.w_o)
    return rng.standard_normal((N, d)), p, rng


def test_uniform_attention_for_zero_logits():
    x, p, _ = random_instance(0)
    z = MSAParams(np.zeros_like(p.w_q), np.zeros_like(p.b_q), np.zeros_like(p.w_k), np.zeros_like(p.b_k), p.w_v, p.w_o)
    out, attn = msa_forward(x, z)
    assert np.allclose(attn, 1 / x.shape[0])
    expected = sum(x.mean(axis=0) @ z.w_v[h] @ z.w_o[h] for h in range(z.H))
    assert np.allclose(out, np.broadcast_to(expected, out.shape))


def test_single_token():
    x, p, _ = random_instance(1, N=1)
    _, attn = msa_forward(x, p)
    assert np.array_equal(attn, np.ones((p.H, 1, 1)))


@given(st.integers(0, 10_000))
def test_msa_matches_naive(seed):
    x, p, _ = random_instance(seed)
    out, attn = msa_forward(x, p)
    ref_out, ref_attn = naive_attention(x, p.w_q, p.w_k, p.w_v, p.w_o, p.b_q, p.b_k)
    assert np.abs(out - ref_out).max() <= 1e-10
    assert np.abs(attn - ref_attn).max() <= 1e-10
    assert np.abs(attn.sum(axis=-1) - 1).max() <= 1e-12


@given(st.integers(0, 10_000))
def test_msa_permutation_equivariant(seed):
    x, p, rng = random_instance(seed)
    pi = rng.permutation(x.shape[0])
    out, _ = msa_forward(x, p)
    out_p, _ = msa_forward(x[pi], p)
    assert np.allclose(out_p, out[pi], atol=1e-12)


def test_key_mask():
    x, p, _ = random_instance(2)
    mask = np.array([True, True, False, True, False])
    _, attn = msa_forward(x, p, key_mask=mask)
    assert not attn[..., ~mask].any()
    _, sub = msa_forward(x[mask], p)
    assert np.allclose(attn[:, mask][:, :, mask], sub)


def test_batched_forward_matches_loop():
    rng = np.random.default_rng(3)
    p = random_msa_params(2, 4, 3, 3, rng)
    xb = rng.standard_normal((3, 5, 4))
    out, attn = msa_forward(xb, p)
    for b in range(3):
        o, a = msa_forward(xb[b], p)
        assert np.allclose(out[b], o) and np.allclose(attn[b], a)


def test_shape_mismatch():
    x, p, _ = random_instance(0)
    with pytest.raises(ValueError):
        msa_forward(x[:, :3], p)


def _score_loss(x, p, up):
    return float((msa_forward(x, p)[1] * up).sum())


def _fd(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


@pytest.mark.parametrize("seed", range(4))
def test_score_gradients_entrywise(seed):
    x, p, rng = random_instance(seed, N=int(3 + seed), d=int(4 + seed))
    up = rng.standard_normal((p.H, x.shape[0], x.shape[0]))
    g = attention_score_gradients(x, p, up)
    targets = {"w_q": p.w_q, "b_q": p.b_q, "w_k": p.w_k, "b_k": p.b_k, "x": x}
    for name, arr in targets.items():
        for idx in np.ndindex(arr.shape):
            fd = _fd(lambda: _score_loss(x, p, up), arr, idx)
            assert abs(g[name][idx] - fd) <= 1e-4 * max(abs(fd), abs(g[name][idx])) + 1e-8, (name, idx)


def test_score_gradients_zero_upstream():
    x, p, _ = random_instance(0)
    g = attention_score_gradients(x, p, np.zeros((p.H, 5, 5)))
    assert all(not v.any() for v in g.values())


def test_row_constant_upstream_gives_zero():
    # softmax rows are invariant to a per-row constant upstream
    x, p, rng = random_instance(5)
    up = np.broadcast_to(rng.standard_normal((p.H, 5, 1)), (p.H, 5, 5)).copy()
    g = attention_score_gradients(x, p, up)
    assert np.abs(g["b_q"]).max() <= 1e-12
    fd = _fd(lambda: _score_loss(x, p, up), p.b_q, (0, 0))
    assert abs(fd) <= 1e-8


def test_b_k_gradient_vanishes():
    # the key bias adds q_i . b_k to every logit of row i, a row constant
    x, p, rng = random_instance(6)
    g = attention_score_gradients(x, p, rng.standard_normal((p.H, 5, 5)))
    assert np.abs(g["b_k"]).max() <= 1e-12


def test_msa_backward_matches_fd():
    x, p, rng = random_instance(7, N=4, d=5)
    out, attn, cache = msa_forward(x, p, return_cache=True)
    go = rng.standard_normal(out.shape)
    g = msa_backward(x, p, attn, cache, go)
    loss = lambda: float((msa_forward(x, p)[0] * go).sum())  # noqa: E731
    for name in ("w_q", "w_k", "w_v", "w_o", "b_q"):
        arr = getattr(p, name)
        for idx in list(np.ndindex(arr.shape))[:20]:
            assert g[name][idx] == pytest.approx(_fd(loss, arr, idx), rel=1e-4, abs=1e-8)
    for idx in np.ndindex(x.shape):
        assert g["x"][idx] == pytest.approx(_fd(loss, x, idx), rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("norm_mode", ["none", "pre"])
def test_layer_backward_matches_fd(norm_mode):
    rng = np.random.default_rng(8)
    layer = random_layer(2, 4, 3, 6, rng, norm_mode=norm_mode)
    if norm_mode == "pre":
        layer.ln = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in layer.ln.items()}
    x = rng.standard_normal((2, 5, 4))
    out, cache = transformer_layer_forward(x, layer, return_cache=True)
    go = rng.standard_normal(out.shape)
    g = transformer_layer_backward(go, layer, cache)
    loss = lambda: float((transformer_layer_forward(x, layer) * go).sum())  # noqa: E731
    arrays = {"msa.w_q": layer.msa.w_q, "msa.w_v": layer.msa.w_v, "mlp.w1": layer.mlp.w1, "mlp.b2": layer.mlp.b2, "x": x}
    if norm_mode == "pre":
        arrays.update({"ln.g1": layer.ln["g1"], "ln.b2": layer.ln["b2"]})
    for name, arr in arrays.items():
        for idx in list(np.ndindex(arr.shape))[:12]:
            assert g[name][idx] == pytest.approx(_fd(loss, arr, idx), rel=1e-4, abs=1e-7), name


def test_layer_identity_with_zero_outputs():
    x, p, _ = random_instance(0)
    z = MSAParams(p.w_q, p.b_q, p.w_k, p.b_k, p.w_v, np.zeros_like(p.w_o))
    layer = TransformerLayerParams(z, MLPParams(np.zeros((6, 4)), np.zeros(4), np.zeros((4, 6)), np.zeros(6)))
    assert np.array_equal(transformer_layer_forward(x, layer), x)


def test_exact_mlp_negation_leaves_msa_only():
    x, p, _ = random_instance(1)
    layer = TransformerLayerParams(p, exact_mlp=lambda h: -h)
    out = transformer_layer_forward(x, layer)
    assert np.allclose(out, np.zeros_like(x))  # H - H


def test_no_norm_matches_hand_composition():
    rng = np.random.default_rng(9)
    layer = random_layer(2, 4, 3, 6, rng, norm_mode="none")
    x = rng.standard_normal((5, 4))
    h = x + msa_forward(x, layer.msa)[0]
    pre = h @ layer.mlp.w1 + layer.mlp.b1
    hand = h + (0.5 * pre * (1 + np.tanh(np.sqrt(2 / np.pi) * (pre + 0.044715 * pre**3)))) @ layer.mlp.w2 + layer.mlp.b2
    assert np.allclose(transformer_layer_forward(x, layer), hand, atol=1e-12)


def test_layer_params_need_one_mlp():
    _, p, _ = random_instance(0)
    with pytest.raises(ValueError):
        TransformerLayerParams(p)


def test_gelu_grad():
    z = np.linspace(-3, 3, 13)
    _, g = gelu(z, return_grad=True)
    h = 1e-6
    assert np.allclose(g, (gelu(z + h) - gelu(z - h)) / (2 * h), atol=1e-8)


def test_layer_norm_stats():
    y = layer_norm(np.random.default_rng(0).standard_normal((4, 8)) * 3 + 2, np.ones(8), np.zeros(8))
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1, atol=1e-4)


def test_logits_masked_columns():
    x, p, _ = random_instance(0)
    logits = attention_logits(x, p, key_mask=np.array([1, 0, 1, 1, 1], bool))[2]
    assert np.all(np.isneginf(logits[..., 1]))


def test_favor_single_key():
    rng = np.random.default_rng(0)
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 2))
    assert np.allclose(favor_attention(q, k, v, KernelAttentionConfig(8)), np.broadcast_to(v, (3, 2)))


def test_favor_identical_keys_average_values():
    rng = np.random.default_rng(1)
    k = np.broadcast_to(rng.standard_normal(4), (6, 4))
    v = rng.standard_normal((6, 3))
    out = favor_attention(rng.standard_normal((2, 4)), k, v, KernelAttentionConfig(16))
    assert np.allclose(out, v.mean(axis=0))


def test_favor_error_shrinks_with_features():
    rng = np.random.default_rng(2)
    q, k, v = (0.3 * rng.standard_normal((64, 16)) for _ in range(3))
    exact = exact_attention(q, k, v)
    errs = [
        np.median([np.linalg.norm(favor_attention(q, k, v, KernelAttentionConfig(m, s)) - exact) / np.linalg.norm(exact) for s in range(10)])
        for m in (16, 256)
    ]
    assert errs[1] < errs[0]


def test_favor_rejects_width_mismatch():
    with pytest.raises(ValueError):
        favor_attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 1)), KernelAttentionConfig())
    with pytest.raises(ValueError):
        KernelAttentionConfig(0)


def _node_tokens(g):
    ts = tokenize_sparse(Graph(g.n), None, None)
    return ts


def test_distance_hand_value():
    ts = _node_tokens(PATH3)
    attn = np.zeros((3, 3))
    attn[0] = 1 / 3
    attn[1:, :] = np.eye(3)[1:]
    per_q = attention_distance(attn, ts, hop_distances(PATH3), per_query=True)
    assert per_q[0, 0] == pytest.approx(1.0)


def test_distance_identity_is_zero():
    ts = _node_tokens(PATH3)
    assert attention_distance(np.eye(3), ts, hop_distances(PATH3))[0] == 0.0


def test_distance_farthest_equals_eccentricity():
    ts = _node_tokens(PATH3)
    attn = np.zeros((3, 3))
    attn[0, 2] = attn[1, 0] = attn[2, 0] = 1.0
    per_q = attention_distance(attn, ts, hop_distances(PATH3), per_query=True)[0]
    assert list(per_q) == [2.0, 1.0, 2.0]


def test_distance_drops_specials_and_renormalises():
    ts = prepend_special(tokenize_sparse(PATH3, None, None), "graph_special")
    N = len(ts)
    attn = np.zeros((N, N))
    attn[:, 0] = 0.5  # half the mass on [graph]
    attn[:, 1] = 0.5  # the rest on node 0
    per_q = attention_distance(attn, ts, hop_distances(PATH3), per_query=True)[0]
    assert np.isnan(per_q[0])
    assert per_q[3] == pytest.approx(2.0)
    # edge token (0, 1) anchors both endpoints: mean(d(0,0), d(1,0)) = 0.5
    assert per_q[4] == pytest.approx(0.5)


def test_distance_error_without_finite_pairs():
    g = Graph(2)
    ts = prepend_special(tokenize_sparse(Graph(0), None, None), "graph_special")
    with pytest.raises(ValueError):
        attention_distance(np.ones((1, 1)), ts, hop_distances(g))


def test_attention_csv(tmp_path):
    ts = prepend_special(tokenize_sparse(PATH3, None, None), "graph_special")
    attn = np.full((len(ts), len(ts)), 1 / len(ts))
    path = tmp_path / "a.csv"
    write_attention_csv(attn, ts, path, head=0)
    lines = path.read_text().splitlines()
    assert lines[0] == "# head=0"
    rows = list(csv.reader(lines[1:]))
    assert rows[0][:4] == ["query", "query_kind", "0:graph_special", "1:node"]
    assert len(rows) == len(ts) + 1 and float(rows[1][2]) == pytest.approx(1 / len(ts))
