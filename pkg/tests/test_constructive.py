import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokengt.constructive import (
    ConstructiveConfig,
    build_ign_transformer,
    build_layer_for_equivariant,
    completion_count,
    completion_count_bruteforce,
    constructed_logits,
    denormalizer_context,
    score,
    sign_of,
    type_epsilon,
    verify_lemma1,
    verify_theorem2,
    verify_theorem3,
)
from tokengt.equivariant import (
    EquivariantLayerParams,
    basis_tensor,
    class_of,
    enumerate_classes,
    equivariant_linear_apply,
    invariant_apply,
    num_blocks,
    random_ign_spec,
    random_layer_params,
    split_class,
)
from tokengt.graphs import permute_tensor
from tokengt.numerics import softmax_rows


def test_sign_examples():
    assert sign_of(1, 1, (0, 0)) == 1
    assert sign_of(1, 1, (0, 1)) == -1
    mu = (0, 1, 0, 2)  # blocks {q1, k1}, {q2}, {k2}
    assert sign_of(1, 1, mu) == 1 and sign_of(2, 2, mu) == -1
    with pytest.raises(ValueError):
        sign_of(3, 1, mu)


def test_score_examples():
    assert score((0,), (0,), (0, 0), 2.0) == 3.0
    assert score((0,), (1,), (0, 0), 2.0) == 2.0


def test_epsilon_values():
    assert type_epsilon(2) == pytest.approx(2.0)
    assert type_epsilon(1) == pytest.approx(0.0)
    assert type_epsilon(3) == pytest.approx(1 - math.cos(2 * math.pi / 5))


@pytest.mark.parametrize("k,n", [(1, 3), (1, 5), (2, 3), (2, 4), (2, 5)])
def test_score_maximal_exactly_on_members(k, n):
    eps = type_epsilon(k) if k > 1 else 2.0
    margin = min(1.0, eps)
    idx = list(itertools.product(range(n), repeat=k))
    for mu in enumerate_classes(2 * k):
        if num_blocks(mu) > n:
            continue  # no members at this n
        gq = split_class(mu, k)[0]
        best = max(score(i, j, mu, eps) for i in idx if class_of(i) == gq for j in idx)
        for i in idx:
            if class_of(i) != gq:
                continue
            for j in idx:
                s = score(i, j, mu, eps)
                if class_of(i + j) == mu:
                    assert s == best
                else:
                    assert s <= best - margin


def test_logits_equal_scaled_score():
    n, k = 3, 2
    cfg = ConstructiveConfig(k, n, 2, 7.0)
    logits = constructed_logits(n, cfg)
    idx = list(itertools.product(range(n), repeat=k))
    scale = cfg.a / math.sqrt(cfg.d_H)
    for h, mu in enumerate(cfg.classes):
        for r, i in enumerate(idx):
            for c, j in enumerate(idx):
                if class_of(i + j) == mu:
                    assert logits[h, r, c] == pytest.approx(scale * score(i, j, mu, cfg.eps), abs=1e-9)


def test_hardmax_closed_form():
    cfg = ConstructiveConfig(1, 2, 2, 1.0, [(0, 0)])
    cfg.a = math.log(99) * math.sqrt(cfg.d_H)
    alpha = softmax_rows(constructed_logits(2, cfg)[0])
    assert np.allclose(alpha, [[0.99, 0.01], [0.01, 0.99]], atol=1e-12)


def test_off_diagonal_head_suppresses_self():
    n = 4
    r = verify_lemma1(n, 1, (0, 1), a=1e3)
    assert r.passed
    cfg = ConstructiveConfig(1, n, 2, 1e3, [(0, 1)])
    alpha = softmax_rows(constructed_logits(n, cfg)[0])
    assert np.allclose(alpha, (1 - np.eye(n)) / (n - 1), atol=1e-9)


def test_head_construction_identity_pair_class():
    assert verify_lemma1(3, 2, (0, 1, 0, 1), a=1e3).passed


def test_head_construction_first_order_shared_identifiers():
    assert verify_lemma1(5, 1, None, a=1e3).passed


@pytest.mark.parametrize("n", [3, 5])
def test_head_construction_monotone_in_a(n):
    errs = [verify_lemma1(n, 2, None, a).max_error for a in (1.0, 10.0, 100.0, 1000.0)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_head_construction_orf_and_lap_identifiers():
    from tokengt.identifiers import lap_identifiers, orf_identifiers
    from tokengt.graphs import barabasi_albert

    assert verify_lemma1(5, 2, None, 1e3, orf_identifiers(5, 5, 0)).passed
    assert verify_lemma1(6, 2, None, 1e3, lap_identifiers(barabasi_albert(6, 2, 0), 6)).passed


def test_heads_cover_all_classes_once():
    cfg = ConstructiveConfig(2, 4)
    assert len(cfg.classes) == 15 and set(cfg.classes) == set(enumerate_classes(4))


def test_config_guards():
    with pytest.raises(ValueError):
        ConstructiveConfig(2, 4, a=1e9)
    with pytest.raises(ValueError):
        ConstructiveConfig(2, 4, a=0.0)
    with pytest.raises(ValueError):
        ConstructiveConfig(2, 4, d_e=1)
    assert ConstructiveConfig(2, 5, 3).d_H == 4 * 5 + 6


@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_completion_count_matches_bruteforce(k, n):
    for c in enumerate_classes(k):
        for mu in enumerate_classes(2 * k):
            assert completion_count(c, mu, n) == completion_count_bruteforce(c, mu, n)


def test_completion_count_is_row_sum():
    n = 5
    for mu in enumerate_classes(4):
        b = basis_tensor(mu, n).materialize().reshape(n * n, n * n)
        for r, i in enumerate(itertools.product(range(n), repeat=2)):
            assert b[r].sum() == completion_count(class_of(i), mu, n)


def test_denormalizer_zero_rows():
    ctx = denormalizer_context(random_layer_params(2, 2, 1, 1, 0), 4)
    assert (ctx.g >= 0).all()
    # a diagonal query (i, i) never completes to a class that splits it
    assert ctx.g[0, enumerate_classes(4).index((0, 1, 2, 3))] == 0


def test_bias_only_layer_constant_per_class():
    p = EquivariantLayerParams.zeros(2, 2, 2, 2)
    p.biases[(0, 0)][:] = [1.0, -1.0]
    p.biases[(0, 1)][:] = [0.5, 2.0]
    x = np.random.default_rng(0).standard_normal((4, 4, 2))
    r = verify_theorem2(x, p, ConstructiveConfig(2, 4))
    assert r.passed and r.max_error < 1e-12


def test_first_order_identity_layer():
    p = EquivariantLayerParams(1, 1, {(0, 0): [[1.0]], (0, 1): [[0.0]]}, {(0,): [0.0]})
    x = np.array([[1.5], [-2.0], [0.25]])
    assert verify_theorem2(x, p, ConstructiveConfig(1, 3)).max_error < 1e-12


def test_layer_construction_zero_input():
    p = random_layer_params(2, 2, 2, 2, 4)
    assert verify_theorem2(np.zeros((4, 4, 2)), p, ConstructiveConfig(2, 4)).passed


def test_layer_construction_error_shrinks_with_a():
    rng = np.random.default_rng(11)
    p = random_layer_params(2, 2, 2, 2, rng)
    x = rng.standard_normal((4, 4, 2))
    errs = [verify_theorem2(x, p, ConstructiveConfig(2, 4, 2, a)).max_error for a in (1e2, 1e3, 1e4)]
    assert errs[0] > errs[1] or errs[0] < 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_layer_construction_mixed_widths():
    rng = np.random.default_rng(2)
    p = random_layer_params(2, 2, 3, 1, rng)
    assert verify_theorem2(rng.standard_normal((3, 3, 3)), p, ConstructiveConfig(2, 3)).passed


def test_layer_construction_rejects_too_few_identifier_channels():
    with pytest.raises(ValueError):
        build_layer_for_equivariant(random_layer_params(2, 2, 1, 1, 0), ConstructiveConfig(2, 3), 4)


def test_ign_construction_head_only_is_gated_sum_pool():
    spec = random_ign_spec(2, [2], 2, [], 0)
    x = np.random.default_rng(0).standard_normal((4, 4, 2))
    model = build_ign_transformer(spec, ConstructiveConfig(2, 4), 4)
    assert np.allclose(model(x), invariant_apply(spec.head, x), atol=1e-12)


def test_ign_construction_one_layer():
    spec = random_ign_spec(2, [2, 2], 2, [1], 3)
    x = np.random.default_rng(3).standard_normal((3, 3, 2))
    assert verify_theorem3(x, spec, ConstructiveConfig(2, 3)).passed


def test_ign_construction_first_order():
    spec = random_ign_spec(1, [2, 3, 2], 2, [2, 1], 6)
    x = np.random.default_rng(6).standard_normal((5, 2))
    assert verify_theorem3(x, spec, ConstructiveConfig(1, 5)).passed


@settings(max_examples=5)
@given(st.integers(0, 1000))
def test_ign_construction_pipeline_invariant(seed):
    rng = np.random.default_rng(seed)
    spec = random_ign_spec(2, [2, 2, 2], 2, [1], rng)
    x = rng.standard_normal((4, 4, 2))
    model = build_ign_transformer(spec, ConstructiveConfig(2, 4), 4)
    pi = rng.permutation(4)
    assert np.abs(model(permute_tensor(x, pi)) - model(x)).max() <= 2e-3


def test_layer_construction_matches_oracle_in_layer_output():
    # the constructed layer output, restricted to the first d channels, is L(X)
    rng = np.random.default_rng(9)
    p = random_layer_params(1, 1, 2, 2, rng)
    x = rng.standard_normal((4, 2))
    r = verify_theorem2(x, p, ConstructiveConfig(1, 4))
    assert r.max_error <= 1e-9 * (1 + np.abs(equivariant_linear_apply(p, x)).max())
