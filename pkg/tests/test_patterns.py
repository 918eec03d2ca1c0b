import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrecall.errors import InvalidConfigError, InvalidInputError
from jointrecall.patterns import (
    CISA_KINDS,
    LshConfig,
    SparsePattern,
    centralize_normalize,
    cisa_pattern,
    dense_attention_reference,
    dump_pattern,
    expand_codebook,
    full_causal_pattern,
    hash_bins,
    hax_combine,
    init_scorer,
    ks_pattern,
    ks_scores,
    load_pattern,
    lsh_pattern,
    sparse_attention_forward,
)


# ---------------------------------------------------------------- oracles


def dense_cisa(kind, l, k, stride=2):
    """Mask-matrix constructor written directly from the row definitions."""
    M = np.zeros((l, l), dtype=bool)
    for i in range(l):
        for j in range(i + 1):
            win = lambda size: i - size < j  # noqa: E731
            dil = lambda size: (i - j) % stride == 0 and (i - j) // stride < size  # noqa: E731
            if kind == "sliding_window":
                M[i, j] = win(k)
            elif kind == "dilated":
                M[i, j] = dil(k)
            elif kind == "sw_plus_dilated":
                M[i, j] = win(math.ceil(k / 2)) or dil(k // 2)
            elif kind == "a_shaped":
                M[i, j] = win(math.ceil(k / 2)) or j < k // 2
    return M


def dense_lsh(bq, bk, k_bin):
    l = len(bq)
    same = (bq[:, None] == bk[None, :]) & np.tril(np.ones((l, l), dtype=bool))
    out = np.zeros_like(same)
    for i in range(l):
        js = np.flatnonzero(same[i])
        out[i, js[-k_bin:]] = True
    return out


# ---------------------------------------------------------------- CISA


def test_sliding_window_example():
    assert cisa_pattern("sliding_window", 4, 2).rows == [[0], [0, 1], [1, 2], [2, 3]]


def test_dilated_example():
    assert cisa_pattern("dilated", 6, 2, stride=2).row(5) == [3, 5]


def test_a_shaped_example():
    S = cisa_pattern("a_shaped", 8, 4)
    assert S.row(7) == [0, 1, 6, 7]
    assert np.array_equal(S.to_dense(), dense_cisa("a_shaped", 8, 4))


@pytest.mark.parametrize("kind", CISA_KINDS)
@pytest.mark.parametrize("l,k,stride", [(1, 1, 2), (9, 3, 2), (17, 5, 3), (40, 8, 4), (33, 1, 2)])
def test_cisa_matches_dense(kind, l, k, stride):
    S = cisa_pattern(kind, l, k, stride)
    assert np.array_equal(S.to_dense(), dense_cisa(kind, l, k, stride))
    assert all(v == 0 for v in S.violations().values())


def test_dilated_stride_validation():
    with pytest.raises(InvalidConfigError):
        cisa_pattern("dilated", 5, 2, stride=1)
    with pytest.raises(InvalidConfigError):
        cisa_pattern("sw_plus_dilated", 5, 2, stride=0)
    cisa_pattern("sliding_window", 5, 2, stride=1)
    with pytest.raises(InvalidConfigError):
        cisa_pattern("nope", 5, 2)


# ---------------------------------------------------------------- LSH pieces


def test_centralize_normalize():
    X = np.tile([1.0, 2.0, 3.0], (5, 1))
    assert np.all(centralize_normalize(X) == 0)
    assert np.all(centralize_normalize(np.array([[3.0, 4.0]])) == 0)
    Y = centralize_normalize(np.random.default_rng(0).standard_normal((20, 6)))
    norms = np.linalg.norm(Y, axis=1)
    assert np.all(np.abs(norms[norms > 0] - 1) < 1e-12)


def test_hash_bins_examples():
    eye = np.eye(3)
    assert hash_bins(np.array([[0.1, 0.9, -0.2]]), eye, "argmax").tolist() == [1]
    assert hash_bins(np.array([[0.5, -0.3]]), np.eye(2), "sign-bit").tolist() == [2]
    assert hash_bins(np.zeros((1, 4)), np.ones((4, 3)), "sign-bit").tolist() == [0]
    assert hash_bins(np.array([[1.0, 1.0]]), np.eye(2), "argmax").tolist() == [0]


def test_expand_codebook_layout():
    H = np.random.default_rng(0).standard_normal((5, 2))
    C = expand_codebook(H)
    assert C.shape == (5, 4)
    assert np.allclose(C[:, 3], H[:, 0] + H[:, 1])
    assert np.allclose(C[:, 0], -H[:, 0] - H[:, 1])
    C1 = expand_codebook(H[:, :1])
    assert np.allclose(C1, np.stack([-H[:, 0], H[:, 0]], axis=1))
    with pytest.raises(InvalidConfigError):
        expand_codebook(np.zeros((2, 17)))


def test_sign_bit_equals_codebook_argmax():
    rng = np.random.default_rng(1)
    for h in range(1, 5):
        d = int(rng.integers(1, 9))
        H = rng.standard_normal((d, h))
        X = rng.standard_normal((1000, d))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        assert np.array_equal(hash_bins(X, H, "sign-bit"), hash_bins(X, expand_codebook(H), "argmax"))


def test_lsh_config_validation():
    assert LshConfig(h=3).n_bins == 8
    assert LshConfig(h=3, rule="argmax").n_bins == 3
    for bad in ({"h": 0}, {"k_bin": 0}, {"rule": "x"}):
        with pytest.raises(InvalidConfigError):
            LshConfig(**bad)


def test_lsh_single_bin_is_full_causal():
    l = 9
    Q = np.random.default_rng(0).standard_normal((l, 4))
    cfg = LshConfig(h=1, rule="argmax", k_bin=l)
    S = lsh_pattern(Q, Q, cfg)
    assert S == full_causal_pattern(l)


def test_lsh_kbin_one():
    rng = np.random.default_rng(2)
    Q, K = rng.standard_normal((2, 30, 5))
    S = lsh_pattern(Q, K, LshConfig(h=3, k_bin=1, seed=4))
    assert S.counts.max() <= 1


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 40), d=st.integers(1, 6), k_bin=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_lsh_matches_dense_oracle(l, d, k_bin, seed):
    rng = np.random.default_rng(seed)
    Q, K = rng.standard_normal((2, l, d))
    cfg = LshConfig(h=3, k_bin=k_bin, seed=seed)
    H = cfg.projection(d)
    bq = hash_bins(centralize_normalize(Q), H)
    bk = hash_bins(centralize_normalize(K), H)
    S = lsh_pattern(Q, K, cfg)
    assert np.array_equal(S.to_dense(), dense_lsh(bq, bk, k_bin))
    assert lsh_pattern(Q, K, cfg) == S


def test_lsh_shape_mismatch():
    with pytest.raises(InvalidInputError):
        lsh_pattern(np.zeros((3, 2)), np.zeros((4, 2)), LshConfig())


# ---------------------------------------------------------------- KS


def test_ks_examples():
    assert ks_pattern(np.array([3.0, 1.0, 2.0]), 3, 2).row(2) == [0, 2]
    x = np.random.default_rng(0).standard_normal(6)
    assert ks_pattern(x, 6, 6) == full_causal_pattern(6)
    eq = ks_pattern(np.zeros(7), 7, 3)
    assert eq.rows == [[0], [0, 1], [0, 1, 2]] + [[0, 1, 2]] * 4


@settings(max_examples=60, deadline=None)
@given(l=st.integers(1, 50), k=st.integers(1, 10), seed=st.integers(0, 10**6))
def test_ks_matches_sort_oracle(l, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, size=l).astype(float)  # many ties
    S = ks_pattern(x, l, k)
    for i in range(l):
        order = sorted(range(i + 1), key=lambda j: (-x[j], j))[:k]
        assert S.row(i) == sorted(order)


def test_ks_scores_zero_head_and_causality():
    rng = np.random.default_rng(0)
    l, d = 12, 4
    Q, K = rng.standard_normal((2, l, d))
    theta = init_scorer(d, rng)
    zero = dict(theta, w2=np.zeros_like(theta["w2"]))
    assert np.all(ks_scores(K, Q, zero) == 0)
    x = ks_scores(K, Q, theta)
    Q2, K2 = Q.copy(), K.copy()
    Q2[6] += 5.0
    K2[7:] = 0.0
    x2 = ks_scores(K2, Q2, theta)
    assert np.array_equal(x[:6], x2[:6])
    # base case: position 0 sees its own normalized query
    inp0 = np.concatenate([K[0], Q[0] / np.linalg.norm(Q[0])])
    h = np.maximum(inp0 @ theta["w1"] + theta["b1"], 0)
    assert np.isclose(x[0], (h @ theta["w2"] + theta["b2"])[0], rtol=0, atol=1e-12)


def test_ks_pattern_length_check():
    with pytest.raises(InvalidInputError):
        ks_pattern(np.zeros(3), 4, 2)


# ---------------------------------------------------------------- HAX


def test_hax_examples():
    a = cisa_pattern("sliding_window", 10, 2)
    assert hax_combine(a, a, 4) == a
    left = SparsePattern.from_rows([[0]] + [[i - 1, i] for i in range(1, 6)], 2)
    right = SparsePattern.from_rows([[]] + [[0]] + [[0, 1]] * 4, 2)
    u = hax_combine(left, right)
    assert u.counts[3:].tolist() == [4, 4, 4]
    with pytest.raises(InvalidInputError):
        hax_combine(cisa_pattern("sliding_window", 5, 3), cisa_pattern("sliding_window", 5, 1), 4)
    with pytest.raises(InvalidInputError):
        hax_combine(cisa_pattern("sliding_window", 5, 1), cisa_pattern("sliding_window", 6, 1))


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 30), half=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_hax_equals_dense_max(l, half, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(2):
        rows.append([sorted(rng.choice(i + 1, size=min(half, i + 1), replace=False)) for i in range(l)])
    a, b = SparsePattern.from_rows(rows[0], half), SparsePattern.from_rows(rows[1], half)
    u = hax_combine(a, b)
    assert np.array_equal(u.to_dense(), a.to_dense() | b.to_dense())
    assert u.counts.max() <= 2 * half


# ---------------------------------------------------------------- attention


def test_attention_singleton_and_empty_rows():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((3, 4, 3))
    S = SparsePattern.from_rows([[0], [], [1], [0, 3]], 2)
    out = sparse_attention_forward(Q, K, V, S)
    assert np.array_equal(out[0], V[0])
    assert np.array_equal(out[1], np.zeros(3))
    assert np.array_equal(out[2], V[1])


def test_attention_matches_dense_full_causal():
    rng = np.random.default_rng(1)
    for _ in range(20):
        l, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        Q, K, V = rng.standard_normal((3, l, d))
        ref = dense_attention_reference(Q, K, V, np.tril(np.ones((l, l), dtype=bool)))
        assert np.max(np.abs(sparse_attention_forward(Q, K, V, full_causal_pattern(l)) - ref)) < 1e-10


def test_attention_matches_dense_random_pattern():
    rng = np.random.default_rng(2)
    l, d = 20, 5
    Q, K, V = rng.standard_normal((3, l, d))
    S = cisa_pattern("sw_plus_dilated", l, 6, 3)
    ref = dense_attention_reference(Q, K, V, S.to_dense())
    assert np.max(np.abs(sparse_attention_forward(Q, K, V, S) - ref)) < 1e-12


def test_attention_shape_errors():
    S = full_causal_pattern(3)
    with pytest.raises(InvalidInputError):
        sparse_attention_forward(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 2)), S)
    with pytest.raises(InvalidInputError):
        sparse_attention_forward(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)), S)


# ---------------------------------------------------------------- pattern type


def test_pattern_immutable_and_violations():
    S = cisa_pattern("sliding_window", 5, 2)
    with pytest.raises(ValueError):
        S.idx[0, 0] = 3
    bad = SparsePattern(np.array([[1, -1], [0, 0]]), 1)
    v = bad.violations()
    assert v["causality"] == 1 and v["duplicates"] == 1 and v["budget"] == 1


def test_dump_load_roundtrip(tmp_path):
    S = cisa_pattern("a_shaped", 12, 6)
    dump_pattern(S, tmp_path / "p.txt", "a_shaped", seed=3)
    header, S2 = load_pattern(tmp_path / "p.txt")
    assert header == {"kind": "a_shaped", "k": 6, "l": 12, "seed": 3}
    assert S2 == S
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert lines[1] == "1" + "0" * 11


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_lsh_rows_with_wide_bins(backend):
    # bins up to 2**62 (wide hashes) must not overflow any backend
    from jointrecall import kernels

    be = kernels.numpy_backend if backend == "numpy" else kernels.numba_backend
    if be is None:
        pytest.skip("numba backend unavailable")
    rng = np.random.default_rng(0)
    n, k_bin = 40, 2
    pool = rng.integers(1 << 60, 1 << 62, size=5)
    bq, bk = pool[rng.integers(0, 5, size=(2, 1, n))]
    got = be.lsh_rows(bq, bk, np.array([n], dtype=np.int64), k_bin)[0]
    for i in range(n):
        same = [j for j in range(i + 1) if bk[0, j] == bq[0, i]][-k_bin:]
        assert list(got[i][got[i] >= 0]) == same
