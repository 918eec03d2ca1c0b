"""Sparse attention patterns and masked sparse softmax attention.

Context-independent patterns (sliding window, dilated, their mix, A-shaped)
are fixed by position. Context-dependent patterns are computed from the
query/key representations: LSH bins queries and keys with random projections,
KS scores keys with a small MLP and keeps the top-k of each causal prefix,
and HAX takes the row-wise union of the two.

A pattern is stored row-padded: ``idx[i, :]`` lists the key positions query
``i`` may attend to in ascending order, followed by ``-1`` padding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidConfigError, InvalidInputError

CISA_KINDS = ("sliding_window", "dilated", "sw_plus_dilated", "a_shaped")
CDSA_KINDS = ("lsh", "ks", "hax")
MAX_CODEBOOK_BITS = 16


@dataclass(frozen=True, eq=False)
class SparsePattern:
    idx: np.ndarray  # (l, k) int64, rows ascending, -1 padded
    k: int

    def __post_init__(self):
        idx = np.array(self.idx, dtype=np.int64, copy=True)
        if idx.ndim != 2:
            raise InvalidInputError("pattern index array must be 2-D")
        idx.setflags(write=False)
        object.__setattr__(self, "idx", idx)

    @property
    def l(self) -> int:
        return self.idx.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return (self.idx >= 0).sum(axis=1)

    def row(self, i: int) -> list[int]:
        r = self.idx[i]
        return [int(j) for j in r[r >= 0]]

    @property
    def rows(self) -> list[list[int]]:
        return [self.row(i) for i in range(self.l)]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.l, self.l), dtype=bool)
        ii, ss = np.nonzero(self.idx >= 0)
        dense[ii, self.idx[ii, ss]] = True
        return dense

    def violations(self) -> dict:
        return pattern_violations(self.idx[None], self.k)

    def __eq__(self, other):
        if not isinstance(other, SparsePattern):
            return NotImplemented
        return self.rows == other.rows

    @classmethod
    def from_rows(cls, rows, k: int | None = None) -> "SparsePattern":
        width = max([len(r) for r in rows] + [1])
        idx = np.full((len(rows), width), -1, dtype=np.int64)
        for i, r in enumerate(rows):
            r = sorted(set(int(j) for j in r))
            idx[i, : len(r)] = r
        return cls(idx, width if k is None else k)

    @classmethod
    def from_dense(cls, mask, k: int | None = None) -> "SparsePattern":
        mask = np.asarray(mask, dtype=bool)
        return cls.from_rows([np.flatnonzero(r) for r in mask], k)


def pattern_violations(idx: np.ndarray, k: int, lengths=None) -> dict:
    """Count rows breaking causality, uniqueness/order, or the row budget.

    ``idx`` is a (B, l, K) padded array. Padding must sit at the end of a row.
    """
    idx = np.asarray(idx)
    B, l, K = idx.shape
    valid = idx >= 0
    q = np.arange(l)[None, :, None]
    causal = (valid & (idx > q)).any(axis=-1)
    budget = valid.sum(axis=-1) > k
    # strictly increasing valid prefix, then only padding
    pad_then_valid = (~valid[..., :-1] & valid[..., 1:]).any(axis=-1)
    not_increasing = (valid[..., 1:] & valid[..., :-1] & (idx[..., 1:] <= idx[..., :-1])).any(axis=-1)
    out_of_range = (valid & (idx >= l)).any(axis=-1)
    if lengths is not None:
        lengths = np.asarray(lengths)
        out_of_range |= (valid & (idx >= lengths[:, None, None])).any(axis=-1)
    return {
        "causality": int(causal.sum()),
        "budget": int(budget.sum()),
        "duplicates": int((pad_then_valid | not_increasing).sum()),
        "range": int(out_of_range.sum()),
    }


# --------------------------------------------------------------------------
# context-independent patterns


def _window_rows(l: int, size: int) -> np.ndarray:
    i = np.arange(l)[:, None]
    cols = i - size + 1 + np.arange(size)[None, :]
    return np.where(cols >= 0, cols, -1)


def _dilated_rows(l: int, size: int, stride: int) -> np.ndarray:
    i = np.arange(l)[:, None]
    cols = i - stride * np.arange(size)[::-1][None, :]
    return np.where(cols >= 0, cols, -1)


def _sink_rows(l: int, size: int) -> np.ndarray:
    i = np.arange(l)[:, None]
    cols = np.broadcast_to(np.arange(size)[None, :], (l, size))
    return np.where(cols <= i, cols, -1)


def _compact(rows: np.ndarray) -> np.ndarray:
    """Move -1 padding to the end of each row, keep ascending order."""
    big = np.iinfo(np.int64).max
    s = np.sort(np.where(rows < 0, big, rows), axis=-1)
    return np.where(s == big, -1, s)


def cisa_rows(kind: str, l: int, k: int, stride: int = 2) -> np.ndarray:
    if l < 1 or k < 1:
        raise InvalidConfigError(f"need l >= 1 and k >= 1, got l={l}, k={k}")
    if kind in ("dilated", "sw_plus_dilated") and stride < 2:
        raise InvalidConfigError(f"dilated patterns need stride >= 2, got {stride}")
    half_up, half_down = (k + 1) // 2, k // 2
    if kind == "sliding_window":
        rows = _window_rows(l, k)
    elif kind == "dilated":
        rows = _dilated_rows(l, k, stride)
    elif kind == "sw_plus_dilated":
        win = _window_rows(l, half_up)
        if half_down == 0:
            rows = win
        else:
            rows = kernels.numpy_backend.union_rows(
                _compact(win)[None], _compact(_dilated_rows(l, half_down, stride))[None]
            )[0]
    elif kind == "a_shaped":
        win = _window_rows(l, half_up)
        if half_down == 0:
            rows = win
        else:
            rows = kernels.numpy_backend.union_rows(
                _compact(win)[None], _sink_rows(l, half_down)[None]
            )[0]
    else:
        raise InvalidConfigError(f"unknown context-independent pattern {kind!r}")
    rows = _compact(rows)
    return rows[:, : max(1, int((rows >= 0).sum(axis=1).max()))]


def cisa_pattern(kind: str, l: int, k: int, stride: int = 2) -> SparsePattern:
    return SparsePattern(cisa_rows(kind, l, k, stride), k)


# --------------------------------------------------------------------------
# LSH


@dataclass(frozen=True)
class LshConfig:
    h: int = 4
    rule: str = "sign-bit"
    k_bin: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.h < 1:
            raise InvalidConfigError("h must be >= 1")
        if self.k_bin < 1:
            raise InvalidConfigError("k_bin must be >= 1")
        if self.rule not in ("argmax", "sign-bit"):
            raise InvalidConfigError(f"unknown binning rule {self.rule!r}")

    @property
    def n_bins(self) -> int:
        return self.h if self.rule == "argmax" else 2**self.h

    def projection(self, d: int) -> np.ndarray:
        return np.random.default_rng(self.seed).standard_normal((d, self.h))


def centralize_normalize(X, lengths=None) -> np.ndarray:
    """Subtract the per-feature mean over positions, then scale rows to unit norm.

    Works on (l, d) or batched (B, l, d) input; with ``lengths`` only the
    first ``lengths[b]`` positions contribute to the mean and padded rows
    come back as zeros. Rows that vanish after centering stay zero.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    B, l, d = X.shape
    if lengths is None:
        lengths = np.full(B, l)
    lengths = np.asarray(lengths)
    live = (np.arange(l)[None, :] < lengths[:, None])[..., None]
    count = np.maximum(lengths, 1)[:, None, None]
    mean = np.where(live, X, 0.0).sum(axis=1, keepdims=True) / count
    C = np.where(live, X - mean, 0.0)
    norm = np.linalg.norm(C, axis=-1, keepdims=True)
    scale = np.maximum(np.abs(X).max(axis=(1, 2), keepdims=True), 1.0)
    zero = norm <= 1e-12 * scale
    out = np.divide(C, norm, out=np.zeros_like(C), where=~zero)
    return out[0] if single else out


def hash_bins(Xn, H, rule: str = "sign-bit") -> np.ndarray:
    """Bin id per row: argmax column, or the sign pattern read as a binary number."""
    P = np.asarray(Xn) @ np.asarray(H)
    if rule == "argmax":
        return np.argmax(P, axis=-1).astype(np.int64)
    if rule == "sign-bit":
        h = P.shape[-1]
        weights = 1 << np.arange(h - 1, -1, -1, dtype=np.int64)
        return ((P > 0).astype(np.int64) * weights).sum(axis=-1)
    raise InvalidConfigError(f"unknown binning rule {rule!r}")


def expand_codebook(H, limit: int = MAX_CODEBOOK_BITS) -> np.ndarray:
    """All 2**h signed column sums; column c uses sign +1 wherever bit j of c is set.

    Bits are read most-significant first, matching the sign-bit bin id.
    """
    H = np.asarray(H, dtype=np.float64)
    d, h = H.shape
    if h > limit:
        raise InvalidConfigError(f"h={h} exceeds codebook limit {limit}")
    codes = np.arange(2**h)[:, None]
    bits = (codes >> np.arange(h - 1, -1, -1)[None, :]) & 1
    signs = 2.0 * bits - 1.0  # (2**h, h)
    return H @ signs.T


def lsh_rows_batched(Q, K, lengths, H, rule: str, k_bin: int, center: bool = True) -> np.ndarray:
    if center:
        Qn = centralize_normalize(Q, lengths)
        Kn = centralize_normalize(K, lengths)
    else:
        Qn, Kn = Q, K
    bq = hash_bins(Qn, H, rule)
    bk = hash_bins(Kn, H, rule)
    return kernels.lsh_rows(bq, bk, np.asarray(lengths, dtype=np.int64), int(k_bin))


def lsh_pattern(Q, K, cfg: LshConfig, H=None) -> SparsePattern:
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape:
        raise InvalidInputError(f"Q and K must be equal-shape (l, d) arrays, got {Q.shape} and {K.shape}")
    if H is None:
        H = cfg.projection(Q.shape[1])
    l = Q.shape[0]
    idx = lsh_rows_batched(Q[None], K[None], [l], H, cfg.rule, cfg.k_bin)[0]
    return SparsePattern(idx, cfg.k_bin)


# --------------------------------------------------------------------------
# KS


def init_scorer(d: int, rng: np.random.Generator, hidden: int | None = None) -> dict:
    """Two-layer ReLU MLP from [key, normalized query prefix sum] to a scalar."""
    hidden = 2 * d if hidden is None else hidden
    return {
        "w1": rng.standard_normal((2 * d, hidden)) / math.sqrt(2 * d),
        "b1": np.zeros(hidden),
        "w2": rng.standard_normal((hidden, 1)) / math.sqrt(hidden),
        "b2": np.zeros(1),
    }


def normalize_rows(X) -> np.ndarray:
    norm = np.linalg.norm(X, axis=-1, keepdims=True)
    return np.divide(X, norm, out=np.zeros_like(X), where=norm > 0)


def scorer_inputs(K, Q) -> np.ndarray:
    """concat(K_i, normalize(sum_{p<=i} Q_p)) along the last axis."""
    K = np.asarray(K, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    return np.concatenate([K, normalize_rows(np.cumsum(Q, axis=-2))], axis=-1)


def ks_scores(K, Q, theta: dict) -> np.ndarray:
    inp = scorer_inputs(K, Q)
    hid = np.maximum(inp @ theta["w1"] + theta["b1"], 0.0)
    return (hid @ theta["w2"] + theta["b2"])[..., 0]


def ks_pattern(x, l: int, k: int) -> SparsePattern:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (l,):
        raise InvalidInputError(f"expected {l} scores, got shape {x.shape}")
    idx = kernels.ks_rows(x[None], np.array([l], dtype=np.int64), int(k))[0]
    return SparsePattern(idx, k)


# --------------------------------------------------------------------------
# HAX


def hax_combine(s_lsh: SparsePattern, s_ks: SparsePattern, k: int | None = None) -> SparsePattern:
    if s_lsh.l != s_ks.l:
        raise InvalidInputError(f"pattern lengths differ: {s_lsh.l} vs {s_ks.l}")
    k = s_lsh.k + s_ks.k if k is None else int(k)
    for name, s in (("LSH", s_lsh), ("KS", s_ks)):
        if (2 * s.counts > k).any():
            raise InvalidInputError(f"{name} pattern exceeds the k/2 = {k / 2} per-row budget")
    idx = kernels.union_rows(s_lsh.idx[None], s_ks.idx[None])[0]
    return SparsePattern(idx[:, : max(1, int((idx >= 0).sum(axis=1).max()))], k)


# --------------------------------------------------------------------------
# attention


def sparse_attention_forward(Q, K, V, S: SparsePattern) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != K.shape or V.shape[0] != Q.shape[0] or V.ndim != 2:
        raise InvalidInputError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if S.l != Q.shape[0]:
        raise InvalidInputError(f"pattern length {S.l} != sequence length {Q.shape[0]}")
    out, _ = kernels.attn_forward(
        np.ascontiguousarray(Q[None]),
        np.ascontiguousarray(K[None]),
        np.ascontiguousarray(V[None]),
        np.ascontiguousarray(S.idx[None]),
        1.0 / math.sqrt(Q.shape[1]),
    )
    return out[0]


def dense_attention_reference(Q, K, V, mask) -> np.ndarray:
    """Dense masked softmax attention; rows with no allowed key give zeros."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    logits = Q @ K.T / math.sqrt(Q.shape[1])
    logits = np.where(mask, logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(logits - mx), 0.0)
    z = e.sum(axis=1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0) @ V


def full_causal_pattern(l: int) -> SparsePattern:
    return cisa_pattern("sliding_window", l, l)


# --------------------------------------------------------------------------
# golden dump format


def dump_pattern(S: SparsePattern, path, kind: str, seed: int | None = None) -> None:
    header = {"kind": kind, "l": S.l, "k": S.k, "seed": seed}
    grid = S.to_dense()
    lines = [json.dumps(header, sort_keys=True)]
    lines += ["".join("1" if c else "0" for c in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pattern(path) -> tuple[dict, SparsePattern]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    grid = np.array([[c == "1" for c in line] for line in lines[1 : 1 + header["l"]]], dtype=bool)
    return header, SparsePattern.from_dense(grid.reshape(header["l"], header["l"]), header["k"])
