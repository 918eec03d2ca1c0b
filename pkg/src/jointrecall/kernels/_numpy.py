"""Pure-numpy kernels. Reference path; also the fallback when numba is off.

All pattern kernels use the padded row layout: an int64 array whose last axis
holds the attended key positions of one query in ascending order, padded with
-1 at the end.
"""

import numpy as np


def lsh_rows(bin_q, bin_k, lengths, k_bin):
    """Per-bin sliding window: the ``k_bin`` most recent same-bin keys j <= i."""
    B, l = bin_q.shape
    out = np.full((B, l, k_bin), -1, dtype=np.int64)
    pos = np.arange(l, dtype=np.int64)
    for b in range(B):
        n = int(lengths[b])
        if n == 0:
            continue
        # dense-rank the bins first: raw bins can reach 2**62 and the
        # composite key below would overflow int64
        _, ranks = np.unique(np.concatenate([bin_q[b, :n], bin_k[b, :n]]), return_inverse=True)
        bq, bk = ranks[:n].astype(np.int64), ranks[n:].astype(np.int64)
        # composite (bin, position) keys sort by bin then position
        ck = np.sort(bk * (n + 1) + pos[:n])
        hi = np.searchsorted(ck, bq * (n + 1) + pos[:n], side="right")
        lo = np.maximum(np.searchsorted(ck, bq * (n + 1), side="left"), hi - k_bin)
        slots = lo[:, None] + np.arange(k_bin)[None, :]
        valid = slots < hi[:, None]
        picked = ck[np.minimum(slots, n - 1)] % (n + 1)
        out[b, :n] = np.where(valid, picked, -1)
    return out


def ks_rows(scores, lengths, k):
    """Row i holds the top-k scored positions among 0..i, earlier index wins ties."""
    B, l = scores.shape
    out = np.full((B, l, k), -1, dtype=np.int64)
    for b in range(B):
        n = int(lengths[b])
        if n == 0:
            continue
        order = np.argsort(-scores[b, :n], kind="stable")
        visible = order[None, :] <= np.arange(n)[:, None]
        taken = visible & (np.cumsum(visible, axis=1) <= k)
        cand = np.where(taken, order[None, :], n)
        cand = np.sort(cand, axis=1)[:, : min(k, n)]
        out[b, :n, : cand.shape[1]] = np.where(cand == n, -1, cand)
    return out


def union_rows(a, b):
    """Row-wise sorted set union of two padded row arrays."""
    both = np.concatenate([a, b], axis=-1)
    big = np.iinfo(np.int64).max
    s = np.sort(np.where(both < 0, big, both), axis=-1)
    dup = np.zeros_like(s, dtype=bool)
    dup[..., 1:] = s[..., 1:] == s[..., :-1]
    s = np.where(dup, big, s)
    s = np.sort(s, axis=-1)
    return np.where(s == big, -1, s)


def _gather(x, idx):
    B = x.shape[0]
    safe = np.where(idx < 0, 0, idx)
    return x[np.arange(B)[:, None, None], safe]


def attn_forward(q, k, v, idx, scale):
    """Softmax over exactly the listed keys; empty rows give zeros."""
    valid = idx >= 0
    kg = _gather(k, idx)
    vg = _gather(v, idx)
    logits = np.einsum("bld,blkd->blk", q, kg) * scale
    logits = np.where(valid, logits, -np.inf)
    mx = np.max(logits, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(valid, np.exp(logits - mx), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    probs = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
    out = np.einsum("blk,blkd->bld", probs, vg)
    return out, probs


def _scatter_add(target, idx, contrib):
    B, l, K = idx.shape
    d = target.shape[-1]
    valid = (idx >= 0).reshape(-1)
    flat = (np.arange(B)[:, None, None] * l + np.where(idx < 0, 0, idx)).reshape(-1)[valid]
    vals = contrib.reshape(-1, d)[valid]
    acc = target.reshape(B * l, d)
    np.add.at(acc, flat, vals)
    return acc.reshape(B, l, d)


def attn_backward(q, k, v, idx, probs, gout, scale):
    kg = _gather(k, idx)
    vg = _gather(v, idx)
    gp = np.einsum("bld,blkd->blk", gout, vg)
    gl = probs * (gp - np.sum(probs * gp, axis=-1, keepdims=True))
    gq = np.einsum("blk,blkd->bld", gl, kg) * scale
    gk = _scatter_add(np.zeros_like(k), idx, (gl * scale)[..., None] * q[:, :, None, :])
    gv = _scatter_add(np.zeros_like(v), idx, probs[..., None] * gout[:, :, None, :])
    return gq, gk, gv


def scan_forward(a, u):
    """h_t = a_t * h_{t-1} + (1 - a_t) * u_t with h_{-1} = 0."""
    h = np.empty_like(u)
    prev = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        prev = a[:, t] * prev + (1.0 - a[:, t]) * u[:, t]
        h[:, t] = prev
    return h


def scan_backward(a, u, h, gh):
    ga = np.empty_like(a)
    gu = np.empty_like(u)
    carry = np.zeros_like(u[:, 0])
    l = u.shape[1]
    for t in range(l - 1, -1, -1):
        carry = carry + gh[:, t]
        prev = h[:, t - 1] if t > 0 else np.zeros_like(carry)
        ga[:, t] = carry * (prev - u[:, t])
        gu[:, t] = carry * (1.0 - a[:, t])
        carry = carry * a[:, t]
    return ga, gu


def _bce_logits(p, t):
    return np.maximum(p, 0.0) - t * p + np.log1p(np.exp(-np.abs(p)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def rank_loss(x, y, w):
    """Weighted pairwise logistic ranking loss.

    Scores x (B, m) are shared by the L target rows y (B, L, m) with weights
    w (B, L). Each (b, i) group contributes w * (1/m^2) sum_ac BCE(x_a - x_c, T_ac).
    Returns (weighted sum of group losses, gradient wrt x).
    """
    m = x.shape[1]
    P = (x[:, :, None] - x[:, None, :])[:, None]
    T = np.where(y[..., :, None] > y[..., None, :], 1.0, np.where(y[..., :, None] == y[..., None, :], 0.5, 0.0))
    per = _bce_logits(P, T).sum(axis=(2, 3)) / (m * m)
    dP = ((_sigmoid(P) - T) * (w / (m * m))[..., None, None]).sum(axis=1)
    return float(np.sum(w * per)), dP.sum(axis=2) - dP.sum(axis=1)
