"""numba-compiled kernels; same signatures and results as ``_numpy``."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def lsh_rows(bin_q, bin_k, lengths, k_bin):
    B, l = bin_q.shape
    out = np.full((B, l, k_bin), -1, dtype=np.int64)
    for b in range(B):
        n = lengths[b]
        if n == 0:
            continue
        # bucket key positions by bin, ascending within each bucket
        order = np.argsort(bin_k[b, :n], kind="mergesort")
        sorted_bins = bin_k[b, :n][order]
        for i in range(n):
            target = bin_q[b, i]
            lo = np.searchsorted(sorted_bins, target, side="left")
            hi = np.searchsorted(sorted_bins, target, side="right")
            end = lo + np.searchsorted(order[lo:hi], i, side="right")
            start = max(lo, end - k_bin)
            for s in range(start, end):
                out[b, i, s - start] = order[s]
    return out


@njit(cache=True)
def ks_rows(scores, lengths, k):
    B, l = scores.shape
    out = np.full((B, l, k), -1, dtype=np.int64)
    held = np.empty(k, dtype=np.int64)
    for b in range(B):
        n = lengths[b]
        size = 0
        for i in range(n):
            x = scores[b, i]
            if size < k:
                held[size] = i
                size += 1
            else:
                # evict the weakest entry: lowest score, latest position on ties
                worst = 0
                for s in range(1, size):
                    c = held[s]
                    w = held[worst]
                    if scores[b, c] < scores[b, w] or (
                        scores[b, c] == scores[b, w] and c > w
                    ):
                        worst = s
                if x > scores[b, held[worst]]:
                    held[worst] = i
            row = np.sort(held[:size])
            for s in range(size):
                out[b, i, s] = row[s]
    return out


@njit(cache=True)
def union_rows(a, b):
    B, l, ka = a.shape
    kb = b.shape[2]
    out = np.full((B, l, ka + kb), -1, dtype=np.int64)
    for bb in range(B):
        for i in range(l):
            p = 0
            r = 0
            o = 0
            while True:
                x = a[bb, i, p] if p < ka else -1
                y = b[bb, i, r] if r < kb else -1
                if x < 0 and y < 0:
                    break
                if y < 0 or (x >= 0 and x < y):
                    nxt = x
                    p += 1
                elif x < 0 or y < x:
                    nxt = y
                    r += 1
                else:
                    nxt = x
                    p += 1
                    r += 1
                out[bb, i, o] = nxt
                o += 1
    return out


@njit(cache=True)
def attn_forward(q, k, v, idx, scale):
    B, l, d = q.shape
    K = idx.shape[2]
    dv = v.shape[2]
    out = np.zeros((B, l, dv), dtype=q.dtype)
    probs = np.zeros((B, l, K), dtype=q.dtype)
    for b in range(B):
        for i in range(l):
            mx = -np.inf
            for s in range(K):
                j = idx[b, i, s]
                if j < 0:
                    continue
                acc = 0.0
                for c in range(d):
                    acc += q[b, i, c] * k[b, j, c]
                acc *= scale
                probs[b, i, s] = acc
                if acc > mx:
                    mx = acc
            if mx == -np.inf:
                continue
            z = 0.0
            for s in range(K):
                if idx[b, i, s] >= 0:
                    e = math.exp(probs[b, i, s] - mx)
                    probs[b, i, s] = e
                    z += e
            for s in range(K):
                j = idx[b, i, s]
                if j < 0:
                    continue
                p = probs[b, i, s] / z
                probs[b, i, s] = p
                for c in range(dv):
                    out[b, i, c] += p * v[b, j, c]
    return out, probs


@njit(cache=True)
def attn_backward(q, k, v, idx, probs, gout, scale):
    B, l, d = q.shape
    K = idx.shape[2]
    dv = v.shape[2]
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gp = np.zeros(K, dtype=q.dtype)
    for b in range(B):
        for i in range(l):
            dot = 0.0
            for s in range(K):
                j = idx[b, i, s]
                if j < 0:
                    gp[s] = 0.0
                    continue
                acc = 0.0
                for c in range(dv):
                    acc += gout[b, i, c] * v[b, j, c]
                gp[s] = acc
                dot += probs[b, i, s] * acc
            for s in range(K):
                j = idx[b, i, s]
                if j < 0:
                    continue
                p = probs[b, i, s]
                gl = p * (gp[s] - dot) * scale
                for c in range(d):
                    gq[b, i, c] += gl * k[b, j, c]
                    gk[b, j, c] += gl * q[b, i, c]
                for c in range(dv):
                    gv[b, j, c] += p * gout[b, i, c]
    return gq, gk, gv


@njit(cache=True)
def scan_forward(a, u):
    B, l, d = u.shape
    h = np.empty_like(u)
    for b in range(B):
        for c in range(d):
            prev = 0.0
            for t in range(l):
                prev = a[b, t, c] * prev + (1.0 - a[b, t, c]) * u[b, t, c]
                h[b, t, c] = prev
    return h


@njit(cache=True)
def scan_backward(a, u, h, gh):
    B, l, d = u.shape
    ga = np.empty_like(a)
    gu = np.empty_like(u)
    for b in range(B):
        for c in range(d):
            carry = 0.0
            for t in range(l - 1, -1, -1):
                carry += gh[b, t, c]
                prev = h[b, t - 1, c] if t > 0 else 0.0
                ga[b, t, c] = carry * (prev - u[b, t, c])
                gu[b, t, c] = carry * (1.0 - a[b, t, c])
                carry *= a[b, t, c]
    return ga, gu


@njit(cache=True)
def rank_loss(x, y, w):
    # x (B, m) is shared by the L target rows y[b] (B, L, m), weights w (B, L).
    # Pairs (a, c) and (c, a) have equal BCE and mirrored gradients and the
    # diagonal adds ln 2 with zero gradient, so only c > a is visited.
    B, L, m = y.shape
    dx = np.zeros((B, m))
    total = 0.0
    inv = 1.0 / (m * m)
    diag = m * math.log(2.0)
    base = np.empty((m, m))
    sig = np.empty((m, m))
    for b in range(B):
        for a in range(m):
            for c in range(a + 1, m):
                p = x[b, a] - x[b, c]
                e = math.exp(-abs(p))
                base[a, c] = max(p, 0.0) + math.log1p(e)
                sig[a, c] = 1.0 / (1.0 + e) if p >= 0 else e / (1.0 + e)
        for i in range(L):
            wg = w[b, i]
            if wg == 0.0:
                continue
            acc = diag
            for a in range(m):
                ya = y[b, i, a]
                for c in range(a + 1, m):
                    yc = y[b, i, c]
                    if ya > yc:
                        t = 1.0
                    elif ya == yc:
                        t = 0.5
                    else:
                        t = 0.0
                    p = x[b, a] - x[b, c]
                    acc += 2.0 * (base[a, c] - t * p)
                    d = 2.0 * (sig[a, c] - t) * wg * inv
                    dx[b, a] += d
                    dx[b, c] -= d
            total += wg * acc * inv
    return total, dx
