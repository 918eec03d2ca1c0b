"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--batch 32] [--length 120] [--repeat 20]

Both backends are imported directly, so the JOINTRECALL_NUMBA flag does not
matter here. The first numba call is made before timing to exclude compilation.
"""

import argparse
import timeit

import numpy as np

from jointrecall import kernels


def make_inputs(batch, length, d, k, seed=0):
    rng = np.random.default_rng(seed)
    q, kk, v = rng.standard_normal((3, batch, length, d))
    lengths = np.full(batch, length, dtype=np.int64)
    buckets_q = rng.integers(0, 16, size=(batch, length)).astype(np.int64)
    buckets_k = rng.integers(0, 16, size=(batch, length)).astype(np.int64)
    scores = rng.standard_normal((batch, length))
    idx = kernels.numpy_backend.ks_rows(scores, lengths, k)
    other = kernels.numpy_backend.lsh_rows(buckets_q, buckets_k, lengths, k)
    a = rng.random((batch, length, d))
    u = rng.standard_normal((batch, length, d))
    x = rng.standard_normal((batch, k))
    y = rng.random((batch, length, k))
    w = rng.random((batch, length))
    return dict(q=q, k=kk, v=v, lengths=lengths, bq=buckets_q, bk=buckets_k, scores=scores,
                idx=idx, other=other, a=a, u=u, x=x, y=y, w=w, kb=k)


def workloads(be, z):
    sc = 1.0 / np.sqrt(z["q"].shape[-1])
    out, probs = be.attn_forward(z["q"], z["k"], z["v"], z["idx"], sc)
    g = np.ones_like(out)
    h = be.scan_forward(z["a"], z["u"])
    return {
        "lsh_rows": lambda: be.lsh_rows(z["bq"], z["bk"], z["lengths"], z["kb"]),
        "ks_rows": lambda: be.ks_rows(z["scores"], z["lengths"], z["kb"]),
        "union_rows": lambda: be.union_rows(z["idx"], z["other"]),
        "attn_forward": lambda: be.attn_forward(z["q"], z["k"], z["v"], z["idx"], sc),
        "attn_backward": lambda: be.attn_backward(z["q"], z["k"], z["v"], z["idx"], probs, g, sc),
        "scan_forward": lambda: be.scan_forward(z["a"], z["u"]),
        "scan_backward": lambda: be.scan_backward(z["a"], z["u"], h, g),
        "rank_loss": lambda: be.rank_loss(z["x"], z["y"], z["w"]),
    }


def best_time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--length", type=int, default=120)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--budget", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    if kernels.numba_backend is None:
        raise SystemExit("numba backend unavailable; nothing to compare")
    z = make_inputs(args.batch, args.length, args.dim, args.budget)
    fast = workloads(kernels.numba_backend, z)
    slow = workloads(kernels.numpy_backend, z)

    print(f"B={args.batch} l={args.length} d={args.dim} k={args.budget}, best of {args.repeat}")
    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name in fast:
        t_np = best_time(slow[name], args.repeat)
        t_nb = best_time(fast[name], args.repeat)
        print(f"{name:<14} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
