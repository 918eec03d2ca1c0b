"""Language-model loss, key-selection ranking loss and their combination."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidConfigError, InvalidInputError
from ..patterns import scorer_inputs
from ..task_gen import JointRecallInstance
from . import autodiff as ad


def reference_weights(Q, K, candidates, lengths=None) -> np.ndarray:
    """Targets y[b, i, c] = sigmoid(Q_i . K_{I_c}) where I_c <= i, else 0.

    ``Q``, ``K`` are (B, l, d) or (l, d); ``candidates`` (B, m) or (m,).
    Rows at padded query positions (i >= lengths[b]) are zero. The result is a
    plain array, so no gradient reaches Q or K through it.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    I = np.asarray(candidates, dtype=np.int64)
    single = Q.ndim == 2
    if single:
        Q, K, I = Q[None], K[None], I[None]
    B, l, _ = Q.shape
    if I.shape[1] > l:
        raise InvalidConfigError(f"{I.shape[1]} candidates for a length-{l} sequence")
    if I.size and (I.min() < 0 or I.max() >= l):
        raise InvalidInputError("candidate index out of range")
    lengths = np.full(B, l) if lengths is None else np.asarray(lengths)
    Kc = np.take_along_axis(K, I[..., None], axis=1)  # (B, m, d)
    A = np.einsum("bid,bmd->bim", Q, Kc)
    causal = I[:, None, :] <= np.arange(l)[None, :, None]
    live = (np.arange(l)[None, :] < lengths[:, None])[..., None]
    y = np.where(causal & live, ad.stable_sigmoid(A), 0.0)
    return y[0] if single else y


def ranking_loss(x, y) -> float:
    """Scalar ranking loss for one group of k scores and k targets."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError(f"ranking loss needs equal 1-D inputs, got {x.shape} and {y.shape}")
    return float(ad.pairwise_ranking_loss(x, y).value)


def sample_candidates(lengths, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct positions below each sequence length, one row per sequence."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if m > lengths.min():
        raise InvalidConfigError(f"cannot sample {m} candidates from a length-{lengths.min()} sequence")
    return np.stack([np.sort(rng.choice(n, size=m, replace=False)) for n in lengths])


def layer_score_loss(theta: dict, q, k, candidates, lengths) -> ad.Tensor:
    """Ranking loss of one KS layer, averaged over every live query row.

    ``theta`` holds scorer Tensors (w1, b1, w2, b2); q and k are numpy values
    and the scorer sees them as constants.
    """
    inp = scorer_inputs(k, q)
    I = np.asarray(candidates, dtype=np.int64)
    B, m = I.shape
    inp_c = np.take_along_axis(inp, I[..., None], axis=1)
    hid = ad.relu(ad.matmul(inp_c, theta["w1"]) + theta["b1"])
    scores = ad.reshape(ad.matmul(hid, theta["w2"]) + theta["b2"], (B, 1, m))
    y = reference_weights(q, k, I, lengths)
    l = q.shape[1]
    live = (np.arange(l)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    return ad.pairwise_ranking_loss(scores, y, live)


def lm_targets(instances: list[JointRecallInstance], l: int, positions: str = "all"):
    """Labels and weights for a padded batch.

    ``all``: next-token prediction at every position, except that each query
    position is labelled with its target value (the inquiry has no value
    tokens). ``queries``: only the query positions carry weight.
    """
    if positions not in ("all", "queries"):
        raise InvalidConfigError(f"unknown LM position set {positions!r}")
    B = len(instances)
    labels = np.zeros((B, l), dtype=np.int64)
    weights = np.zeros((B, l))
    for b, inst in enumerate(instances):
        n = len(inst.tokens)
        if positions == "all":
            labels[b, : n - 1] = inst.tokens[1:]
            weights[b, : n - 1] = 1.0
        qp, tg = inst.query_positions, inst.targets
        labels[b, qp] = tg
        weights[b, qp] = 1.0
    return labels, weights


def total_loss(loss_lm: ad.Tensor, score_losses: list, alpha: float) -> ad.Tensor:
    """L = L_LM + alpha * sum of per-layer ranking losses."""
    if alpha < 0:
        raise InvalidConfigError("alpha must be >= 0")
    if alpha == 0 or not score_losses:
        return loss_lm
    s = score_losses[0]
    for extra in score_losses[1:]:
        s = ad.add(s, extra)
    return ad.add(loss_lm, ad.scale(s, alpha))
