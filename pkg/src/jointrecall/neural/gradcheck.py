"""Finite-difference check of the full model gradient.

Discrete choices (sparse patterns, LSH projections, ranking candidates and
their detached targets) are frozen at the base point, so the loss is a smooth
function of the parameters and central differences apply.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from ..errors import ResourceError
from ..patterns import scorer_inputs
from .model import HybridModel, HybridModelConfig, lsh_projections
from .train import batch_loss


def kink_distance(model: HybridModel, score_inputs: dict) -> float:
    """Smallest |pre-activation| of any scorer hidden unit on the sampled candidates."""
    dist = np.inf
    for i, (q, k, cand) in score_inputs.items():
        inp = np.take_along_axis(scorer_inputs(k, q), np.asarray(cand)[..., None], axis=1)
        z = inp @ model.params[f"l{i}.s_w1"] + model.params[f"l{i}.s_b1"]
        dist = min(dist, float(np.min(np.abs(z))))
    return dist


def model_gradient_check(
    cfg: HybridModelConfig,
    batch: int = 2,
    length: int = 12,
    seed: int = 0,
    alpha: float = 0.1,
    eps: float = 1e-5,
    samples: int = 6,
    kink_margin: float = 1e-3,
    tries: int = 20,
) -> dict[str, float]:
    """Relative error ||g_analytic - g_fd|| / ||g_fd|| per parameter tensor.

    Gates start nonzero so the attention branch carries gradient. Each tensor
    is probed on ``samples`` random coordinates. Central differences are
    meaningless across a ReLU kink, so batches whose scorer pre-activations
    lie within ``kink_margin`` of zero are redrawn.
    """
    rng = np.random.default_rng(seed)
    model = HybridModel(cfg)
    for name, value in model.params.items():
        if name.endswith("gate") or name.endswith("s_b1") or name.endswith("s_b2"):
            value[...] = rng.standard_normal(value.shape)
    H = lsh_projections(cfg, rng)
    for _ in range(tries):
        tokens = rng.integers(0, cfg.vocab_size, size=(batch, length))
        lengths = rng.integers(max(2, length // 2), length + 1, size=batch)
        lengths[0] = length
        labels = rng.integers(0, cfg.vocab_size, size=(batch, length))
        weights = (np.arange(length)[None, :] < lengths[:, None]).astype(float)
        P = model.tensors()
        loss, _, _, fr, score_inputs = batch_loss(model, P, tokens, lengths, labels, weights, alpha, H, rng)
        if kink_distance(model, score_inputs) > kink_margin:
            break
    else:
        raise ResourceError(f"no batch with scorer pre-activations farther than {kink_margin} from 0")
    patterns = fr.patterns
    loss.backward()

    def f():
        Pc = {n: ad.constant(v) for n, v in model.params.items()}
        out = batch_loss(model, Pc, tokens, lengths, labels, weights, alpha, H,
                         patterns=patterns, score_inputs=score_inputs)[0]
        return float(out.value)

    errors = {}
    for name in sorted(model.params):
        arr = model.params[name]
        coords = rng.choice(arr.size, size=min(samples, arr.size), replace=False)
        fd = ad.finite_difference_grad(f, [arr], eps=eps, coords=[coords])[0].reshape(-1)[coords]
        g = P[name].grad
        an = np.zeros(arr.size) if g is None else g.reshape(-1)[coords]
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-8)
        errors[name] = float(np.linalg.norm(an - fd) / denom)
    return errors
