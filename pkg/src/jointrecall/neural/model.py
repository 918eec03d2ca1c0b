"""Hybrid SSM + sparse-attention language model.

Each layer is a pre-norm residual block ``x <- x + block(norm(x))`` with
``block = ssm_layer + gate * sparse_attention``. The attention branch is
absent for kind ``none``; the gate is a per-channel vector that starts at 0.

Parameters are drawn from an RNG seeded by (model seed, parameter name), so a
hybrid model and its attention-free counterpart share every common weight.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import InvalidConfigError, InvalidInputError
from ..patterns import CDSA_KINDS, CISA_KINDS, LshConfig, cisa_rows, lsh_rows_batched, scorer_inputs
from . import autodiff as ad

KINDS = ("none",) + CISA_KINDS + CDSA_KINDS


@dataclass
class HybridModelConfig:
    vocab_size: int
    value_offset: int = 0  # first value-token id; decoding is restricted to ids >= this
    d: int = 32
    n_layers: int = 2
    kinds: list = field(default_factory=lambda: ["none"])
    k: int = 16
    lsh: LshConfig = field(default_factory=LshConfig)
    stride: int = 4
    gate_init: float = 0.0
    widen: int = 1
    ssm_branch: list | None = None  # per-layer; False gives an attention-only layer
    retain_bias: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lsh, dict):
            self.lsh = LshConfig(**self.lsh)
        if isinstance(self.kinds, str):
            self.kinds = [self.kinds]
        self.kinds = list(self.kinds)
        if len(self.kinds) == 1:
            self.kinds = self.kinds * self.n_layers
        if self.n_layers < 1:
            raise InvalidConfigError("need at least one layer")
        if len(self.kinds) != self.n_layers:
            raise InvalidConfigError(f"{len(self.kinds)} pattern kinds for {self.n_layers} layers")
        for kind in self.kinds:
            if kind not in KINDS:
                raise InvalidConfigError(f"unknown pattern kind {kind!r}")
        if any(kd != "none" for kd in self.kinds) and self.k < 1:
            raise InvalidConfigError("k must be >= 1 when attention is used")
        if "hax" in self.kinds and self.k < 2:
            raise InvalidConfigError("hax needs k >= 2 to split the budget")
        if self.d < 1 or self.widen < 1 or self.vocab_size < 1:
            raise InvalidConfigError("d, widen and vocab_size must be positive")
        if not 0 <= self.value_offset < self.vocab_size:
            raise InvalidConfigError("value_offset must index into the vocabulary")
        if self.ssm_branch is None:
            self.ssm_branch = [True] * self.n_layers
        self.ssm_branch = [bool(b) for b in self.ssm_branch]
        if len(self.ssm_branch) != self.n_layers:
            raise InvalidConfigError("ssm_branch needs one entry per layer")
        for kind, ssm in zip(self.kinds, self.ssm_branch):
            if kind == "none" and not ssm:
                raise InvalidConfigError("a layer needs an SSM branch or an attention branch")

    @property
    def width(self) -> int:
        return self.d * self.widen

    def branch_budgets(self, kind: str) -> tuple[int, int]:
        """(LSH budget, KS budget) for a CDSA kind."""
        if kind == "lsh":
            return self.k, 0
        if kind == "ks":
            return 0, self.k
        if kind == "hax":
            return self.k // 2, self.k // 2
        return 0, 0

    def attention_free(self) -> "HybridModelConfig":
        """Same stack with attention removed; attention-only layers disappear.

        Parameter names are per layer index, so dropping a layer keeps the
        initialization identical only when no SSM layer follows it.
        """
        n = sum(self.ssm_branch)
        if n == 0:
            raise InvalidConfigError("model has no SSM layer")
        return dataclasses.replace(self, n_layers=n, kinds=["none"] * n, ssm_branch=None)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["lsh"] = dataclasses.asdict(self.lsh)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "HybridModelConfig":
        return cls(**obj)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: HybridModelConfig) -> dict[str, np.ndarray]:
    d, V = cfg.width, cfg.vocab_size
    params: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out, scale=1.0):
        params[name] = scale * _param_rng(cfg.seed, name).standard_normal((n_in, n_out)) / np.sqrt(n_in)

    params["embed"] = _param_rng(cfg.seed, "embed").standard_normal((V, d))
    for i, (kind, ssm) in enumerate(zip(cfg.kinds, cfg.ssm_branch)):
        p = f"l{i}."
        params[p + "norm"] = np.ones(d)
        if ssm:
            dense(p + "wa", d, d)
            params[p + "ba"] = np.full(d, cfg.retain_bias)
            dense(p + "wb", d, d)
            dense(p + "wo", d, d)
        if kind != "none":
            dense(p + "wq", d, d)
            dense(p + "wk", d, d)
            dense(p + "wv", d, d)
            params[p + "gate"] = np.full(d, float(cfg.gate_init))
        if kind in ("ks", "hax"):
            dense(p + "s_w1", 2 * d, 2 * d)
            params[p + "s_b1"] = np.zeros(2 * d)
            dense(p + "s_w2", 2 * d, 1)
            params[p + "s_b2"] = np.zeros(1)
    params["final_norm"] = np.ones(d)
    # small readout keeps the initial predictive distribution near uniform
    dense("head", d, V, scale=0.3)
    return params


def lsh_projections(cfg: HybridModelConfig, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """One random projection per LSH-using layer."""
    return {
        i: rng.standard_normal((cfg.width, cfg.lsh.h))
        for i, kind in enumerate(cfg.kinds)
        if kind in ("lsh", "hax")
    }


def frozen_projections(cfg: HybridModelConfig) -> dict[int, np.ndarray]:
    return lsh_projections(cfg, np.random.default_rng([cfg.seed, cfg.lsh.seed, 7]))


def layer_pattern(cfg: HybridModelConfig, i: int, q, k, lengths, theta=None, H=None) -> np.ndarray:
    """Padded (B, l, K) index rows for layer ``i`` given numpy Q, K."""
    kind = cfg.kinds[i]
    B, l, _ = q.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if kind in CISA_KINDS:
        rows = cisa_rows(kind, l, cfg.k, stride=cfg.stride)
        return np.ascontiguousarray(np.broadcast_to(rows, (B,) + rows.shape))
    k_lsh, k_ks = cfg.branch_budgets(kind)
    parts = []
    if k_lsh:
        if H is None:
            raise InvalidInputError(f"layer {i} needs an LSH projection")
        parts.append(lsh_rows_batched(q, k, lengths, H, cfg.lsh.rule, k_lsh))
    if k_ks:
        inp = scorer_inputs(k, q)
        hid = np.maximum(inp @ theta["s_w1"] + theta["s_b1"], 0.0)
        scores = np.ascontiguousarray((hid @ theta["s_w2"] + theta["s_b2"])[..., 0])
        parts.append(kernels.ks_rows(scores, lengths, k_ks))
    if len(parts) == 1:
        return parts[0]
    return kernels.union_rows(np.ascontiguousarray(parts[0]), np.ascontiguousarray(parts[1]))


def ssm_layer(x, P: dict, prefix: str):
    """h_t = a_t h_{t-1} + (1 - a_t) u_t, a_t = sigmoid(W_a x_t + b_a), u_t = W_b x_t; y = W_o h."""
    a = ad.sigmoid(ad.matmul(x, P[prefix + "wa"]) + P[prefix + "ba"])
    u = ad.matmul(x, P[prefix + "wb"])
    return ad.matmul(ad.gated_scan(a, u), P[prefix + "wo"])


@dataclass
class ForwardResult:
    logits: ad.Tensor
    patterns: dict
    # per KS-using layer: (scorer input array (B, l, 2d), q, k) as numpy
    scorer_cache: dict


class HybridModel:
    def __init__(self, cfg: HybridModelConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else {n: np.asarray(v, dtype=np.float64) for n, v in params.items()}
        expected = set(init_params(cfg)) if params is not None else set(self.params)
        if set(self.params) != expected:
            raise InvalidInputError("parameter names do not match the configuration")
        self.eval_projections = frozen_projections(cfg)

    def tensors(self) -> dict[str, ad.Tensor]:
        return {n: ad.parameter(v, name=n) for n, v in self.params.items()}

    def forward(self, tokens, lengths=None, P=None, projections=None, patterns=None) -> ForwardResult:
        """Run the model on a padded (B, l) token batch.

        ``P`` maps names to Tensors (defaults to constants), ``projections``
        overrides the LSH matrices (defaults to the frozen eval ones) and
        ``patterns`` forces per-layer index rows (used by gradient checks).
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise InvalidInputError(f"tokens must be (B, l), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise InvalidInputError("token id out of range")
        B, l = tokens.shape
        lengths = np.full(B, l, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if P is None:
            P = {n: ad.constant(v) for n, v in self.params.items()}
        projections = self.eval_projections if projections is None else projections
        used, cache = {}, {}
        x = ad.embedding(P["embed"], tokens)
        for i, (kind, ssm) in enumerate(zip(cfg.kinds, cfg.ssm_branch)):
            p = f"l{i}."
            xn = ad.rms_norm(x, P[p + "norm"])
            y = ssm_layer(xn, P, p) if ssm else None
            if kind != "none":
                q = ad.matmul(xn, P[p + "wq"])
                k = ad.matmul(xn, P[p + "wk"])
                v = ad.matmul(xn, P[p + "wv"])
                if patterns is not None and i in patterns:
                    idx = patterns[i]
                else:
                    theta = {n[len(p):]: self.params[n] for n in self.params if n.startswith(p + "s_")}
                    idx = layer_pattern(cfg, i, q.value, k.value, lengths, theta, projections.get(i))
                used[i] = idx
                if kind in ("ks", "hax"):
                    cache[i] = (q.value, k.value)
                att = ad.mul(P[p + "gate"], ad.sparse_attention(q, k, v, idx))
                y = att if y is None else ad.add(y, att)
            x = ad.add(x, y)
        logits = ad.matmul(ad.rms_norm(x, P["final_norm"]), P["head"])
        return ForwardResult(logits, used, cache)

    def logits(self, tokens, lengths=None) -> np.ndarray:
        return self.forward(tokens, lengths).logits.value
