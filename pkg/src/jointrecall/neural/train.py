"""Training loop, evaluation, checkpoints and metric logs."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidConfigError, InvalidInputError, TrainingDivergenceError
from ..task_gen import (
    DatasetConfig,
    JointRecallInstance,
    encode_instance,
    in_memory_dataset,
    load_dataset,
    mean_accuracy,
    sample_table,
    score_predictions,
)
from . import autodiff as ad
from .losses import layer_score_loss, lm_targets, sample_candidates, total_loss
from .model import HybridModel, HybridModelConfig, lsh_projections
from .optim import AdamW

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = 0.1
    seed: int = 0
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train_path: str | None = None  # fixed training file; default streams fresh instances
    val_path: str | None = None
    val_count: int = 500
    val_seed: int = 12345
    eval_every: int = 500
    warmup: int = 100
    schedule: str = "cosine"
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    lm_positions: str = "all"

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DatasetConfig(**self.data)
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise InvalidConfigError("steps, batch_size, lr and eval_every must be positive")
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidConfigError(f"unknown schedule {self.schedule!r}")
        if self.lm_positions not in ("all", "queries"):
            raise InvalidConfigError(f"unknown LM position set {self.lm_positions!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    model: HybridModel
    log: list[dict]
    accuracy: float


def collate(instances: list[JointRecallInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Pad token sequences with id 0; return (tokens (B, l), lengths (B,))."""
    lengths = np.array([len(x.tokens) for x in instances], dtype=np.int64)
    tokens = np.zeros((len(instances), int(lengths.max())), dtype=np.int64)
    for b, x in enumerate(instances):
        tokens[b, : lengths[b]] = x.tokens
    return tokens, lengths


def random_instance(data: DatasetConfig, vocab, rng: np.random.Generator) -> JointRecallInstance:
    shape = tuple(int(s) for s in rng.integers(data.low, data.high + 1, size=data.w))
    return encode_instance(sample_table(vocab, rng, shape), vocab, rng=rng)


def predict(model: HybridModel, instances: list[JointRecallInstance], batch_size: int = 128) -> list[np.ndarray]:
    """Greedy predictions at each instance's query positions, restricted to value ids."""
    lo = model.cfg.value_offset
    out = []
    for s in range(0, len(instances), batch_size):
        chunk = instances[s : s + batch_size]
        tokens, lengths = collate(chunk)
        logits = model.logits(tokens, lengths)
        for b, inst in enumerate(chunk):
            out.append(lo + np.argmax(logits[b, inst.query_positions, lo:], axis=-1))
    return out


def evaluate(model: HybridModel, instances, batch_size: int = 128) -> float:
    instances = list(instances)
    preds = predict(model, instances, batch_size)
    return mean_accuracy([score_predictions(p, inst) for p, inst in zip(preds, instances)])


def model_config_for(data: DatasetConfig, **kwargs) -> HybridModelConfig:
    """Model config whose vocabulary matches the dataset's."""
    vocab = data.vocab()
    return HybridModelConfig(vocab_size=vocab.size, value_offset=vocab.value_offset, **kwargs)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if cfg.schedule == "constant" or cfg.steps <= cfg.warmup:
        return cfg.lr
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def batch_loss(model: HybridModel, P, tokens, lengths, labels, weights, alpha: float,
               projections=None, rng=None, patterns=None, score_inputs=None):
    """Total loss for one padded batch.

    Candidates for each KS layer are sampled from ``rng`` unless
    ``score_inputs`` fixes them as {layer: (q, k, candidates)}. Returns
    (loss, loss_lm, score_losses, forward result, score inputs used).
    """
    cfg = model.cfg
    fr = model.forward(tokens, lengths, P=P, projections=projections, patterns=patterns)
    loss_lm = ad.cross_entropy(fr.logits, labels, weights)
    score_losses, used = [], {}
    m = min(cfg.k, int(np.min(lengths)))
    for i, (q, k) in sorted(fr.scorer_cache.items()):
        if score_inputs is not None:
            q, k, cand = score_inputs[i]
        else:
            cand = sample_candidates(lengths, m, rng)
        used[i] = (q, k, cand)
        p = f"l{i}.s_"
        theta = {n: P[p + n] for n in ("w1", "b1", "w2", "b2")}
        score_losses.append(layer_score_loss(theta, q, k, cand, lengths))
    return total_loss(loss_lm, score_losses, alpha), loss_lm, score_losses, fr, used


def train_step(model: HybridModel, instances, rng: np.random.Generator, alpha: float, lm_positions: str = "all"):
    """Forward and backward on one batch. Returns (grads, loss_lm, loss_score)."""
    tokens, lengths = collate(instances)
    labels, weights = lm_targets(instances, tokens.shape[1], lm_positions)
    P = model.tensors()
    H = lsh_projections(model.cfg, rng)
    loss, loss_lm, score_losses, _, _ = batch_loss(model, P, tokens, lengths, labels, weights, alpha, H, rng)
    if not np.isfinite(loss.value):
        raise TrainingDivergenceError("non-finite loss")
    loss.backward()
    grads = {n: t.grad for n, t in P.items()}
    return grads, float(loss_lm.value), float(sum(float(s.value) for s in score_losses))


def train(model_cfg: HybridModelConfig, cfg: TrainConfig, metrics_path=None, log_fn=None) -> TrainResult:
    """Train a fresh model; divergence raises with ``exc.log`` holding the partial log."""
    vocab = cfg.data.vocab()
    if (model_cfg.vocab_size, model_cfg.value_offset) != (vocab.size, vocab.value_offset):
        raise InvalidConfigError(
            f"model vocabulary ({model_cfg.vocab_size}, values from {model_cfg.value_offset}) "
            f"does not match the dataset's ({vocab.size}, values from {vocab.value_offset})"
        )
    model = HybridModel(model_cfg)
    if cfg.val_path:
        val = list(load_dataset(cfg.val_path))
    else:
        val = list(in_memory_dataset(dataclasses.replace(cfg.data, seed=cfg.val_seed, count=cfg.val_count)))
    train_pool = list(load_dataset(cfg.train_path)) if cfg.train_path else None
    rng = np.random.default_rng([cfg.seed, 1])
    data_rng = np.random.default_rng([cfg.seed, 2])
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    log: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None

    def record(step, loss_lm, loss_score):
        row = {
            "step": step,
            "loss_lm": loss_lm,
            "loss_score": loss_score,
            "val_accuracy": evaluate(model, val),
        }
        log.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()
        if log_fn:
            log_fn(row)

    try:
        loss_lm = loss_score = None
        for step in range(cfg.steps):
            if train_pool is not None:
                batch = [train_pool[j] for j in data_rng.integers(0, len(train_pool), cfg.batch_size)]
            else:
                batch = [random_instance(cfg.data, vocab, data_rng) for _ in range(cfg.batch_size)]
            try:
                grads, loss_lm, loss_score = train_step(model, batch, rng, cfg.alpha, cfg.lm_positions)
                opt.step(model.params, grads, lr_at(cfg, step))
            except TrainingDivergenceError as exc:
                exc.log = log
                exc.step = step
                raise
            if (step + 1) % cfg.eval_every == 0 and step + 1 != cfg.steps:
                record(step + 1, loss_lm, loss_score)
        record(cfg.steps, loss_lm, loss_score)
    finally:
        if sink:
            sink.close()
    return TrainResult(model, log, log[-1]["val_accuracy"])


def save_checkpoint(model: HybridModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": model.cfg.to_json()})
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **model.params)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> HybridModel:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {meta.get('version')}")
        params = {n: data[n] for n in data.files if n != "__meta__"}
    return HybridModel(HybridModelConfig.from_json(meta["config"]), params)
