"""Multi-query (multi-level) joint recall: vocabulary, tables, encoding, datasets.

A sequence lays out the association table as nested blocks (the information
component) and then repeats the block structure under a per-level permutation
with the value tokens removed (the inquiry component). Every last-level token
in the inquiry component is a query whose target is the value stored for the
contexts in force at that position.

Token ids are assigned in contiguous ranges: one range per context level, then
one range for values. No separator tokens are used.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class Vocabulary:
    level_sizes: tuple[int, ...]
    value_size: int

    def __post_init__(self):
        object.__setattr__(self, "level_sizes", tuple(int(s) for s in self.level_sizes))
        if not self.level_sizes:
            raise InvalidConfigError("at least one context level is required")
        if any(s < 1 for s in self.level_sizes) or self.value_size < 1:
            raise InvalidConfigError(
                f"vocabulary sizes must be >= 1, got {self.level_sizes} / {self.value_size}"
            )

    @property
    def w(self) -> int:
        return len(self.level_sizes)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        """Start id of each role; the last entry is the value range start."""
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.level_sizes)]))

    @property
    def value_offset(self) -> int:
        return self.offsets[-1]

    @property
    def size(self) -> int:
        return sum(self.level_sizes) + self.value_size

    @property
    def value_role(self) -> int:
        return self.w

    def context_id(self, level: int, index: int) -> int:
        if not 0 <= index < self.level_sizes[level]:
            raise InvalidInputError(f"context index {index} out of range at level {level}")
        return self.offsets[level] + index

    def value_id(self, value: int) -> int:
        if not 0 <= value < self.value_size:
            raise InvalidInputError(f"value {value} out of range")
        return self.value_offset + value

    def role_of(self, token: int) -> tuple[int, int]:
        """Map a token id to ``(role, index)``; role ``w`` denotes the value range."""
        token = int(token)
        if not 0 <= token < self.size:
            raise InvalidInputError(f"token {token} outside vocabulary of size {self.size}")
        offs = self.offsets
        role = int(np.searchsorted(offs, token, side="right")) - 1
        return role, token - offs[role]

    def role_array(self, tokens) -> np.ndarray:
        return np.searchsorted(self.offsets, np.asarray(tokens), side="right") - 1


def make_vocab(level_sizes: Sequence[int], value_size: int) -> Vocabulary:
    return Vocabulary(tuple(level_sizes), int(value_size))


@dataclass(frozen=True)
class AssociationTable:
    """Total map from context-index tuples to value indices, stored as an ndarray."""

    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.values.shape)

    @property
    def n(self) -> int:
        return int(self.values.size)

    def __getitem__(self, key):
        return int(self.values[key])

    def __eq__(self, other):
        if not isinstance(other, AssociationTable):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.shape, self.values.tobytes()))


def sample_table(vocab: Vocabulary, rng: np.random.Generator, shape=None) -> AssociationTable:
    """Uniform i.i.d. values for every context tuple.

    ``shape`` defaults to the full vocabulary level sizes; a smaller shape uses
    the first ``shape[i]`` context tokens of each level.
    """
    shape = vocab.level_sizes if shape is None else tuple(int(s) for s in shape)
    _check_shape(shape, vocab)
    return AssociationTable(rng.integers(0, vocab.value_size, size=shape, dtype=np.int64))


def _check_shape(shape, vocab):
    if len(shape) != vocab.w:
        raise InvalidConfigError(f"table has {len(shape)} levels, vocabulary has {vocab.w}")
    for s, cap in zip(shape, vocab.level_sizes):
        if not 1 <= s <= cap:
            raise InvalidConfigError(f"level size {s} not in [1, {cap}]")


@dataclass
class JointRecallInstance:
    tokens: np.ndarray
    info_len: int
    queries: list[tuple[int, int]]
    table: AssociationTable
    permutation: list[list[int]]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.table.shape

    @property
    def query_positions(self) -> np.ndarray:
        return np.array([p for p, _ in self.queries], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for _, t in self.queries], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "tokens": [int(t) for t in self.tokens],
            "info_len": int(self.info_len),
            "queries": [[int(p), int(t)] for p, t in self.queries],
            "shape": list(self.shape),
            "perm": [[int(x) for x in p] for p in self.permutation],
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary) -> "JointRecallInstance":
        tokens = np.asarray(obj["tokens"], dtype=np.int64)
        info_len = int(obj["info_len"])
        table = decode_table(tokens[:info_len], vocab, tuple(obj["shape"]))
        return cls(
            tokens=tokens,
            info_len=info_len,
            queries=[(int(p), int(t)) for p, t in obj["queries"]],
            table=table,
            permutation=[list(p) for p in obj["perm"]],
        )


def sequence_length(shape: Sequence[int]) -> tuple[int, int]:
    """Closed-form ``(info_len, total_len)`` for a table shape."""
    blocks = sum(math.prod(shape[: i + 1]) for i in range(len(shape)))
    n = math.prod(shape)
    return blocks + n, 2 * blocks + n


def random_permutation(shape, rng: np.random.Generator) -> list[list[int]]:
    return [[int(x) for x in rng.permutation(s)] for s in shape]


def encode_instance(
    table: AssociationTable,
    vocab: Vocabulary,
    permutation=None,
    rng: np.random.Generator | None = None,
) -> JointRecallInstance:
    shape = table.shape
    _check_shape(shape, vocab)
    if permutation is None:
        if rng is None:
            permutation = [list(range(s)) for s in shape]
        else:
            permutation = random_permutation(shape, rng)
    permutation = [list(int(x) for x in p) for p in permutation]
    if len(permutation) != len(shape):
        raise InvalidConfigError(f"permutation has {len(permutation)} levels, table has {len(shape)}")
    for lvl, (p, s) in enumerate(zip(permutation, shape)):
        if sorted(p) != list(range(s)):
            raise InvalidConfigError(f"level {lvl} permutation {p} is not a permutation of range({s})")

    w = len(shape)
    tokens: list[int] = []

    def info(level, prefix):
        for idx in range(shape[level]):
            tokens.append(vocab.context_id(level, idx))
            if level == w - 1:
                tokens.append(vocab.value_id(int(table.values[prefix + (idx,)])))
            else:
                info(level + 1, prefix + (idx,))

    queries: list[tuple[int, int]] = []

    def inquiry(level, prefix):
        for idx in permutation[level]:
            tokens.append(vocab.context_id(level, idx))
            if level == w - 1:
                target = vocab.value_id(int(table.values[prefix + (idx,)]))
                queries.append((len(tokens) - 1, target))
            else:
                inquiry(level + 1, prefix + (idx,))

    info(0, ())
    info_len = len(tokens)
    inquiry(0, ())
    return JointRecallInstance(
        tokens=np.asarray(tokens, dtype=np.int64),
        info_len=info_len,
        queries=queries,
        table=table,
        permutation=permutation,
    )


def decode_table(info_tokens, vocab: Vocabulary, shape=None) -> AssociationTable:
    """Rebuild the table from an information component by replaying it."""
    shape = vocab.level_sizes if shape is None else tuple(shape)
    w = vocab.w
    values = np.full(shape, -1, dtype=np.int64)
    current = [None] * w
    for tok in info_tokens:
        role, idx = vocab.role_of(tok)
        if role == w:
            if any(c is None for c in current):
                raise InvalidInputError("value token before all context levels were set")
            values[tuple(current)] = idx
        else:
            current[role] = idx
    if (values < 0).any():
        raise InvalidInputError("information component does not cover the whole table")
    return AssociationTable(values)


def reference_answers(tokens, info_len: int, vocab: Vocabulary) -> list[tuple[int, int]]:
    """Interpret a sequence directly: (position, expected value token) per query.

    Independent of the encoder; used to cross-check recorded query targets.
    """
    w = vocab.w
    store: dict[tuple, int] = {}
    current = [None] * w
    for tok in tokens[:info_len]:
        role, idx = vocab.role_of(tok)
        if role == w:
            store[tuple(current)] = int(tok)
        else:
            current[role] = idx
    current = [None] * w
    out = []
    for pos in range(info_len, len(tokens)):
        role, idx = vocab.role_of(tokens[pos])
        current[role] = idx
        if role == w - 1:
            out.append((pos, store[tuple(current)]))
    return out


def score_predictions(predictions, instance: JointRecallInstance) -> float:
    predictions = np.asarray(predictions)
    if predictions.shape != (len(instance.queries),):
        raise InvalidInputError(
            f"expected {len(instance.queries)} predictions, got shape {predictions.shape}"
        )
    return float(np.mean(predictions == instance.targets))


def mean_accuracy(per_instance: Sequence[float]) -> float:
    return float(np.mean(per_instance)) if len(per_instance) else 0.0


@dataclass
class DatasetConfig:
    w: int = 2
    low: int = 2
    high: int = 5
    value_size: int = 8
    count: int = 1000
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.w < 1:
            raise InvalidConfigError("w must be >= 1")
        if self.low < 1 or self.high < self.low:
            raise InvalidConfigError(f"bad level size range [{self.low}, {self.high}]")
        if self.count < 1:
            raise InvalidConfigError("count must be >= 1")
        if self.value_size < 1:
            raise InvalidConfigError("value_size must be >= 1")

    def vocab(self) -> Vocabulary:
        return make_vocab([self.high] * self.w, self.value_size)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def iter_instances(config: DatasetConfig, shard: int = 0) -> Iterator[JointRecallInstance]:
    """Deterministic instance stream; each shard index gets its own stream."""
    rng = np.random.default_rng([config.seed, shard])
    vocab = config.vocab()
    for _ in range(config.count):
        shape = tuple(int(x) for x in rng.integers(config.low, config.high + 1, size=config.w))
        table = sample_table(vocab, rng, shape)
        yield encode_instance(table, vocab, rng=rng)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def generate_dataset(config: DatasetConfig, path=None, shard: int = 0) -> Path:
    """Write ``config.count`` instances as JSON Lines plus a checksum manifest."""
    path = path if path is not None else config.path
    if path is None:
        raise InvalidConfigError("no output path")
    path = Path(path)
    h = hashlib.sha256()
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            for inst in iter_instances(config, shard):
                line = (json.dumps(inst.to_json(), separators=(",", ":")) + "\n").encode()
                h.update(line)
                f.write(line)
        os.replace(tmp, path)
        manifest = {
            "config": {**config.to_json(), "path": str(path)},
            "shard": shard,
            "count": config.count,
            "checksum": "sha256:" + h.hexdigest(),
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


@dataclass
class Dataset:
    vocab: Vocabulary
    instances: list[JointRecallInstance] = field(default_factory=list)
    checksum: str | None = None

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    cfg = manifest["config"]
    vocab = make_vocab([cfg["high"]] * cfg["w"], cfg["value_size"])
    with open(path) as f:
        instances = [JointRecallInstance.from_json(json.loads(line), vocab) for line in f if line.strip()]
    return Dataset(vocab, instances, manifest.get("checksum"))


def in_memory_dataset(config: DatasetConfig) -> Dataset:
    return Dataset(config.vocab(), list(iter_instances(config)))
