"""Generalized state-space machines and the conditional-overwrite construction.

A machine is an initial state, an update ``u(state, token) -> state`` and a
readout ``r(state)``. The same runner serves finite-state machines (used by
the capacity brute force) and real-vector machines (used by the overwrite
construction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import InvalidInputError, ResourceError


@dataclass(frozen=True)
class GssmSpec:
    init: Any
    update: Callable[[Any, Any], Any]
    readout: Callable[[Any], Any]
    # int: dimension of a real state vector; a collection: explicit finite state set
    states: Any = None
    vocab: frozenset | None = None

    @property
    def is_finite(self) -> bool:
        return self.states is not None and not isinstance(self.states, int)


def run_gssm(spec: GssmSpec, tokens: Sequence) -> tuple[list, list]:
    """Return the state trajectory U_1..U_n and outputs R_1..R_n."""
    state = spec.init
    trajectory, outputs = [], []
    for t in tokens:
        key = t.tobytes() if isinstance(t, np.ndarray) else t
        if spec.vocab is not None and key not in spec.vocab:
            raise InvalidInputError(f"token {t!r} is not in the machine's vocabulary")
        state = spec.update(state, t)
        if spec.is_finite and state not in spec.states:
            raise InvalidInputError(f"update produced state {state!r} outside the declared state set")
        trajectory.append(state)
        outputs.append(spec.readout(state))
    return trajectory, outputs


def unit_sphere_codes(count: int, dim: int, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """Distinct unit vectors with every entry bounded away from zero.

    Rejection sampling from the standard normal; raises ``ResourceError`` when
    ``max_tries`` draws do not produce enough acceptable codes.
    """
    if dim < 1 or count < 0:
        raise InvalidInputError(f"need dim >= 1 and count >= 0, got {count}, {dim}")
    codes: list[np.ndarray] = []
    tries = 0
    while len(codes) < count:
        if tries >= max_tries:
            raise ResourceError(f"could not draw {count} distinct codes in dimension {dim}")
        tries += 1
        v = rng.standard_normal(dim)
        v = v / np.linalg.norm(v)
        if np.min(np.abs(v)) <= 1e-6:
            continue
        if codes and np.min(np.linalg.norm(np.asarray(codes) - v, axis=1)) <= 1e-6:
            continue
        codes.append(v)
    return np.asarray(codes).reshape(count, dim)


def default_code_dim(max_vocab: int) -> int:
    return math.ceil(math.log2(max(max_vocab, 2))) + 2


@dataclass(frozen=True)
class OverwriteLayout:
    """Slot layout ``[z_1, ..., z_w, v, is_v]`` with ``b``-dimensional code slots."""

    w: int
    b: int

    @property
    def size(self) -> int:
        return (self.w + 1) * self.b + 1

    def slot(self, i: int) -> slice:
        """Slot ``i`` in 0..w-1 is a context level, slot ``w`` the value."""
        return slice(i * self.b, (i + 1) * self.b)

    @property
    def value_slot(self) -> slice:
        return self.slot(self.w)

    @property
    def flag(self) -> int:
        return self.size - 1

    def empty(self) -> np.ndarray:
        return np.zeros(self.size)

    def context_embedding(self, level: int, code) -> np.ndarray:
        e = self.empty()
        e[self.slot(level)] = code
        e[self.flag] = -1.0
        return e

    def value_embedding(self, code) -> np.ndarray:
        e = self.empty()
        e[self.value_slot] = code
        e[self.flag] = 1.0
        return e

    def check_embedding(self, e: np.ndarray) -> None:
        if e.shape != (self.size,):
            raise InvalidInputError(f"embedding has shape {e.shape}, layout needs ({self.size},)")
        if e[self.flag] not in (-1.0, 1.0):
            raise InvalidInputError("is_v coordinate must be -1 or +1")
        occupied = [i for i in range(self.w + 1) if np.any(e[self.slot(i)] != 0)]
        if len(occupied) > 1:
            raise InvalidInputError(f"embedding occupies {len(occupied)} code slots, at most one allowed")
        for i in occupied:
            if np.any(e[self.slot(i)] == 0):
                raise InvalidInputError(f"slot {i} is partially filled")


def overwrite_update(state: np.ndarray, e: np.ndarray, layout: OverwriteLayout | None = None) -> np.ndarray:
    """Keep the state where ``e`` is zero, take ``e`` where it is nonzero."""
    state = np.asarray(state, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if layout is not None:
        layout.check_embedding(e)
        if state.shape != (layout.size,):
            raise InvalidInputError(f"state has shape {state.shape}, layout needs ({layout.size},)")
    elif state.shape != e.shape:
        raise InvalidInputError(f"state {state.shape} and embedding {e.shape} differ in shape")
    return np.where(e != 0, e, state)


def overwrite_machine(layout: OverwriteLayout, embed: Callable[[Any], np.ndarray], vocab=None) -> GssmSpec:
    """GSSM over tokens: embed each token, then conditional overwrite; identity readout."""
    return GssmSpec(
        init=layout.empty(),
        update=lambda s, t: overwrite_update(s, embed(t), layout),
        readout=lambda s: s,
        states=layout.size,
        vocab=vocab,
    )


def run_overwrite(layout: OverwriteLayout, embeddings: np.ndarray) -> np.ndarray:
    """Vectorised equivalent of running the overwrite machine: (l, size) states.

    Each coordinate carries the most recent nonzero embedding value (forward fill).
    """
    E = np.asarray(embeddings, dtype=np.float64)
    l = E.shape[0]
    nz = E != 0
    last = np.where(nz, np.arange(l)[:, None], -1)
    last = np.maximum.accumulate(last, axis=0)
    out = np.take_along_axis(E, np.maximum(last, 0), axis=0)
    return np.where(last >= 0, out, 0.0)
