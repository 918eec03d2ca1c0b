"""Executable versions of the expressiveness results.

* ``build_cdsa_construction`` / ``run_construction``: a two-stage model (an
  overwrite state-space layer, then sign-bit LSH retrieval) that recalls every
  table entry exactly.
* ``capacity_max_accuracy``: exact-recall ceiling of a machine whose state at
  the end of the information component takes at most ``|U|`` values.
* ``cisa_bound``: the same ceiling applied to ``k`` concatenated states, the
  most a fixed-pattern sparse attention layer can read.

All probabilities are exact ``fractions.Fraction`` values.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import InvalidConfigError, InvalidInputError, ResourceError
from .gssm import (
    GssmSpec,
    OverwriteLayout,
    default_code_dim,
    overwrite_machine,
    run_gssm,
    run_overwrite,
    unit_sphere_codes,
)
from .patterns import expand_codebook, hash_bins
from .task_gen import (
    AssociationTable,
    JointRecallInstance,
    Vocabulary,
    encode_instance,
    make_vocab,
    sample_table,
)

ENUMERATION_LIMIT = 2**20


# --------------------------------------------------------------------------
# CDSA construction


@dataclass
class ConstructionModel:
    vocab: Vocabulary
    layout: OverwriteLayout
    embeddings: np.ndarray  # (vocab.size, layout.size)
    context_codes: list[np.ndarray]
    value_codes: np.ndarray
    H: np.ndarray  # (layout.size, h) sign-bit projection
    attempts: int = 1

    @property
    def h(self) -> int:
        return self.H.shape[1]

    @property
    def n_bins(self) -> int:
        return 2**self.h

    def key_projection(self, states: np.ndarray) -> np.ndarray:
        K = np.array(states, dtype=np.float64, copy=True)
        K[..., self.layout.value_slot] = 0.0
        return K

    def query_projection(self, states: np.ndarray) -> np.ndarray:
        Q = self.key_projection(states)
        Q[..., self.layout.flag] = 1.0
        return Q

    def value_projection(self, states: np.ndarray) -> np.ndarray:
        V = np.array(states, dtype=np.float64, copy=True)
        V[..., : self.layout.w * self.layout.b] = 0.0
        return V

    def machine(self) -> GssmSpec:
        return overwrite_machine(self.layout, lambda t: self.embeddings[int(t)], frozenset(range(self.vocab.size)))


def _candidate_keys(layout: OverwriteLayout, context_codes) -> tuple[np.ndarray, np.ndarray]:
    """Every key-projection vector that can occur in an information component.

    Returns (targets, others): targets are the fully-filled tuples with
    is_v = +1 (one per table entry); others carry is_v = -1 with each context
    slot holding a code or still zero.
    """
    w, b = layout.w, layout.b
    targets = []
    for combo in itertools.product(*[range(len(c)) for c in context_codes]):
        v = layout.empty()
        for lvl, i in enumerate(combo):
            v[layout.slot(lvl)] = context_codes[lvl][i]
        v[layout.flag] = 1.0
        targets.append(v)
    others = []
    for combo in itertools.product(*[range(len(c) + 1) for c in context_codes]):
        v = layout.empty()
        for lvl, i in enumerate(combo):
            if i > 0:
                v[layout.slot(lvl)] = context_codes[lvl][i - 1]
        v[layout.flag] = -1.0
        others.append(v)
    return np.asarray(targets), np.asarray(others)


def default_hash_bits(shape) -> int:
    """Starting projection count: log2 of the number of candidate key vectors, plus slack."""
    n_candidates = math.prod(shape) + math.prod(s + 1 for s in shape)
    return math.ceil(math.log2(n_candidates)) + 2


MAX_HASH_BITS = 62


def build_cdsa_construction(
    shape,
    value_size: int,
    seed: int = 0,
    b: int | None = None,
    h: int | None = None,
    retries: int = 10,
    h_step: int = 2,
) -> ConstructionModel:
    """Codes, embeddings and a collision-free sign-bit projection for ``shape``.

    The projection is accepted only if every full context tuple lands in its
    own bin and no other reachable key vector shares that bin. Each failed
    block of ``retries`` draws widens the hash by ``h_step`` bits; when ``h``
    is given explicitly it is never widened.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape) or value_size < 1:
        raise InvalidConfigError(f"bad construction shape {shape} / value size {value_size}")
    rng = np.random.default_rng(seed)
    vocab = make_vocab(shape, value_size)
    b = default_code_dim(max(max(shape), value_size)) if b is None else b
    layout = OverwriteLayout(len(shape), b)
    context_codes = [unit_sphere_codes(s, b, rng) for s in shape]
    value_codes = unit_sphere_codes(value_size, b, rng)

    emb = np.zeros((vocab.size, layout.size))
    for lvl, codes in enumerate(context_codes):
        for i, c in enumerate(codes):
            emb[vocab.context_id(lvl, i)] = layout.context_embedding(lvl, c)
    for v, c in enumerate(value_codes):
        emb[vocab.value_id(v)] = layout.value_embedding(c)

    fixed = h is not None
    h = default_hash_bits(shape) if h is None else h
    targets, others = _candidate_keys(layout, context_codes)
    attempts = 0
    while h <= MAX_HASH_BITS:
        for _ in range(retries):
            attempts += 1
            H = rng.standard_normal((layout.size, h))
            bt = hash_bins(targets, H, "sign-bit")
            bo = hash_bins(others, H, "sign-bit")
            if len(np.unique(bt)) == len(bt) and not np.isin(bt, bo).any():
                return ConstructionModel(vocab, layout, emb, context_codes, value_codes, H, attempts)
        if fixed:
            break
        h += h_step
    raise ResourceError(f"no collision-free projection after {attempts} draws (h up to {min(h, MAX_HASH_BITS)})")


def construction_states(model: ConstructionModel, tokens) -> np.ndarray:
    return run_overwrite(model.layout, model.embeddings[np.asarray(tokens)])


def run_construction(model: ConstructionModel, instance: JointRecallInstance, stats: dict | None = None) -> np.ndarray:
    """Predicted value token per query; -1 where the query's bin was empty."""
    tokens = np.asarray(instance.tokens)
    if tokens.max() >= model.vocab.size:
        raise InvalidInputError("instance uses tokens outside the construction's vocabulary")
    l = len(tokens)
    states = construction_states(model, tokens)
    bq = hash_bins(model.query_projection(states), model.H, "sign-bit")
    bk = hash_bins(model.key_projection(states), model.H, "sign-bit")
    bk[instance.info_len :] = -1  # only information-component keys are retrievable
    rows = kernels.lsh_rows(bq[None], bk[None], np.array([l], dtype=np.int64), 1)[0]
    values = model.value_projection(states)[:, model.layout.value_slot]

    qpos = instance.query_positions
    hit = rows[qpos, 0]
    scores = values[np.maximum(hit, 0)] @ model.value_codes.T
    preds = model.vocab.value_offset + np.argmax(scores, axis=1)
    preds = np.where(hit >= 0, preds, -1)
    if stats is not None:
        D = model.layout.size
        # projections for queries and keys, one bin search per position,
        # one value-code comparison per query
        stats["work"] = stats.get("work", 0) + 2 * l * D * model.h + l * math.ceil(math.log2(l + 1)) + len(qpos) * model.value_codes.size
        stats["misses"] = stats.get("misses", 0) + int((hit < 0).sum())
    return preds


def construction_accuracy(model: ConstructionModel, instances) -> float:
    accs = [float(np.mean(run_construction(model, inst) == inst.targets)) for inst in instances]
    return float(np.mean(accs))


def random_instances(shape, value_size: int, count: int, seed: int = 0, constant: int | None = None):
    rng = np.random.default_rng(seed)
    vocab = make_vocab(shape, value_size)
    out = []
    for _ in range(count):
        if constant is None:
            table = sample_table(vocab, rng)
        else:
            table = AssociationTable(np.full(tuple(shape), constant, dtype=np.int64))
        out.append(encode_instance(table, vocab, rng=rng))
    return out


def stage2_work_exponent(sizes=(4, 8, 16, 32), value_size: int = 16, seed: int = 0) -> tuple[float, list]:
    """Fit log(work) ~ e * log(n) for square shapes; returns (e, [(n, work)])."""
    points = []
    for s in sizes:
        model = build_cdsa_construction((s, s), value_size, seed=seed)
        inst = random_instances((s, s), value_size, 1, seed=seed)[0]
        stats: dict = {}
        preds = run_construction(model, inst, stats)
        if not np.array_equal(preds, inst.targets):
            raise AssertionError(f"construction failed at shape {(s, s)}")
        points.append((s * s, stats["work"]))
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    return float(np.polyfit(x, y, 1)[0]), points


# --------------------------------------------------------------------------
# capacity ceiling


@dataclass
class CapacityReport:
    state_count: int
    value_size: int
    n: int
    max_accuracy: Fraction
    bound: Fraction
    distinct_states: int = 0
    tables: int = 0

    @property
    def error_bound(self) -> Fraction:
        return 1 - self.bound

    def to_json(self) -> dict:
        return {
            "state_count": self.state_count,
            "value_size": self.value_size,
            "n": self.n,
            "max_accuracy": str(self.max_accuracy),
            "bound": str(self.bound),
            "error_bound": str(self.error_bound),
            "distinct_states": self.distinct_states,
        }


def capacity_bound(state_count: int, value_size: int, n: int) -> Fraction:
    return min(Fraction(1), Fraction(state_count, value_size**n))


def _memorizing_machine(vocab: Vocabulary, n: int, state_count: int, remembered: dict) -> GssmSpec:
    """Finite-state reader that stores up to ``state_count`` whole tables.

    Reading the information component it tracks the values seen so far. At
    the last value it collapses to one of ``state_count`` memory states: each
    of the first ``state_count - 1`` tables gets its own state, everything
    else shares the last one (which guesses table number ``state_count - 1``).
    In the inquiry component it replays the remembered table.
    """
    guesses = {u: t for t, u in remembered.items()}
    catch_all = state_count - 1

    def update(state, tok):
        role, idx = vocab.role_of(tok)
        phase = state[0]
        if phase == "read":
            seen = state[1]
            if role == vocab.value_role:
                seen = seen + (idx,)
                if len(seen) == n:
                    return ("mem", remembered.get(seen, catch_all), 0)
            return ("read", seen)
        # remember which key is being asked (0 = none yet)
        return ("mem", state[1], idx + 1) if role == vocab.w - 1 else state

    def readout(state):
        if state[0] != "mem" or state[2] == 0:
            return None
        table = guesses.get(state[1])
        return None if table is None else vocab.value_id(table[state[2] - 1])

    return GssmSpec(init=("read", ()), update=update, readout=readout)


def capacity_max_accuracy(state_count: int, value_size: int, n: int, limit: int = ENUMERATION_LIMIT) -> CapacityReport:
    """Brute-force the best exact-recall probability of a ``state_count``-state reader.

    Every one of the ``value_size**n`` tables is encoded (single context level,
    identity inquiry order), run through a memorizing finite-state machine
    whose end-of-information state takes at most ``state_count`` values, and
    scored on whole-table recall. The count is exact.
    """
    if state_count < 1 or value_size < 1 or n < 1:
        raise InvalidConfigError("state_count, value_size and n must be >= 1")
    total = value_size**n
    if total > limit:
        raise InvalidConfigError(f"{value_size}**{n} = {total} tables exceeds enumeration limit {limit}")
    vocab = make_vocab([n], value_size)
    tables = list(itertools.product(range(value_size), repeat=n))
    remembered = {t: u for u, t in enumerate(tables[:state_count])}
    machine = _memorizing_machine(vocab, n, state_count, remembered)

    correct = 0
    end_states = set()
    for values in tables:
        inst = encode_instance(AssociationTable(np.array(values, dtype=np.int64)), vocab)
        traj, outputs = run_gssm(machine, [int(t) for t in inst.tokens])
        end_states.add(traj[inst.info_len - 1])
        if all(outputs[p] == target for p, target in inst.queries):
            correct += 1
    if len(end_states) > state_count:
        raise AssertionError("memorizing machine used more states than allowed")
    return CapacityReport(
        state_count=state_count,
        value_size=value_size,
        n=n,
        max_accuracy=Fraction(correct, total),
        bound=capacity_bound(state_count, value_size, n),
        distinct_states=len(end_states),
        tables=total,
    )


def exhaustive_max_accuracy(state_count: int, value_size: int, n: int, limit: int = 200_000) -> Fraction:
    """Search every map from tables to states with the best readout per state.

    Independent check of the ceiling for tiny sizes: the readout of a state can
    be right for at most one table, so accuracy is (#states used)/#tables.
    """
    total = value_size**n
    if state_count**total > limit:
        raise InvalidConfigError("search space too large for exhaustive enumeration")
    best = 0
    for assignment in itertools.product(range(state_count), repeat=total):
        # best readout: each used state names one of its tables
        best = max(best, len(set(assignment)))
    return Fraction(best, total)


def cisa_bound(k: int, state_bits: int, value_size: int, n: int) -> Fraction:
    """Exact-recall ceiling when a query can read ``k`` states of ``state_bits`` bits."""
    if min(k, state_bits, value_size, n) < 1:
        raise InvalidConfigError("all arguments must be >= 1")
    return min(Fraction(1), Fraction(2 ** (k * state_bits), value_size**n))


def exhaustive_multi_read(k: int, state_bits: int, value_size: int, n: int, limit: int = 2_000_000) -> Fraction:
    """Brute force over k independent state encoders read jointly by one query."""
    total = value_size**n
    per = 2**state_bits
    if per ** (k * total) > limit:
        raise InvalidConfigError("search space too large for exhaustive enumeration")
    best = 0
    for enc in itertools.product(range(per), repeat=k * total):
        joint = {tuple(enc[r * total + t] for r in range(k)) for t in range(total)}
        best = max(best, len(joint))
    return Fraction(best, total)


# --------------------------------------------------------------------------
# theory suite (verify-theory)


@dataclass
class CheckResult:
    name: str
    params: dict
    expected: object
    observed: object
    passed: bool
    seconds: float = 0.0

    def to_json(self) -> dict:
        def enc(x):
            return str(x) if isinstance(x, Fraction) else x

        return {
            "name": self.name,
            "params": self.params,
            "expected": enc(self.expected),
            "observed": enc(self.observed),
            "pass": bool(self.passed),
            "seconds": round(self.seconds, 3),
        }


@dataclass
class TheoryReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_json() for c in self.checks]}


def run_theory_suite(max_n: int = 4, instances: int = 200, seed: int = 0) -> TheoryReport:
    report = TheoryReport()

    def record(name, params, expected, fn):
        t0 = time.perf_counter()
        observed = fn()
        report.checks.append(CheckResult(name, params, expected, observed, observed == expected, time.perf_counter() - t0))

    for shape, vs in (((2, 2), 16), ((4, 4), 16), ((2, 2, 2), 8)):
        def acc(shape=shape, vs=vs):
            model = build_cdsa_construction(shape, vs, seed=seed)
            return construction_accuracy(model, random_instances(shape, vs, instances, seed=seed))

        record("construction_exactness", {"shape": list(shape), "value_size": vs, "instances": instances}, 1.0, acc)

    for u in (1, 2, 4, 8, 16):
        for vs in (2, 3):
            for n in range(1, max_n + 1):
                record(
                    "capacity_ceiling",
                    {"states": u, "value_size": vs, "n": n},
                    capacity_bound(u, vs, n),
                    lambda u=u, vs=vs, n=n: capacity_max_accuracy(u, vs, n).max_accuracy,
                )

    for u, vs, n in ((1, 2, 2), (2, 2, 2), (3, 2, 2), (2, 3, 2), (4, 2, 2)):
        record(
            "capacity_exhaustive",
            {"states": u, "value_size": vs, "n": n},
            capacity_bound(u, vs, n),
            lambda u=u, vs=vs, n=n: exhaustive_max_accuracy(u, vs, n),
        )

    for k, bits, vs, n in ((1, 1, 2, 2), (2, 1, 2, 2), (2, 1, 2, 3), (1, 2, 2, 2)):
        record(
            "cisa_bound_corroboration",
            {"k": k, "state_bits": bits, "value_size": vs, "n": n},
            cisa_bound(k, bits, vs, n),
            lambda k=k, bits=bits, vs=vs, n=n: exhaustive_multi_read(k, bits, vs, n),
        )

    def binning():
        rng = np.random.default_rng(seed)
        mismatches = 0
        for _ in range(1000):
            d = int(rng.integers(1, 9))
            h = int(rng.integers(1, 5))
            H = rng.standard_normal((d, h))
            x = rng.standard_normal(d)
            while np.any(x @ H == 0):
                x = rng.standard_normal(d)
            x /= np.linalg.norm(x)
            sign = hash_bins(x[None], H, "sign-bit")[0]
            arg = hash_bins(x[None], expand_codebook(H), "argmax")[0]
            mismatches += int(sign != arg)
        return mismatches

    record("binning_equivalence", {"vectors": 1000}, 0, binning)

    def exponent_ok():
        e, _ = stage2_work_exponent()
        return e < 1.5

    record("stage2_subquadratic", {"n": [16, 64, 256, 1024]}, True, exponent_ok)
    return report
