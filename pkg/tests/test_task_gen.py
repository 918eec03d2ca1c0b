import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointrecall.errors import InvalidConfigError, InvalidInputError
from jointrecall.task_gen import (
    AssociationTable,
    DatasetConfig,
    decode_table,
    encode_instance,
    file_checksum,
    generate_dataset,
    iter_instances,
    load_dataset,
    make_vocab,
    manifest_path,
    mean_accuracy,
    reference_answers,
    sample_table,
    score_predictions,
    sequence_length,
)


def test_vocab_ranges():
    v = make_vocab([2, 2], 2)
    assert v.size == 6
    assert [v.context_id(0, i) for i in range(2)] == [0, 1]
    assert [v.context_id(1, i) for i in range(2)] == [2, 3]
    assert [v.value_id(i) for i in range(2)] == [4, 5]
    assert make_vocab([1], 1).size == 2
    assert make_vocab([5, 16], 16).size == 37


def test_vocab_roles_roundtrip():
    v = make_vocab([3, 4, 2], 5)
    seen = set()
    for t in range(v.size):
        role, idx = v.role_of(t)
        ident = v.value_id(idx) if role == v.w else v.context_id(role, idx)
        assert ident == t
        seen.add((role, idx))
    assert len(seen) == v.size
    assert list(v.role_array(range(v.size))) == [v.role_of(t)[0] for t in range(v.size)]


def test_vocab_rejects_zero():
    with pytest.raises(InvalidConfigError):
        make_vocab([2, 0], 3)
    with pytest.raises(InvalidConfigError):
        make_vocab([2], 0)
    with pytest.raises(InvalidInputError):
        make_vocab([2], 2).role_of(9)


def test_sample_table_basics():
    v = make_vocab([1], 1)
    assert sample_table(v, np.random.default_rng(0)).values.tolist() == [0]
    v = make_vocab([2, 2], 16)
    a = sample_table(v, np.random.default_rng(5))
    b = sample_table(v, np.random.default_rng(5))
    assert a == b and a.n == 4


def test_sample_table_uniform():
    v = make_vocab([100000], 4)
    t = sample_table(v, np.random.default_rng(1))
    freq = np.bincount(t.values, minlength=4) / t.n
    assert np.all(np.abs(freq - 0.25) < 0.02)


def _figure_instance():
    v = make_vocab([2, 2], 2)
    table = AssociationTable(np.array([[0, 1], [1, 0]]))
    return v, encode_instance(table, v)


def test_encode_matches_figure_layout():
    v, inst = _figure_instance()
    names = {0: "A", 1: "B", 2: "a", 3: "b", 4: "0", 5: "1"}
    text = " ".join(names[int(t)] for t in inst.tokens[: inst.info_len])
    text += " | " + " ".join(names[int(t)] for t in inst.tokens[inst.info_len :])
    assert text == "A a 0 b 1 B a 1 b 0 | A a b B a b"
    assert [names[t] for t in inst.targets] == ["0", "1", "1", "0"]
    assert all(names[int(inst.tokens[p])] in "ab" for p in inst.query_positions)


def test_encode_associative_recall():
    v = make_vocab([2], 2)
    inst = encode_instance(AssociationTable(np.array([0, 1])), v)
    assert inst.tokens.tolist() == [0, 2, 1, 3, 0, 1]
    assert inst.targets.tolist() == [2, 3]


def test_encode_rejects_bad_permutation():
    v = make_vocab([2, 2], 2)
    table = AssociationTable(np.zeros((2, 2), dtype=np.int64))
    with pytest.raises(InvalidConfigError):
        encode_instance(table, v, permutation=[[0, 1]])
    with pytest.raises(InvalidConfigError):
        encode_instance(table, v, permutation=[[0, 0], [0, 1]])


def _independent_length(shape):
    # blocks at every level, plus one value per entry; inquiry drops the values
    blocks = sum(int(np.prod(shape[: i + 1])) for i in range(len(shape)))
    n = int(np.prod(shape))
    return blocks + n, 2 * blocks + n


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 2), (5, 3), (2, 3, 4), (2, 2, 2, 2)])
def test_sequence_length_formula(shape):
    v = make_vocab(shape, 3)
    rng = np.random.default_rng(0)
    inst = encode_instance(sample_table(v, rng), v, rng=rng)
    m, total = _independent_length(shape)
    assert inst.info_len == m and len(inst.tokens) == total
    assert sequence_length(shape) == (m, total)


@settings(max_examples=60, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    value_size=st.integers(1, 6),
    seed=st.integers(0, 2**31),
)
def test_instance_invariants(shape, value_size, seed):
    v = make_vocab(shape, value_size)
    rng = np.random.default_rng(seed)
    table = sample_table(v, rng)
    inst = encode_instance(table, v, rng=rng)
    assert decode_table(inst.tokens[: inst.info_len], v) == table
    assert len(inst.queries) == table.n
    assert all(p >= inst.info_len for p in inst.query_positions)
    assert reference_answers(inst.tokens, inst.info_len, v) == [(int(p), int(t)) for p, t in inst.queries]
    for p in inst.query_positions:
        assert v.role_of(inst.tokens[p])[0] == v.w - 1


def test_roundtrip_1000_tables():
    rng = np.random.default_rng(3)
    for i in range(1000):
        w = 1 + i % 3
        shape = tuple(int(s) for s in rng.integers(1, 4, size=w))
        v = make_vocab(shape, 5)
        table = sample_table(v, rng)
        inst = encode_instance(table, v, rng=rng)
        assert decode_table(inst.tokens[: inst.info_len], v) == table


def _answer_set(inst, v):
    ctx = []
    cur = [None] * v.w
    for p in range(inst.info_len, len(inst.tokens)):
        role, idx = v.role_of(inst.tokens[p])
        cur[role] = idx
        if role == v.w - 1:
            ctx.append(tuple(cur))
    return sorted(zip(ctx, inst.targets.tolist()))


def test_answer_set_independent_of_permutation():
    v = make_vocab([3, 2, 2], 4)
    rng = np.random.default_rng(0)
    table = sample_table(v, rng)
    base = _answer_set(encode_instance(table, v), v)
    for perm in itertools.islice(itertools.product(itertools.permutations(range(3)), [[1, 0]], [[0, 1], [1, 0]]), 8):
        inst = encode_instance(table, v, permutation=[list(p) for p in perm])
        assert _answer_set(inst, v) == base


def test_score_predictions():
    _, inst = _figure_instance()
    t = inst.targets
    assert score_predictions(t, inst) == 1.0
    wrong = np.where(t == 4, 5, 4)
    assert score_predictions(wrong, inst) == 0.0
    three = t.copy()
    three[0] = wrong[0]
    assert score_predictions(three, inst) == 0.75
    with pytest.raises(InvalidInputError):
        score_predictions(t[:3], inst)
    assert mean_accuracy([1.0, 0.5]) == 0.75


def test_generate_dataset_deterministic(tmp_path):
    cfg = DatasetConfig(count=10, seed=7)
    a = generate_dataset(cfg, tmp_path / "a.jsonl")
    b = generate_dataset(cfg, tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads(manifest_path(a).read_text())
    assert manifest["count"] == 10 and manifest["checksum"] == file_checksum(a)
    ds = load_dataset(a)
    assert len(ds) == 10
    first = json.loads(a.read_text().splitlines()[0])
    assert set(first) == {"tokens", "info_len", "queries", "shape", "perm"}
    assert ds[0].tokens.tolist() == first["tokens"]


def test_generate_dataset_shards_differ(tmp_path):
    cfg = DatasetConfig(count=5, seed=1)
    a = generate_dataset(cfg, tmp_path / "a.jsonl", shard=0)
    b = generate_dataset(cfg, tmp_path / "b.jsonl", shard=1)
    assert a.read_bytes() != b.read_bytes()


def test_generate_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(DatasetConfig(count=1), blocker / "sub" / "d.jsonl")


def test_level_size_coverage():
    cfg = DatasetConfig(w=2, low=5, high=16, value_size=2, count=10_000, seed=0)
    seen = set()
    rng_shapes = (inst.shape for inst in iter_instances(cfg))
    for shape in rng_shapes:
        seen.update(shape)
    assert seen == set(range(5, 17))


def test_fixed_shape_queries():
    cfg = DatasetConfig(w=2, low=2, high=2, value_size=16, count=50, seed=0)
    assert all(len(inst.queries) == 4 for inst in iter_instances(cfg))


def test_dataset_config_validation():
    with pytest.raises(InvalidConfigError):
        DatasetConfig(low=0)
    with pytest.raises(InvalidConfigError):
        DatasetConfig(low=3, high=2)
    with pytest.raises(InvalidConfigError):
        DatasetConfig(count=0)
