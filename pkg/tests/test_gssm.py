import numpy as np
import pytest

from jointrecall.errors import InvalidInputError, ResourceError
from jointrecall.gssm import (
    GssmSpec,
    OverwriteLayout,
    default_code_dim,
    overwrite_machine,
    overwrite_update,
    run_gssm,
    run_overwrite,
    unit_sphere_codes,
)


def test_run_gssm_basics():
    ident = GssmSpec(init=7, update=lambda s, t: s, readout=lambda s: s)
    assert run_gssm(ident, []) == ([], [])
    traj, out = run_gssm(ident, [1, 2, 3])
    assert traj == [7, 7, 7] and out == [7, 7, 7]
    counter = GssmSpec(init=10, update=lambda s, t: s + 1, readout=lambda s: s)
    assert run_gssm(counter, "abcde")[0][-1] == 15


def test_run_gssm_vocab_and_states():
    spec = GssmSpec(init=0, update=lambda s, t: (s + t) % 3, readout=lambda s: s, states={0, 1, 2}, vocab=frozenset({1, 2}))
    assert run_gssm(spec, [1, 2, 2])[0] == [1, 0, 2]
    assert run_gssm(spec, [1, 2, 2]) == run_gssm(spec, [1, 2, 2])
    with pytest.raises(InvalidInputError):
        run_gssm(spec, [1, 5])
    bad = GssmSpec(init=0, update=lambda s, t: 9, readout=lambda s: s, states={0, 1})
    with pytest.raises(InvalidInputError):
        run_gssm(bad, [1])


def test_unit_sphere_codes():
    one = unit_sphere_codes(1, 2, np.random.default_rng(0))
    assert one.shape == (1, 2) and np.all(np.abs(one) > 1e-6)
    codes = unit_sphere_codes(16, 8, np.random.default_rng(3))
    assert np.all(np.abs(np.linalg.norm(codes, axis=1) - 1) < 1e-12)
    assert np.all(np.abs(codes) > 1e-6)
    dist = np.linalg.norm(codes[:, None] - codes[None], axis=-1)
    assert dist[~np.eye(16, dtype=bool)].min() > 1e-6
    assert np.array_equal(codes, unit_sphere_codes(16, 8, np.random.default_rng(3)))
    # dim 1 admits only two distinct unit codes
    with pytest.raises(ResourceError):
        unit_sphere_codes(3, 1, np.random.default_rng(0), max_tries=50)


def test_default_code_dim():
    assert default_code_dim(16) == 6
    assert default_code_dim(1) == 3


@pytest.fixture
def layout_codes():
    layout = OverwriteLayout(2, 3)
    codes = unit_sphere_codes(3, 3, np.random.default_rng(0))
    return layout, codes


def test_overwrite_examples(layout_codes):
    layout, (c, k, v) = layout_codes
    s = layout.empty()
    s[layout.slot(0)] = c
    s[layout.flag] = 1.0
    e = layout.empty()
    e[layout.flag] = -1.0
    out = overwrite_update(s, e, layout)
    assert np.array_equal(out[: layout.flag], s[: layout.flag]) and out[layout.flag] == -1
    fresh = overwrite_update(layout.empty(), layout.value_embedding(v), layout)
    assert np.array_equal(fresh, layout.value_embedding(v))
    state = layout.empty()
    for emb in (layout.context_embedding(0, c), layout.context_embedding(1, k), layout.value_embedding(v)):
        state = overwrite_update(state, emb, layout)
    assert np.array_equal(state, np.concatenate([c, k, v, [1.0]]))


def test_overwrite_idempotent_and_local(layout_codes):
    layout, (c, k, v) = layout_codes
    rng = np.random.default_rng(1)
    s = rng.standard_normal(layout.size)
    e = layout.context_embedding(1, k)
    once = overwrite_update(s, e, layout)
    assert np.array_equal(overwrite_update(once, e, layout), once)
    assert np.array_equal(once[layout.slot(0)], s[layout.slot(0)])
    assert np.array_equal(once[layout.value_slot], s[layout.value_slot])


def test_overwrite_layout_errors(layout_codes):
    layout, (c, k, v) = layout_codes
    two = layout.context_embedding(0, c)
    two[layout.slot(1)] = k
    with pytest.raises(InvalidInputError):
        overwrite_update(layout.empty(), two, layout)
    partial = layout.context_embedding(0, c)
    partial[0] = 0.0
    with pytest.raises(InvalidInputError):
        overwrite_update(layout.empty(), partial, layout)
    noflag = layout.context_embedding(0, c)
    noflag[layout.flag] = 0.0
    with pytest.raises(InvalidInputError):
        overwrite_update(layout.empty(), noflag, layout)
    with pytest.raises(InvalidInputError):
        overwrite_update(np.zeros(3), layout.value_embedding(v), layout)


def test_vectorised_run_matches_machine(layout_codes):
    layout, codes = layout_codes
    embs = [layout.context_embedding(0, codes[0]), layout.context_embedding(1, codes[1]), layout.value_embedding(codes[2])]
    rng = np.random.default_rng(2)
    seq = [int(t) for t in rng.integers(0, 3, size=12)]
    machine = overwrite_machine(layout, lambda t: embs[t], vocab=frozenset({0, 1, 2}))
    traj, _ = run_gssm(machine, seq)
    assert np.array_equal(np.asarray(traj), run_overwrite(layout, np.asarray([embs[t] for t in seq])))
