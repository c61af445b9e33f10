import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventflow.sequences import (
    EventSequence,
    Normalizer,
    TPPDataset,
    count,
    load_dataset,
    restrict,
    save_dataset,
    split_sequences,
)


def seq(events, T=10.0):
    return EventSequence(np.asarray(events, dtype=float), T)


event_lists = st.lists(st.floats(0.0, 10.0, allow_nan=False), max_size=40).map(
    lambda xs: EventSequence.from_raw(xs, 10.0)
)


def test_count_examples():
    assert count(seq([])) == 0
    assert count(seq([1.0, 2.5, 7.0])) == 3


def test_constructor_rejects_bad_input():
    with pytest.raises(ValueError):
        seq([2.0, 1.0])
    with pytest.raises(ValueError):
        seq([1.0, 1.0])
    with pytest.raises(ValueError):
        seq([-0.1, 1.0])
    with pytest.raises(ValueError):
        seq([11.0])
    with pytest.raises(ValueError):
        EventSequence([], 0.0)


def test_events_are_read_only():
    s = seq([1.0, 2.0])
    with pytest.raises(ValueError):
        s.events[0] = 5.0


def test_from_raw_breaks_ties():
    s = EventSequence.from_raw([3.0, 1.0, 3.0, 3.0], 10.0)
    assert len(s) == 4
    assert np.all(np.diff(s.events) > 0)
    np.testing.assert_allclose(s.events, [1.0, 3.0, 3.0 + 1e-8, 3.0 + 2e-8])


def test_from_raw_ties_at_right_edge_stay_in_support():
    s = EventSequence.from_raw([10.0, 10.0, 10.0], 10.0)
    assert s.events[-1] <= 10.0
    assert np.all(np.diff(s.events) > 0)


@pytest.mark.parametrize("t, expected", [(0.0, -1.0), (100.0, 1.0), (50.0, 0.0)])
def test_normalize_examples(t, expected):
    assert Normalizer(0.0, 100.0).normalize(t) == pytest.approx(expected)


def test_normalizer_rejects_degenerate():
    with pytest.raises(ValueError):
        Normalizer(3.0, 3.0)


def test_normalize_clamps_out_of_range():
    n = Normalizer(0.0, 10.0)
    np.testing.assert_allclose(n.normalize([-5.0, 15.0]), [-1.0, 1.0])
    np.testing.assert_allclose(n.normalize([-5.0, 15.0], clamp=False), [-2.0, 2.0])


def test_normalizer_fit_uses_min_max():
    n = Normalizer.fit([seq([1.0, 4.0]), seq([]), seq([0.5, 9.0])])
    assert (n.t_min, n.t_max) == (0.5, 9.0)


@given(
    lo=st.floats(-1e3, 1e3),
    width=st.floats(1e-3, 1e3),
    u=st.floats(0.0, 1.0),
)
def test_normalize_round_trip(lo, width, u):
    n = Normalizer(lo, lo + width)
    t = lo + u * width
    assert abs(n.denormalize(n.normalize(t)) - t) <= 1e-9 * width


def test_restrict_examples():
    r = restrict(seq([1, 2, 3, 9]), 2, 6)
    np.testing.assert_allclose(r.events, [1.0])
    assert r.support_end == 4.0
    s = seq([1, 2, 3, 9])
    assert restrict(s, 0, 10) == s
    r = restrict(seq([1, 2]), 5, 9)
    assert len(r) == 0 and r.support_end == 4.0


def test_restrict_rejects_bad_window():
    with pytest.raises(ValueError):
        restrict(seq([1.0]), 5, 5)
    with pytest.raises(ValueError):
        restrict(seq([1.0]), 2, 11)


@settings(max_examples=50)
@given(s=event_lists, a=st.floats(0.0, 9.0), w=st.floats(0.01, 1.0))
def test_restrict_idempotent(s, a, w):
    b = a + w * (10.0 - a)
    r = restrict(s, a, b)
    assert restrict(r, 0, b - a) == r


@settings(max_examples=50)
@given(s=event_lists, a=st.floats(0.1, 5.0), b=st.floats(5.1, 9.9))
def test_restrict_counts_partition(s, a, b):
    # windows are half-open (a, b]; an event at exactly 0 belongs to none of them
    if np.any(np.isin(s.events, [0.0, a, b])):
        return
    tail = int(np.sum(s.events > b))
    assert count(restrict(s, a, b)) + count(restrict(s, 0, a)) + tail == count(s)


def test_dataset_requires_shared_support():
    with pytest.raises(ValueError):
        TPPDataset([seq([1.0], 10.0), seq([1.0], 5.0)], 10.0)


def test_split_proportions():
    seqs = [seq([float(i % 9) + 0.5]) for i in range(100)]
    sp = split_sequences(seqs, 10.0, seed=1)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (60, 20, 20)
    ids = {id(s) for part in (sp.train, sp.val, sp.test) for s in part}
    assert len(ids) == 100


def test_dataset_dir_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [EventSequence.from_raw(rng.uniform(0, 10, rng.integers(0, 6)), 10.0) for _ in range(10)]
    sp = split_sequences(seqs, 10.0, seed=3, name="toy")
    save_dataset(sp, tmp_path / "toy")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "meta.json"):
        assert (tmp_path / "toy" / name).exists()
    back = load_dataset(tmp_path / "toy")
    assert back.name == "toy" and back.seed == 3 and back.support_end == 10.0
    for split in ("train", "val", "test"):
        assert list(back[split]) == list(sp[split])
