import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fssl_backdoor.data import (
    Dataset,
    GlobalTrigger,
    TriggerPattern,
    augment,
    build_inspection_set,
    embed_trigger,
    load_raw,
    partition,
    poison_dataset_labels_free,
    poison_with_indices,
    quad_trigger,
    save_raw,
    split_probe,
    square_trigger,
    synthesize_dataset,
    trigger_from_config,
)
from fssl_backdoor.errors import DataError


def test_synthesis_deterministic():
    a = synthesize_dataset(2, 1, 0)
    b = synthesize_dataset(2, 1, 0)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_zero_jitter_gives_identical_class_members():
    ds = synthesize_dataset(3, 5, 1, noise=0, shift=0, brightness=0)
    for c in range(3):
        imgs = ds.images[ds.labels == c]
        assert np.all(imgs == imgs[0])


def test_synthetic_classes_are_separable_by_raw_pixel_1nn():
    train = synthesize_dataset(4, 100, 7)
    test = synthesize_dataset(4, 25, 8, proto_seed=7)
    bank = train.images.reshape(len(train), -1).tolist()
    pred = oracles.nearest_neighbor_labels(bank, train.labels.tolist(), test.images.reshape(len(test), -1).tolist())
    assert np.mean(np.array(pred) == test.labels) >= 0.9


def test_pixels_in_unit_interval():
    ds = synthesize_dataset(4, 20, 3, noise=0.5)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.full((1, 2, 2, 1), 2.0))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2, 2, 1)), np.zeros(3))
    with pytest.raises(DataError):
        synthesize_dataset(1, 5, 0)


# --- partition ---------------------------------------------------------------


def test_iid_single_client_takes_everything():
    ds = synthesize_dataset(2, 10, 0)
    part = partition(ds, 1, len(ds), "iid", seed=0)
    assert sorted(part.assignments[0].tolist()) == list(range(len(ds)))


@pytest.mark.parametrize("balanced", [False, True])
def test_noniid_label_sets_bounded(balanced):
    ds = synthesize_dataset(4, 100, 0)
    part = partition(ds, 10, 40, "noniid", 2, seed=3, balanced=balanced)
    for idx in part.assignments.values():
        assert len(idx) == 40
        assert len(set(ds.labels[idx].tolist())) <= 2


def test_balanced_partition_spreads_class_sets():
    ds = synthesize_dataset(4, 100, 0)
    part = partition(ds, 10, 20, "noniid", 2, seed=5, balanced=True)
    sets = [tuple(sorted(set(ds.labels[i].tolist()))) for i in part.assignments.values()]
    counts = {s: sets.count(s) for s in sets}
    # 6 possible pairs dealt to 10 clients: nobody repeats more than twice
    assert max(counts.values()) <= 2 and len(counts) == 6


def test_partition_deterministic_and_required_classes():
    ds = synthesize_dataset(4, 50, 0)
    a = partition(ds, 5, 20, "noniid", 2, seed=1, required_classes={0: 3, 1: 3})
    b = partition(ds, 5, 20, "noniid", 2, seed=1, required_classes={0: 3, 1: 3})
    for c in range(5):
        np.testing.assert_array_equal(a.assignments[c], b.assignments[c])
    assert 3 in set(ds.labels[a.assignments[0]].tolist())
    assert 3 in set(ds.labels[a.assignments[1]].tolist())


def test_disjoint_iid_partition():
    ds = synthesize_dataset(2, 50, 0)
    part = partition(ds, 4, 25, "iid", seed=0, disjoint=True)
    allidx = np.concatenate(list(part.assignments.values()))
    assert len(np.unique(allidx)) == 100
    with pytest.raises(DataError):
        partition(ds, 5, 25, "iid", seed=0, disjoint=True)


def test_noniid_needs_labels():
    with pytest.raises(DataError):
        partition(Dataset(np.zeros((4, 2, 2, 1))), 2, 2, "noniid")


def test_probe_split_is_stratified_and_disjoint():
    ds = synthesize_dataset(4, 50, 0)
    pool, probe = split_probe(ds, 0.2, 0)
    assert not set(pool) & set(probe)
    assert len(pool) + len(probe) == len(ds)
    for c in range(4):
        assert np.sum(ds.labels[probe] == c) == 10


# --- triggers ----------------------------------------------------------------


def test_embed_trigger_bottom_right_block():
    img = np.zeros((4, 4, 1))
    out = embed_trigger(img, TriggerPattern(np.ones((2, 2, 1)), (2, 2)))
    expected = np.zeros((4, 4, 1))
    expected[2:, 2:] = 1
    np.testing.assert_array_equal(out, expected)
    assert np.all(img == 0)


def test_empty_global_trigger_is_identity():
    img = np.random.default_rng(0).random((5, 5, 1))
    np.testing.assert_array_equal(embed_trigger(img, GlobalTrigger(())), img)


def test_global_trigger_equals_sequential_locals():
    g = quad_trigger(2, 16)
    img = np.random.default_rng(1).random((16, 16, 1))
    seq = img
    for t in g.locals:
        seq = embed_trigger(seq, t)
    np.testing.assert_array_equal(embed_trigger(img, g), seq)


@given(st.integers(0, 13), st.integers(0, 13), st.integers(1, 3))
def test_embed_trigger_idempotent(r, c, k):
    t = TriggerPattern(np.full((k, k, 1), 0.7), (min(r, 16 - k), min(c, 16 - k)))
    img = np.random.default_rng(r * 31 + c).random((2, 16, 16, 1))
    once = embed_trigger(img, t)
    np.testing.assert_array_equal(embed_trigger(once, t), once)


def test_trigger_out_of_bounds_and_overlap():
    with pytest.raises(DataError):
        embed_trigger(np.zeros((4, 4, 1)), TriggerPattern(np.ones((2, 2, 1)), (3, 3)))
    t = TriggerPattern(np.ones((2, 2, 1)), (0, 0))
    with pytest.raises(DataError):
        GlobalTrigger((t, TriggerPattern(np.ones((2, 2, 1)), (1, 1))))


def test_trigger_from_config_kinds():
    sq = trigger_from_config({"kind": "square", "size": 4}, 16, 1)
    assert sq.footprint() == {(r, c) for r in range(12, 16) for c in range(12, 16)}
    halves = trigger_from_config({"kind": "patches", "patches": [
        {"anchor": [12, 12], "height": 4, "width": 2}, {"anchor": [12, 14], "height": 4, "width": 2}]}, 16, 1)
    assert halves.footprint() == sq.footprint()
    assert len(trigger_from_config({"kind": "quad"}, 16, 1).locals) == 4
    with pytest.raises(DataError):
        trigger_from_config({"kind": "star"}, 16, 1)


# --- poisoning ---------------------------------------------------------------


def test_poison_all_target_images():
    ds = synthesize_dataset(3, 10, 0)
    trig = square_trigger(3, 16)
    out = poison_dataset_labels_free(ds, 1, trig, 1.0, 0)
    tgt = ds.labels == 1
    assert np.all(out.images[tgt][:, 13:, 13:] == 1.0)
    assert out.images[~tgt].tobytes() == ds.images[~tgt].tobytes()
    np.testing.assert_array_equal(out.labels, ds.labels)


def test_poison_fraction_deterministic():
    ds = synthesize_dataset(3, 10, 0)
    trig = square_trigger(3, 16)
    _, a = poison_with_indices(ds, 2, trig, 0.5, 4)
    _, b = poison_with_indices(ds, 2, trig, 0.5, 4)
    np.testing.assert_array_equal(a, b)
    assert len(a) == 5


def test_poison_missing_target_class():
    ds = synthesize_dataset(2, 3, 0)
    with pytest.raises(DataError):
        poison_dataset_labels_free(ds, 5, square_trigger(), 1.0, 0)


# --- inspection sets ---------------------------------------------------------


def test_inspection_sets():
    pool = synthesize_dataset(4, 50, 0)
    a = build_inspection_set("in-distribution", 10, 3, pool=pool)
    b = build_inspection_set("in-distribution", 10, 3, pool=pool)
    assert a.items.tobytes() == b.items.tobytes()
    rv = build_inspection_set("random-vectors", 7, 0, image_shape=(16, 16, 1))
    assert rv.items.shape == (7, 16, 16, 1) and rv.items.min() >= 0 and rv.items.max() <= 1
    ood = build_inspection_set("out-of-distribution", 12, 0, image_shape=(16, 16, 1))
    assert len(ood) == 12
    ins = build_inspection_set("in-distribution", 100, 0, pool=pool)
    assert len(ins) == 100 and not hasattr(ins, "labels")
    with pytest.raises(DataError):
        build_inspection_set("in-distribution", 0, 0, pool=pool)


def test_augment_keeps_range_and_shape():
    x = synthesize_dataset(2, 4, 0).images
    y = augment(x, np.random.default_rng(0))
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


def test_raw_roundtrip(tmp_path):
    ds = synthesize_dataset(2, 3, 0)
    save_raw(tmp_path / "d.bin", ds)
    back = load_raw(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12
