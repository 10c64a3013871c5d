from __future__ import annotations

import struct

import numpy as np
import pytest

from itas.data import (
    FeatureSequence,
    Item,
    LabelSpace,
    Segment,
    SegmentLabeling,
    SynthSpec,
    TaskDataset,
    ceil_count,
    coherence_ramp,
    decode_features,
    encode_features,
    load_dataset_dir,
    load_features,
    load_labels,
    make_synthetic_corpus,
    read_manifest,
    split_blurry,
    write_dataset_dir,
    write_features,
)
from itas.errors import (
    ConfigError,
    ConsistencyError,
    FormatError,
    LabelingError,
    LabelSpaceError,
)
from itas.numeric import RandomSource


# -- labelings -------------------------------------------------------------


def test_run_length_encoding():
    lab = SegmentLabeling.from_framewise([0, 0, 1])
    assert lab.external() == [(0, 1, 2), (1, 3, 1)]


def test_constant_labels_single_segment():
    lab = SegmentLabeling.from_framewise([4] * 9)
    assert lab.external() == [(4, 1, 9)]


def test_timestamp_recursion_enforced():
    with pytest.raises(LabelingError):
        SegmentLabeling([(0, 0, 3), (1, 4, 2)])
    with pytest.raises(LabelingError):
        SegmentLabeling([(0, 1, 3)])


def test_zero_length_and_repeated_action_rejected():
    with pytest.raises(LabelingError):
        SegmentLabeling([(0, 0, 0)])
    with pytest.raises(LabelingError):
        SegmentLabeling([(0, 0, 2), (0, 2, 2)])


def test_framewise_is_read_only():
    lab = SegmentLabeling([Segment(2, 0, 3)])
    with pytest.raises(ValueError):
        lab.framewise[0] = 1


def test_item_length_mismatch():
    with pytest.raises(ConsistencyError):
        Item(FeatureSequence(np.zeros((3, 2))), SegmentLabeling.from_framewise([0, 0]))


def test_feature_sequence_rejects_nan():
    with pytest.raises(FormatError):
        FeatureSequence(np.array([[0.0, np.nan]]))


def test_task_dataset_label_containment():
    item = Item(FeatureSequence(np.zeros((2, 1))), SegmentLabeling.from_framewise([0, 5]))
    with pytest.raises(LabelingError):
        TaskDataset(1, {0, 1}, [item], [])


# -- FSEQ1 -----------------------------------------------------------------


def test_fseq_hand_built_file(tmp_path):
    vals = [0.5, -1.0, 2.0, 3.25, 0.0, 7.0]
    buf = b"FSQ1" + struct.pack("<II", 2, 3) + struct.pack("<6f", *vals)
    path = tmp_path / "x.fseq"
    path.write_bytes(buf)
    seq = load_features(path)
    assert seq.values.shape == (2, 3)
    assert np.array_equal(seq.values.ravel(), vals)
    write_features(tmp_path / "y.fseq", seq)
    assert (tmp_path / "y.fseq").read_bytes() == buf


def test_fseq_roundtrip_bytes():
    seq = FeatureSequence(RandomSource(0).normal((7, 4)).astype(np.float32))
    buf = encode_features(seq)
    assert encode_features(decode_features(buf)) == buf


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda b: b"FSQ2" + b[4:], "magic"),
        (lambda b: b[:6], "header"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + struct.pack("<II", 0, 3) + b[12:], "shape"),
        (lambda b: b[:12] + struct.pack("<f", float("nan")) + b[16:], "non-finite"),
    ],
)
def test_fseq_corruption(mutate, needle):
    buf = encode_features(FeatureSequence(np.ones((2, 3))))
    with pytest.raises(FormatError, match=needle):
        decode_features(mutate(buf), "f")


# -- label spaces, label and manifest files --------------------------------


def test_disjoint_space_must_be_injective():
    with pytest.raises(LabelSpaceError):
        LabelSpace("disjoint", {(1, "a"): 0, (2, "b"): 0})
    with pytest.raises(ConfigError):
        LabelSpace("overlapping", {})


def test_mapping_qualified_and_bare():
    lines = ["0 1:pour", "1 2:pour", "2 stir"]
    space = LabelSpace.from_mapping(lines, {1: {"pour", "stir"}, 2: {"pour"}}, "disjoint")
    assert space.lookup(1, "pour") == 0 and space.lookup(2, "pour") == 1 and space.lookup(1, "stir") == 2
    with pytest.raises(LabelingError):
        LabelSpace.from_mapping(lines, {1: {"whisk"}}, "disjoint")
    with pytest.raises(FormatError):
        LabelSpace.from_mapping(["zero pour"], {}, "disjoint")


def test_mapping_lines_roundtrip():
    space = LabelSpace("disjoint", {(1, "a"): 0, (1, "b"): 1, (2, "a"): 2})
    back = LabelSpace.from_mapping(space.mapping_lines(), {1: {"a", "b"}, 2: {"a"}}, "disjoint")
    assert back.table == space.table


def test_load_labels_errors_name_file_and_line(tmp_path):
    space = LabelSpace("blurry", {(1, "a"): 0, (1, "b"): 1})
    path = tmp_path / "l.txt"
    path.write_text("a\na\nb\n")
    assert load_labels(path, space, 1).external() == [(0, 1, 2), (1, 3, 1)]
    with pytest.raises(ConsistencyError):
        load_labels(path, space, 1, num_frames=4)
    path.write_text("a\nb c\n")
    with pytest.raises(FormatError, match=r"l\.txt:2"):
        load_labels(path, space, 1)
    path.write_text("a\nz\n")
    with pytest.raises(LabelingError):
        load_labels(path, space, 1)


def test_manifest_format_errors(tmp_path):
    m = tmp_path / "m.txt"
    m.write_text("task 1: f.fseq l.txt\n# comment\n\ntask 2: /abs/f.fseq l2.txt\n")
    entries = read_manifest(m)
    assert entries[0] == (1, tmp_path / "f.fseq", tmp_path / "l.txt")
    assert str(entries[1][1]) == "/abs/f.fseq"
    m.write_text("task one: f l\n")
    with pytest.raises(FormatError, match=":1"):
        read_manifest(m)


def test_dataset_dir_roundtrip(tmp_path):
    spec = SynthSpec(tasks=2, actions_per_task=3, videos_per_task=5, dim=4)
    ds, space, _ = make_synthetic_corpus(spec, RandomSource(0))
    write_dataset_dir(tmp_path, ds, space)
    back, space2 = load_dataset_dir(tmp_path)
    assert space2.table == space.table
    for a, b in zip(ds, back):
        assert a.task == b.task and a.classes == b.classes
        for x, y in zip(a.train + a.test, b.train + b.test):
            assert x.labels == y.labels
            # features pass through float32 storage
            assert np.allclose(x.features.values, y.features.values, atol=1e-5)


def test_dataset_dir_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_dataset_dir(tmp_path)


# -- synthetic corpus ------------------------------------------------------


def test_synthetic_degenerate_frames_equal_base():
    spec = SynthSpec(tasks=2, videos_per_task=4, noise=0.0, drift=0.0)
    ds, space, protos = make_synthetic_corpus(spec, RandomSource(1))
    for d in ds:
        for it in d.train + d.test:
            for s in it.labels.segments:
                base = protos[d.names[s.action]].base
                assert np.array_equal(it.features.values[s.start : s.end], np.tile(base, (s.length, 1)))


def test_synthetic_segments_collinear_along_drift():
    spec = SynthSpec(tasks=2, videos_per_task=4, noise=0.0, drift=1.5, context=0.7)
    ds, _, protos = make_synthetic_corpus(spec, RandomSource(2))
    for d in ds:
        for it in d.train:
            for s in it.labels.segments:
                if s.length < 3:
                    continue
                steps = np.diff(it.features.values[s.start : s.end], axis=0)
                drift = protos[d.names[s.action]].drift
                cos = steps @ drift / (np.linalg.norm(steps, axis=1) * np.linalg.norm(drift))
                assert np.allclose(cos, 1.0)


def test_synthetic_determinism_and_shape():
    spec = SynthSpec(tasks=3, actions_per_task=4, videos_per_task=10)
    a, sa, _ = make_synthetic_corpus(spec, RandomSource(9))
    b, sb, _ = make_synthetic_corpus(spec, RandomSource(9))
    assert sa.table == sb.table and sa.num_classes == 12
    for x, y in zip(a, b):
        assert len(x.train) == 8 and len(x.test) == 2
        for i, j in zip(x.train + x.test, y.train + y.test):
            assert np.array_equal(i.features.values, j.features.values) and i.labels == j.labels
    # disjoint label sets
    assert not (a[0].classes & a[1].classes)


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        make_synthetic_corpus(SynthSpec(seg_min=5, seg_max=2), RandomSource(0))
    with pytest.raises(ConfigError):
        make_synthetic_corpus(SynthSpec(shared_fraction=1.5), RandomSource(0))


def test_coherence_ramp():
    assert np.array_equal(coherence_ramp(1), [0.0])
    assert np.allclose(coherence_ramp(5), [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(LabelingError):
        coherence_ramp(0)


def test_ceil_count():
    assert ceil_count(0.25, 20) == 5 and ceil_count(0.25, 21) == 6 and ceil_count(0.01, 3) == 1


# -- blurry split ----------------------------------------------------------


def test_blurry_without_shared_names_matches_disjoint():
    ds, space, _ = make_synthetic_corpus(SynthSpec(tasks=3, videos_per_task=3), RandomSource(0))
    bl, bspace = split_blurry(ds)
    assert bspace.num_classes == space.num_classes
    for a, b in zip(ds, bl):
        assert a.classes == b.classes
        assert all(x.labels == y.labels for x, y in zip(a.train, b.train))


def test_blurry_shared_name_gets_one_id():
    feats = FeatureSequence(np.zeros((2, 1)))
    t1 = TaskDataset(1, {0, 1}, [Item(feats, SegmentLabeling.from_framewise([0, 1]))], [], {0: "take_plate", 1: "crack_egg"})
    t2 = TaskDataset(2, {2, 3}, [Item(feats, SegmentLabeling.from_framewise([2, 3]))], [], {2: "take_plate", 3: "cut_bun"})
    bl, space = split_blurry([t1, t2])
    shared = space.lookup(1, "take_plate")
    assert space.lookup(2, "take_plate") == shared
    assert shared in bl[0].classes and shared in bl[1].classes
    assert space.num_classes == 3 < 4
    assert bl[1].train[0].labels.actions[0] == shared


def test_blurry_never_grows_label_space():
    spec = SynthSpec(tasks=4, actions_per_task=4, videos_per_task=3, shared_fraction=0.5)
    ds, space, _ = make_synthetic_corpus(spec, RandomSource(3))
    _, bspace = split_blurry(ds)
    assert bspace.num_classes <= space.num_classes
    assert bspace.num_classes < space.num_classes  # some shared actions were drawn
