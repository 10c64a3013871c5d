"""Property-based checks of the structural invariants."""

from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itas import checkpoint
from itas.data import FeatureSequence, SegmentLabeling, coherence_ramp, decode_features, encode_features
from itas.metrics import confusion_accumulate, edit_score, evaluate_pairs, f1_at, frame_accuracy, match_segments
from itas.numeric import LayerParams, RandomSource, linear_backward, softmax
from itas.replay import allocate_budget
from itas.segmodel import decode_logits, loss_cls, loss_sm

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@st.composite
def labelings(draw, max_segments=8, max_len=6, classes=4):
    n = draw(st.integers(1, max_segments))
    acts = [draw(st.integers(0, classes - 1))]
    for _ in range(n - 1):
        acts.append(draw(st.integers(0, classes - 1).filter(lambda a, prev=acts[-1]: a != prev)))
    lens = draw(st.lists(st.integers(1, max_len), min_size=n, max_size=n))
    segs, t = [], 0
    for a, l in zip(acts, lens):
        segs.append((a, t, l))
        t += l
    return SegmentLabeling(segs)


@st.composite
def labeling_pairs(draw):
    gt = draw(labelings())
    frames = draw(st.lists(st.integers(0, 3), min_size=gt.num_frames, max_size=gt.num_frames))
    return SegmentLabeling.from_framewise(frames), gt


# -- labelings -------------------------------------------------------------


@given(labelings())
def test_segments_framewise_roundtrip(lab):
    assert SegmentLabeling.from_framewise(lab.framewise) == lab
    ends = [s.start for s in lab.segments[1:]] + [lab.num_frames]
    assert all(s.start + s.length == e for s, e in zip(lab.segments, ends))


@given(st.integers(1, 60))
def test_coherence_ramp_progression(length):
    c = coherence_ramp(length)
    assert c[0] == 0.0 and len(c) == length
    if length >= 2:
        assert c[-1] == 1.0 and np.allclose(np.diff(c), 1.0 / (length - 1))


# -- file formats ----------------------------------------------------------


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32)))
def test_fseq_roundtrip(values):
    buf = encode_features(FeatureSequence(values))
    back = decode_features(buf)
    assert np.array_equal(back.values.astype(np.float32), values)
    assert encode_features(back) == buf


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite), st.text(max_size=8))
def test_checkpoint_roundtrip(w, kind):
    kind2, hp, arrs = checkpoint.decode(checkpoint.encode(kind, {"k": [1, 2]}, {"w": w}))
    assert kind2 == kind and hp == {"k": [1, 2]} and np.array_equal(arrs["w"], w)


# -- numeric ----------------------------------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-500, 500)))
def test_softmax_rows_normalised(x):
    assert np.allclose(softmax(x).sum(axis=1), 1.0, atol=1e-6)


@given(st.integers(0, 1000))
def test_backward_accumulates_additively(seed):
    rng = RandomSource(seed)
    x, g = rng.normal((3, 4)), rng.normal((3, 2))
    p, q = LayerParams.dense(4, 2, rng.child("p")), LayerParams.dense(4, 2, rng.child("p"))
    linear_backward(p, x, g)
    linear_backward(p, x, g)
    linear_backward(q, x, 2 * g)
    assert np.allclose(p.grad_weight, q.grad_weight) and np.allclose(p.grad_bias, q.grad_bias)


# -- losses ------------------------------------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 5)), elements=finite), st.integers(0, 10_000))
def test_loss_properties(logits, seed):
    T, A = logits.shape
    y = np.random.default_rng(seed).integers(0, A, T)
    assert loss_cls(logits, y)[0] >= 0
    assert loss_cls(np.zeros((T, A)), y)[0] == np.log(A) or np.isclose(loss_cls(np.zeros((T, A)), y)[0], np.log(A))
    v, _ = loss_sm(logits)
    assert 0 <= v <= 16.0
    shift = np.random.default_rng(seed).normal(0, 20, (T, 1))
    assert np.isclose(loss_sm(logits + shift)[0], v, rtol=1e-7, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4)), elements=st.integers(-2, 2).map(float)))
def test_decoded_predictions_are_valid_labelings(logits):
    lab = decode_logits(logits, list(range(logits.shape[1])))
    assert lab.num_frames == logits.shape[0]
    assert np.all(logits[np.arange(len(logits)), lab.framewise] == logits.max(axis=1))


# -- metrics -----------------------------------------------------------------


@given(labeling_pairs())
def test_f1_monotone_and_counts(pair):
    pred, gt = pair
    f = [f1_at(pred, gt, k)[0] for k in (0.5, 0.25, 0.1)]
    assert f[0] <= f[1] <= f[2]
    for k in (0.1, 0.25, 0.5):
        m = match_segments(pred, gt, k)
        assert m.tp + m.fn == len(gt) and m.tp + m.fp == len(pred)


@given(labeling_pairs(), st.integers(2, 4))
def test_edit_duration_invariant(pair, factor):
    pred, gt = pair

    def stretch(lab):
        segs, t = [], 0
        for s in lab.segments:
            segs.append((s.action, t, s.length * factor))
            t += s.length * factor
        return SegmentLabeling(segs)

    assert edit_score(stretch(pred), gt) == edit_score(pred, gt)


@given(st.lists(labeling_pairs(), min_size=1, max_size=4))
def test_metrics_in_range_and_trace(pairs):
    m = evaluate_pairs(pairs)
    assert all(0.0 <= v <= 100.0 for v in m.values())
    conf = np.zeros((4, 4), dtype=np.int64)
    for p, g in pairs:
        confusion_accumulate(conf, p, g)
        assert 0 <= frame_accuracy(p, g) <= 100
    assert np.isclose(100 * np.trace(conf) / conf.sum(), m.acc)
    gt_counts = np.bincount(np.concatenate([g.framewise for _, g in pairs]), minlength=4)
    assert np.array_equal(conf.sum(axis=1), gt_counts)


@given(labeling_pairs())
def test_metrics_are_pure(pair):
    pred, gt = pair
    assert evaluate_pairs([pair]) == evaluate_pairs([pair])
    assert edit_score(pred, gt) == edit_score(pred, gt)


# -- budget ------------------------------------------------------------------


@settings(max_examples=200)
@given(st.integers(1, 200), st.lists(st.integers(1, 30), min_size=1, max_size=12, unique=True))
def test_budget_allocation(M, tasks):
    if M < len(tasks):
        return
    alloc = allocate_budget(M, tasks)
    assert sum(alloc.values()) == M and set(alloc) == set(tasks)
    counts = [alloc[b] for b in sorted(tasks)]
    assert max(counts) - min(counts) <= 1 and counts == sorted(counts, reverse=True)
