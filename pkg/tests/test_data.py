import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegalign.alignment import StatAlignLayer, compute_stats, standardize
from eegalign.data import (FormatError, SynthSpec, TrialSet, class_weights, concat_trialsets, decode_eegt,
                           encode_eegt, make_folds_loso_repeated, make_folds_unstratified, oversample_weights,
                           read_eegt, select_channels, subject_chunk_batches, subject_groups, synth_generate,
                           write_eegt)


def small_set(rng, n=6, c=3, t=5, subjects=(0, 0, 1, 1, 2, 2)):
    data = rng.standard_normal((n, c, t)).astype(np.float32).astype(np.float64)
    return TrialSet(data, rng.integers(0, 3, n), list(subjects), dataset_id=2, fs_hz=160.0, n_classes=3)


# -- EEGT ----------------------------------------------------------------------

def test_eegt_hand_packed_bytes():
    buf = (b"EEGT" + struct.pack("<IIIIfII", 1, 2, 1, 2, 250.0, 2, 7)
           + struct.pack("<I", 1) + struct.pack("<H", 2) + "Cz".encode()
           + struct.pack("<2i", 1, 0) + struct.pack("<2i", 5, 6) + struct.pack("<4f", 0.5, -1.0, 2.0, 3.25))
    ts = decode_eegt(buf)
    assert ts.fs_hz == 250.0 and ts.dataset_id == 7 and ts.n_classes == 2
    assert ts.channel_names == ["Cz"]
    np.testing.assert_array_equal(ts.labels, [1, 0])
    np.testing.assert_array_equal(ts.subject_ids, [5, 6])
    np.testing.assert_array_equal(ts.data, [[[0.5, -1.0]], [[2.0, 3.25]]])
    assert encode_eegt(ts) == buf


@given(n=st.integers(0, 6), c=st.integers(1, 4), t=st.integers(1, 9), seed=st.integers(0, 10**6),
       names=st.lists(st.text(min_size=0, max_size=6), min_size=4, max_size=4))
@settings(max_examples=60, deadline=None)
def test_eegt_round_trip_bitwise(n, c, t, seed, names):
    r = np.random.default_rng(seed)
    data = r.standard_normal((n, c, t)).astype(np.float32).astype(np.float64)
    ts = TrialSet(data, r.integers(0, 4, n), r.integers(-3, 50, n), dataset_id=int(r.integers(0, 5)),
                  fs_hz=128.0, channel_names=names[:c], n_classes=4)
    back = decode_eegt(encode_eegt(ts))
    assert encode_eegt(back) == encode_eegt(ts)
    np.testing.assert_array_equal(back.data, ts.data)
    assert back.channel_names == ts.channel_names


def test_eegt_truncation_reports_offset(rng):
    buf = encode_eegt(small_set(rng))
    with pytest.raises(FormatError, match="byte offset"):
        decode_eegt(buf[:-3])
    with pytest.raises(FormatError, match="magic"):
        decode_eegt(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="trailing"):
        decode_eegt(buf + b"\0")


def test_eegt_file_io(tmp_path, rng):
    ts = small_set(rng)
    write_eegt(ts, tmp_path / "x.eegt")
    assert encode_eegt(read_eegt(tmp_path / "x.eegt")) == encode_eegt(ts)


def test_trialset_validation(rng):
    with pytest.raises(ValueError):
        TrialSet(np.zeros((2, 3)), [0, 1], [0, 0])
    with pytest.raises(ValueError):
        TrialSet(np.zeros((2, 1, 3)), [0], [0, 0])
    with pytest.raises(ValueError):
        TrialSet(np.zeros((1, 1, 3)), [5], [0], n_classes=4)


def test_select_channels_and_concat(rng):
    ts = small_set(rng).replace(channel_names=["A", "B", "C"])
    sel = select_channels(ts, ["C", "A"])
    np.testing.assert_array_equal(sel.data, ts.data[:, [2, 0]])
    with pytest.raises(KeyError, match="Q"):
        select_channels(ts, ["A", "Q"])
    both = concat_trialsets([ts, ts])
    assert len(both) == 12


# -- folds ---------------------------------------------------------------------

@given(st.integers(2, 12), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_loso_each_subject_held_out_repeats_times(n, repeats):
    subjects = list(range(100, 100 + n))
    plan = make_folds_loso_repeated(subjects, repeats)
    assert len(plan) == n * repeats
    held = [s for f in plan for s in f.val]
    assert all(held.count(s) == repeats for s in subjects)
    for f in plan:
        assert not set(f.train) & set(f.val)
        assert set(f.train) | set(f.val) == set(subjects)


def test_loso_needs_two_subjects():
    with pytest.raises(ValueError, match="2 subjects"):
        make_folds_loso_repeated([3], 2)


@given(st.integers(10, 300), st.integers(2, 10), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_unstratified_partitions_trials(n, k, seed):
    plan = make_folds_unstratified(n, k, seed)
    vals = [f.val for f in plan]
    assert sorted(i for v in vals for i in v) == list(range(n))
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for f in plan:
        assert sorted(f.train + f.val) == list(range(n))


def test_unstratified_is_seeded():
    assert make_folds_unstratified(50, 10, 3).to_json() == make_folds_unstratified(50, 10, 3).to_json()
    assert make_folds_unstratified(50, 10, 3).to_json() != make_folds_unstratified(50, 10, 4).to_json()


# -- weights -------------------------------------------------------------------

@given(st.integers(0, 5000), st.integers(1, 500))
def test_oversampling_equal_mass(source_n, calib_n):
    w = oversample_weights(source_n, calib_n).weight
    assert len(w) == source_n + calib_n
    if source_n:
        assert w[source_n:].sum() == pytest.approx(w[:source_n].sum(), rel=1e-12)


def test_class_weights_inverse_frequency():
    w = class_weights([10.0, 20.0, 40.0])
    inv = np.array([1 / 10, 1 / 20, 1 / 40])
    np.testing.assert_allclose(w, inv / inv.mean(), rtol=1e-12)
    merged = class_weights([10.0, 10.0, 10.0, 10.0], [[2, 3]])
    np.testing.assert_allclose(merged, np.array([1, 1, 0.5, 0.5]) / 0.75, rtol=1e-12)
    with pytest.raises(ValueError, match="class 1"):
        class_weights([3.0, 0.0])


# -- batching ------------------------------------------------------------------

def _grouped_set(rng, per_subject=(20, 5, 12, 30)):
    subjects = np.concatenate([np.full(n, s) for s, n in enumerate(per_subject)])
    n = len(subjects)
    return TrialSet(rng.standard_normal((n, 2, 4)), rng.integers(0, 4, n), subjects, n_classes=4)


@given(st.integers(1, 5), st.integers(1, 20), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_batch_groups_are_single_subject(spb, tps, seed):
    ts = _grouped_set(np.random.default_rng(seed))
    for batch in subject_chunk_batches(ts, spb, tps, seed=seed, n_batches=4):
        b = batch.boundaries
        assert b[0] == 0 and b[-1] == len(batch.chunk) == spb * tps
        for (lo, hi), subj in zip(zip(b, b[1:]), batch.subjects):
            assert set(ts.subject_ids[batch.indices[lo:hi]]) == {subj}
        np.testing.assert_array_equal(batch.chunk, ts.data[batch.indices])
        np.testing.assert_array_equal(batch.labels, ts.labels[batch.indices])


def test_batches_depend_only_on_seed_and_epoch(rng):
    ts = _grouped_set(rng)
    a = [b.indices for b in subject_chunk_batches(ts, seed=1, epoch=3)]
    b = [b.indices for b in subject_chunk_batches(ts, seed=1, epoch=3)]
    c = [b.indices for b in subject_chunk_batches(ts, seed=1, epoch=4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_oversampled_calibration_drawn_at_equal_rate(rng):
    source = TrialSet(rng.standard_normal((400, 1, 2)), np.zeros(400, int), np.repeat(np.arange(4), 100),
                      n_classes=1)
    calib = TrialSet(rng.standard_normal((20, 1, 2)), np.zeros(20, int), np.full(20, 9), n_classes=1)
    w = oversample_weights(400, 20)
    hits = np.zeros(2)
    for b in subject_chunk_batches([concat_trialsets([source, calib])], 4, 8, weights=w, n_batches=400):
        hits[0] += np.sum(b.indices < 400)
        hits[1] += np.sum(b.indices >= 400)
    assert hits[1] / hits.sum() == pytest.approx(0.5, abs=0.05)


def test_subject_groups_is_stable():
    order, bounds = subject_groups([3, 1, 3, 2, 1])
    np.testing.assert_array_equal(order, [0, 2, 1, 4, 3])
    assert bounds == [0, 2, 4, 5]


# -- synthetic data ------------------------------------------------------------

def test_synth_trial_count_and_balance():
    ts = synth_generate(SynthSpec(n_subjects=6, n_classes=4, trials_per_class=40, n_samples=64), 0)
    assert len(ts) == 960
    for s in ts.subjects():
        assert np.all(np.bincount(ts.labels[ts.subject_ids == s]) == 40)


def test_synth_same_class_correlates_without_noise_or_shift():
    ts = synth_generate(SynthSpec(n_subjects=3, trials_per_class=2, snr=float("inf"), shift=False), 1)
    for y in range(4):
        trials = ts.data[ts.labels == y].reshape(np.sum(ts.labels == y), -1)
        assert np.min(np.corrcoef(trials)) > 0.99


def test_synth_shift_and_alignment_recovery():
    ts = synth_generate(SynthSpec(n_subjects=4, trials_per_class=10, snr=20.0, shift=True), 2)
    means = np.stack([ts.data[ts.subject_ids == s].mean(axis=(0, 2)) for s in ts.subjects()])
    assert np.max(np.abs(means[:, None] - means[None])) > 0.5
    layer = StatAlignLayer(ts.n_channels)
    aligned = {}
    for s in ts.subjects():
        x = ts.data[ts.subject_ids == s]
        z = standardize(x, compute_stats(x), layer).data
        aligned[s] = z[ts.labels[ts.subject_ids == s] == 0].mean(axis=0).ravel()
    corr = np.corrcoef(np.stack(list(aligned.values())))
    assert np.min(corr) > 0.95


def test_synth_deterministic_and_seed_sensitive():
    spec = SynthSpec(n_subjects=2, trials_per_class=3, n_samples=32)
    assert encode_eegt(synth_generate(spec, 5)) == encode_eegt(synth_generate(spec, 5))
    assert encode_eegt(synth_generate(spec, 5)) != encode_eegt(synth_generate(spec, 6))


@pytest.mark.parametrize("bad", [{"n_subjects": 0}, {"n_classes": 1}, {"snr": -1.0}, {"bogus": 3},
                                 {"scale_range": [2.0, 1.0]}, {"band_hz": [4.0, 100.0]}])
def test_synth_spec_rejects_invalid(bad):
    with pytest.raises((ValueError, TypeError)):
        SynthSpec.from_dict(bad)
