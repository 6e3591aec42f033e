import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgcl import signals as sg
from ecgcl.signals import EcgRecord, Frame, SyntheticConfig


def _frames(n, patients=None):
    patients = patients or ["a"]
    return [Frame(patients[i % len(patients)], "II", i, np.full(4, i, dtype=np.float32), (0,)) for i in range(n)]


@pytest.mark.parametrize("length, leads, expected", [(5000, 1, 2), (2499, 1, 0), (7600, 2, 6)])
def test_segment_record_counts(length, leads, expected):
    record = EcgRecord("p1", 500, {lead: np.arange(length, dtype=np.float32) for lead in sg.LEADS[:leads]})
    frames = sg.segment_record(record, 2500)
    assert len(frames) == expected
    if expected:
        assert sorted({f.segment_index for f in frames}) == list(range(expected // leads))
        np.testing.assert_array_equal(frames[1].samples, np.arange(2500, 5000) if leads == 1 else frames[1].samples)


def test_record_rejects_unequal_lead_lengths():
    with pytest.raises(ValueError, match="equal length"):
        EcgRecord("p1", 500, {"I": np.zeros(10), "II": np.zeros(11)})


def test_frame_rejects_unknown_lead():
    with pytest.raises(ValueError):
        Frame("p", "V7", 0, np.zeros(3))


@pytest.mark.parametrize("x, expected", [([-1, 0, 1], [0, 0.5, 1]), ([0, 2, 8], [0, 0.25, 1])])
def test_normalize_examples(x, expected):
    out = sg.normalize_minmax(Frame("p", "II", 0, x))
    np.testing.assert_allclose(out.samples, expected)


def test_normalize_constant_frame_warns_and_zeroes():
    with pytest.warns(sg.DegenerateFrameWarning):
        out = sg.normalize_minmax(Frame("p", "II", 0, [5, 5, 5]))
    np.testing.assert_array_equal(out.samples, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_normalize_range(values):
    if max(values) - min(values) < 1e-3:
        return
    out = sg.normalize_minmax(Frame("p", "II", 0, values)).samples
    assert out.min() >= 0 and out.max() <= 1
    assert out.max() == pytest.approx(1.0) and out.min() == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("p, sizes", [(10, (6, 2, 2)), (7, (5, 1, 1))])
def test_split_sizes(p, sizes):
    split = sg.split_by_patient([f"p{i}" for i in range(p)], (0.6, 0.2, 0.2), seed=7)
    assert (len(split.train), len(split.val), len(split.test)) == sizes


def test_split_is_deterministic_and_seed_sensitive():
    ids = [f"p{i}" for i in range(30)]
    assert sg.split_by_patient(ids, seed=3) == sg.split_by_patient(ids, seed=3)
    assert sg.split_by_patient(ids, seed=3) != sg.split_by_patient(ids, seed=4)


def test_split_needs_enough_patients():
    with pytest.raises(ValueError):
        sg.split_by_patient(["a", "b"])


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 80), st.integers(0, 2 ** 31))
def test_split_partitions_patients(p, seed):
    ids = [f"p{i}" for i in range(p)]
    split = sg.split_by_patient(ids, seed=seed)
    assert split.train | split.val | split.test == set(ids)
    assert len(split.train) + len(split.val) + len(split.test) == p


def test_subsample_examples():
    frames = _frames(100)
    assert len(sg.subsample_fraction(frames, 0.25, seed=1)) == 25
    assert sg.subsample_fraction(frames, 1.0) == frames
    small = _frames(10)
    a, b = sg.subsample_fraction(small, 0.5, seed=5), sg.subsample_fraction(small, 0.5, seed=5)
    assert len(a) == 5 and [f.segment_index for f in a] == [f.segment_index for f in b]


def test_subsample_by_patient_keeps_whole_patients():
    frames = _frames(40, patients=["a", "b", "c", "d"])
    kept = sg.subsample_fraction(frames, 0.5, seed=0, by_patient=True)
    pats = {f.patient for f in kept}
    assert len(pats) == 2
    assert len(kept) == 20


@pytest.mark.parametrize("F", [0.0, -0.5, 1.01])
def test_subsample_rejects_bad_fraction(F):
    with pytest.raises(ValueError):
        sg.subsample_fraction(_frames(4), F)


def test_frame_file_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).standard_normal(2500).astype(np.float32)
    frame = Frame("p", "V2", 3, x, (1, 3))
    path = tmp_path / "sub" / "f.clf"
    sg.write_frame_file(frame, path)
    back = sg.read_frame_file(path)
    assert back.samples.tobytes() == x.tobytes()
    assert back.labels == frozenset({1, 3})


def test_frame_file_errors():
    data = sg.frame_bytes(Frame("p", "II", 0, np.zeros(2500)))
    with pytest.raises(sg.FrameFormatError, match="magic"):
        sg.parse_frame(b"NOPE" + data[4:])
    with pytest.raises(sg.FrameFormatError):
        sg.parse_frame(data[:-4])  # 2499 payload values
    with pytest.raises(sg.FrameFormatError):
        sg.parse_frame(data[:8])


def test_synthetic_entry_count_and_layout(tmp_path):
    cfg = SyntheticConfig(num_patients=2, frames_per_patient=4, num_leads=2, S=256, num_classes=2)
    manifest, frames = sg.generate_synthetic(cfg, tmp_path)
    assert len(manifest.entries) == 16 == len(frames)
    back = sg.read_manifest(tmp_path)
    assert back.entries == manifest.entries and back.S == 256 and back.num_classes == 2
    loaded = back.load_frames()
    assert all(a.samples.tobytes() == b.samples.tobytes() for a, b in zip(loaded, frames))


def test_synthetic_is_byte_deterministic(tmp_path):
    cfg = SyntheticConfig(num_patients=3, frames_per_patient=2, num_leads=3, S=128, num_classes=3, seed=9)
    sg.generate_synthetic(cfg, tmp_path / "a")
    sg.generate_synthetic(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synthetic_frames_are_normalized_and_classes_balanced():
    cfg = SyntheticConfig(num_patients=8, frames_per_patient=1, num_leads=1, S=128, num_classes=4)
    manifest, frames = sg.generate_synthetic(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert all(f.samples.min() == 0 and f.samples.max() == 1 for f in frames)
    counts = np.bincount([e.labels[0] for e in manifest.entries], minlength=4)
    assert list(counts) == [2, 2, 2, 2]


def test_manifest_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        sg.Manifest([sg.ManifestEntry("x", "p", "II", 0, (5,))], num_classes=4, S=10)
