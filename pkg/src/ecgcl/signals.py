"""ECG data model, on-disk formats, patient-level splits and a synthetic generator."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
DEFAULT_S = 2500
FRAME_MAGIC = b"CLF1"


class DegenerateFrameWarning(UserWarning):
    pass


class FrameFormatError(ValueError):
    pass


def check_lead(lead):
    if lead not in LEADS:
        raise ValueError(f"unknown lead {lead!r}; expected one of {', '.join(LEADS)}")
    return lead


def check_patient(patient):
    if not isinstance(patient, str) or not patient:
        raise ValueError("patient id must be a non-empty string")
    return patient


@dataclass
class EcgRecord:
    patient: str
    sampling_rate: int
    leads: dict
    labels: frozenset = frozenset()

    def __post_init__(self):
        check_patient(self.patient)
        if self.sampling_rate <= 0:
            raise ValueError("sampling_rate must be positive")
        lengths = set()
        for lead, samples in self.leads.items():
            check_lead(lead)
            lengths.add(len(samples))
        if len(lengths) != 1:
            raise ValueError(f"all leads must have equal length, got lengths {sorted(lengths)}")
        if lengths.pop() < 1:
            raise ValueError("record must contain at least one sample")
        self.leads = {k: np.asarray(v, dtype=np.float32) for k, v in self.leads.items()}
        self.labels = frozenset(int(c) for c in self.labels)

    @property
    def length(self):
        return len(next(iter(self.leads.values())))


@dataclass
class Frame:
    patient: str
    lead: str
    segment_index: int
    samples: np.ndarray
    labels: frozenset = frozenset()

    def __post_init__(self):
        check_patient(self.patient)
        check_lead(self.lead)
        if self.segment_index < 0:
            raise ValueError("segment_index must be non-negative")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = frozenset(int(c) for c in self.labels)

    @property
    def S(self):
        return len(self.samples)

    def with_samples(self, samples):
        return Frame(self.patient, self.lead, self.segment_index, samples, self.labels)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    patient: str
    lead: str
    segment_index: int
    labels: tuple

    def to_json(self):
        return {"path": self.path, "patient": self.patient, "lead": self.lead,
                "segment_index": self.segment_index, "labels": list(self.labels)}


@dataclass
class Manifest:
    entries: list
    num_classes: int
    S: int
    normalize: bool = True
    root: str = "."

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for e in self.entries:
            if any(c < 0 or c >= self.num_classes for c in e.labels):
                raise ValueError(f"labels {e.labels} of {e.path} out of range for {self.num_classes} classes")

    @property
    def patients(self):
        return sorted({e.patient for e in self.entries})

    @property
    def multilabel(self):
        return any(len(e.labels) != 1 for e in self.entries)

    def resolve(self, entry):
        return os.path.join(self.root, entry.path)

    def load_frames(self, patients=None):
        keep = None if patients is None else set(patients)
        return [read_frame_file(self.resolve(e), e) for e in self.entries
                if keep is None or e.patient in keep]


@dataclass
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split sets must be pairwise disjoint")


@dataclass
class SyntheticConfig:
    num_patients: int = 40
    frames_per_patient: int = 8
    num_classes: int = 4
    num_leads: int = 4
    S: int = DEFAULT_S
    class_separation: float = 2.0
    patient_signature_strength: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_patients", "frames_per_patient", "num_classes", "num_leads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_leads > len(LEADS):
            raise ValueError(f"num_leads must be <= {len(LEADS)}")
        if self.S < 64:
            raise ValueError("S must be >= 64")


# framing and normalization

def segment_record(record, S=DEFAULT_S):
    """Cut every lead into consecutive non-overlapping frames of ``S`` samples.

    Trailing samples that do not fill a frame are dropped.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    frames = []
    for lead, samples in record.leads.items():
        for t in range(len(samples) // S):
            frames.append(Frame(record.patient, lead, t, samples[t * S:(t + 1) * S], record.labels))
    return frames


def normalize_minmax(frame):
    x = np.asarray(frame.samples, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn(f"constant frame (patient {frame.patient}, lead {frame.lead}, "
                      f"segment {frame.segment_index}) normalized to zeros",
                      DegenerateFrameWarning, stacklevel=2)
        return frame.with_samples(np.zeros_like(x))
    return frame.with_samples((x - lo) / (hi - lo))


# splitting and subsampling

def split_by_patient(manifest, ratios=(0.6, 0.2, 0.2), seed=0):
    """Assign whole patients to train/val/test.

    ``manifest`` may be a :class:`Manifest` or an iterable of patient ids.
    Val and test receive floor(ratio * P) patients (at least one when their
    ratio is non-zero); everything left goes to train.
    """
    patients = manifest.patients if isinstance(manifest, Manifest) else sorted(set(manifest))
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    p = len(patients)
    buckets = sum(1 for r in ratios if r > 0)
    if p < 3 or p < buckets:
        raise ValueError(f"need at least {max(3, buckets)} patients to split, got {p}")
    n_val = math.floor(ratios[1] * p + 1e-9)
    n_test = math.floor(ratios[2] * p + 1e-9)
    if ratios[1] > 0:
        n_val = max(n_val, 1)
    if ratios[2] > 0:
        n_test = max(n_test, 1)
    order = np.random.default_rng(seed).permutation(p)
    shuffled = [patients[i] for i in order]
    val = frozenset(shuffled[:n_val])
    test = frozenset(shuffled[n_val:n_val + n_test])
    train = frozenset(shuffled[n_val + n_test:])
    return SplitAssignment(train, val, test)


def subsample_fraction(train_frames, F, seed=0, by_patient=False):
    """Keep floor(F * n) frames (or patients when ``by_patient``), uniformly
    without replacement; original order is preserved."""
    if not 0.0 < F <= 1.0:
        raise ValueError(f"labelled fraction F must lie in (0, 1], got {F}")
    frames = list(train_frames)
    if F == 1.0:
        return frames
    rng = np.random.default_rng(seed)
    if by_patient:
        patients = sorted({f.patient for f in frames})
        chosen = rng.choice(len(patients), math.floor(F * len(patients)), replace=False)
        keep = {patients[i] for i in chosen}
        return [f for f in frames if f.patient in keep]
    chosen = np.sort(rng.choice(len(frames), math.floor(F * len(frames)), replace=False))
    return [frames[i] for i in chosen]


# frame files

def frame_bytes(frame):
    labels = sorted(frame.labels)
    head = FRAME_MAGIC + struct.pack("<II", frame.S, len(labels))
    head += struct.pack(f"<{len(labels)}I", *labels)
    return head + np.asarray(frame.samples, dtype="<f4").tobytes()


def parse_frame(data, meta=None):
    if len(data) < 12 or data[:4] != FRAME_MAGIC:
        raise FrameFormatError("bad frame magic")
    S, n_labels = struct.unpack("<II", data[4:12])
    off = 12 + 4 * n_labels
    if len(data) < off:
        raise FrameFormatError("truncated label block")
    labels = struct.unpack(f"<{n_labels}I", data[12:off])
    payload = data[off:]
    if len(payload) != 4 * S:
        raise FrameFormatError(f"header declares S={S} but payload holds {len(payload) / 4:g} values")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if meta is None:
        return Frame("unknown", "II", 0, samples, labels)
    return Frame(meta.patient, meta.lead, meta.segment_index, samples, labels)


def write_frame_file(frame, path):
    _atomic_write(path, frame_bytes(frame))


def read_frame_file(path, meta=None):
    """Read a frame file; identity fields come from ``meta`` (a manifest entry)."""
    with open(path, "rb") as fh:
        return parse_frame(fh.read(), meta)


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# manifests

MANIFEST_LINES = "manifest.jsonl"
MANIFEST_HEADER = "manifest.json"


def write_manifest(manifest, directory):
    lines = "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in manifest.entries)
    _atomic_write(os.path.join(directory, MANIFEST_LINES), lines.encode())
    header = {"num_classes": manifest.num_classes, "S": manifest.S, "normalize": manifest.normalize}
    _atomic_write(os.path.join(directory, MANIFEST_HEADER),
                  (json.dumps(header, sort_keys=True) + "\n").encode())


def read_manifest(directory):
    with open(os.path.join(directory, MANIFEST_HEADER)) as fh:
        header = json.load(fh)
    entries = []
    with open(os.path.join(directory, MANIFEST_LINES)) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                entries.append(ManifestEntry(d["path"], check_patient(d["patient"]), check_lead(d["lead"]),
                                             int(d["segment_index"]), tuple(int(c) for c in d["labels"])))
    return Manifest(entries, int(header["num_classes"]), int(header["S"]),
                    bool(header.get("normalize", True)), root=directory)


# synthetic data

def _random_waveform(rng, S, n_components=4, max_cycles=40):
    t = np.arange(S) / S
    cycles = rng.uniform(2, max_cycles, size=n_components)
    phases = rng.uniform(0, 2 * np.pi, size=n_components)
    amps = rng.uniform(0.5, 1.0, size=n_components)
    w = (amps[:, None] * np.sin(2 * np.pi * cycles[:, None] * t + phases[:, None])).sum(axis=0)
    return w / np.sqrt(np.mean(w ** 2))


def generate_synthetic(config, out_dir=None):
    """Build a synthetic multi-lead corpus.

    Each segment of a patient is ``class_separation * class_template +
    patient_signature_strength * patient_signature + N(0, 1)`` on a first
    latent source and a second patient-specific source plus noise; every lead
    is a fixed per-patient positive mixture of the two sources, then
    min-max normalized. Patients carry one class each (balanced, shuffled).

    Returns ``(manifest, frames)``; frame files are written when ``out_dir``
    is given.
    """
    rng = np.random.default_rng(config.seed)
    S = config.S
    leads = LEADS[:config.num_leads] if config.num_leads != 4 else ("II", "V2", "aVL", "aVR")
    templates = [_random_waveform(rng, S) for _ in range(config.num_classes)]
    classes = rng.permutation(np.arange(config.num_patients) % config.num_classes)
    width = len(str(config.num_patients - 1))
    entries, frames = [], []
    for p in range(config.num_patients):
        pid = f"p{p:0{width}d}"
        label = int(classes[p])
        sig_a = _random_waveform(rng, S)
        sig_b = _random_waveform(rng, S)
        mixing = rng.uniform(0.2, 1.0, size=(config.num_leads, 2))
        for t in range(config.frames_per_patient):
            src_a = (config.class_separation * templates[label]
                     + config.patient_signature_strength * sig_a + rng.standard_normal(S))
            src_b = config.patient_signature_strength * sig_b + rng.standard_normal(S)
            for li, lead in enumerate(leads):
                x = mixing[li, 0] * src_a + mixing[li, 1] * src_b
                frame = normalize_minmax(Frame(pid, lead, t, x, (label,)))
                path = f"{pid}/{lead}_{t:04d}.clf"
                entries.append(ManifestEntry(path, pid, lead, t, (label,)))
                frames.append(frame)
    manifest = Manifest(entries, config.num_classes, S, normalize=True, root=out_dir or ".")
    if out_dir is not None:
        for entry, frame in zip(entries, frames):
            write_frame_file(frame, os.path.join(out_dir, entry.path))
        write_manifest(manifest, out_dir)
    return manifest, frames
