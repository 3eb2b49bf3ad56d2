"""Trial containers, the EEGT file format, fold plans, sampling and synthetic data."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

EEGT_MAGIC = b"EEGT"
EEGT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


@dataclass
class TrialSet:
    data: np.ndarray  # [N, C, T]
    labels: np.ndarray
    subject_ids: np.ndarray
    dataset_id: int = 0
    fs_hz: float = 160.0
    channel_names: list[str] = field(default_factory=list)
    n_classes: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"trial data must be [N, C, T], got shape {self.data.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64).reshape(-1)
        n = self.data.shape[0]
        if len(self.labels) != n or len(self.subject_ids) != n:
            raise ValueError(f"{n} trials but {len(self.labels)} labels and {len(self.subject_ids)} subject ids")
        if self.fs_hz <= 0:
            raise ValueError(f"fs_hz must be positive, got {self.fs_hz}")
        if not self.channel_names:
            self.channel_names = [f"Ch{i + 1:02d}" for i in range(self.data.shape[1])]
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError(f"{len(self.channel_names)} channel names for {self.data.shape[1]} channels")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def subjects(self) -> list[int]:
        """Distinct subject ids in order of first appearance."""
        _, first = np.unique(self.subject_ids, return_index=True)
        return [int(self.subject_ids[i]) for i in sorted(first)]

    def replace(self, **changes) -> "TrialSet":
        return dataclasses.replace(self, **changes)

    def subset(self, indices) -> "TrialSet":
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(data=self.data[idx], labels=self.labels[idx], subject_ids=self.subject_ids[idx])

    def of_subjects(self, subjects) -> "TrialSet":
        return self.subset(np.flatnonzero(np.isin(self.subject_ids, list(subjects))))


def concat_trialsets(sets: Sequence[TrialSet]) -> TrialSet:
    first = sets[0]
    for s in sets[1:]:
        if s.data.shape[1:] != first.data.shape[1:] or s.dataset_id != first.dataset_id:
            raise ValueError("can only concatenate trial sets of one dataset with equal shapes")
    return first.replace(
        data=np.concatenate([s.data for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        subject_ids=np.concatenate([s.subject_ids for s in sets]),
        n_classes=max(s.n_classes for s in sets),
    )


def select_channels(trials: TrialSet, names: Sequence[str]) -> TrialSet:
    """Keep ``names`` in the given order."""
    lookup = {n: i for i, n in enumerate(trials.channel_names)}
    missing = [n for n in names if n not in lookup]
    if missing:
        raise KeyError(f"channel not in montage: {missing[0]}")
    idx = [lookup[n] for n in names]
    return trials.replace(data=trials.data[:, idx, :], channel_names=list(names))


# -- EEGT container ----------------------------------------------------------

def encode_eegt(trials: TrialSet) -> bytes:
    n, c, t = trials.data.shape
    parts = [EEGT_MAGIC, struct.pack("<IIIIfII", EEGT_VERSION, n, c, t, trials.fs_hz,
                                      trials.n_classes, trials.dataset_id)]
    parts.append(struct.pack("<I", len(trials.channel_names)))
    for name in trials.channel_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(trials.labels.astype("<i4").tobytes())
    parts.append(trials.subject_ids.astype("<i4").tobytes())
    parts.append(np.ascontiguousarray(trials.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_eegt(buf: bytes) -> TrialSet:
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated EEGT file: need {nbytes} bytes for {what} at byte offset {pos}, "
                              f"only {len(buf) - pos} left")
        chunk = buf[pos: pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != EEGT_MAGIC:
        raise FormatError("bad magic at byte offset 0: not an EEGT file")
    version, n, c, t, fs, n_classes, dataset_id = struct.unpack("<IIIIfII", take(28, "header"))
    if version != EEGT_VERSION:
        raise FormatError(f"unsupported EEGT version {version} at byte offset 4")
    (n_names,) = struct.unpack("<I", take(4, "channel count"))
    if n_names != c:
        raise FormatError(f"channel-name count {n_names} != n_channels {c} at byte offset {pos - 4}")
    names = []
    for _ in range(n_names):
        (length,) = struct.unpack("<H", take(2, "channel name length"))
        names.append(take(length, "channel name").decode("utf-8"))
    labels = np.frombuffer(take(4 * n, "labels"), dtype="<i4")
    subjects = np.frombuffer(take(4 * n, "subject ids"), dtype="<i4")
    data = np.frombuffer(take(4 * n * c * t, "trial data"), dtype="<f4").reshape(n, c, t)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after trial data at byte offset {pos}")
    return TrialSet(data=data.astype(np.float64), labels=labels, subject_ids=subjects,
                    dataset_id=int(dataset_id), fs_hz=float(fs), channel_names=names,
                    n_classes=int(n_classes))


def write_eegt(trials: TrialSet, path) -> None:
    Path(path).write_bytes(encode_eegt(trials))


def read_eegt(path) -> TrialSet:
    return decode_eegt(Path(path).read_bytes())


# -- fold planning -----------------------------------------------------------

@dataclass
class Fold:
    train: list[int]
    val: list[int]


@dataclass
class FoldPlan:
    """``kind`` is "subjects" (entries are subject ids) or "indices" (trial indices)."""

    folds: list[Fold]
    kind: str

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def to_json(self) -> dict:
        return {"kind": self.kind, "folds": [{"train": f.train, "val": f.val} for f in self.folds]}


def make_folds_loso_repeated(subjects: Sequence[int], repeats: int = 2) -> FoldPlan:
    subjects = [int(s) for s in subjects]
    if len(set(subjects)) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(set(subjects))}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    folds = []
    for _ in range(repeats):
        for s in subjects:
            folds.append(Fold(train=[o for o in subjects if o != s], val=[s]))
    return FoldPlan(folds, kind="subjects")


def make_folds_unstratified(n_trials: int, k: int, seed: int) -> FoldPlan:
    if k < 1 or k > n_trials:
        raise ValueError(f"cannot split {n_trials} trials into {k} folds")
    perm = stream(seed, "folds", "unstratified").permutation(n_trials)
    folds = []
    for part in np.array_split(perm, k):
        val = sorted(int(i) for i in part)
        held = set(val)
        folds.append(Fold(train=[i for i in range(n_trials) if i not in held], val=val))
    return FoldPlan(folds, kind="indices")


# -- weighting ---------------------------------------------------------------

@dataclass
class SamplerWeights:
    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if np.any(self.weight <= 0):
            raise ValueError("sampler weights must be positive")


def oversample_weights(source_n: int, calib_n: int) -> SamplerWeights:
    """Per-trial weights giving the calibration trials the same total mass as the source.

    Source trials come first (weight 1), then calibration trials.
    """
    if source_n < 0 or calib_n < 0:
        raise ValueError("trial counts must be non-negative")
    if calib_n == 0:
        if source_n > 0:
            raise ValueError("cannot oversample an empty calibration set")
        return SamplerWeights(np.zeros(0))
    calib_w = source_n / calib_n if source_n else 1.0
    return SamplerWeights(np.concatenate([np.ones(source_n), np.full(calib_n, calib_w)]))


def class_weights(counts, merge_groups: Sequence[Sequence[int]] = ()) -> np.ndarray:
    """Loss weights ∝ importance / count, normalised to mean 1.

    Each logical class has importance 1; classes merged into one logical
    class split it equally. ``counts`` may be fractional (expected mass).
    """
    counts = np.asarray(counts, dtype=np.float64)
    importance = np.ones_like(counts)
    for group in merge_groups:
        for c in group:
            importance[c] = 1.0 / len(group)
    zero = np.flatnonzero(counts <= 0)
    if zero.size:
        raise ValueError(f"class {int(zero[0])} has no training trials")
    w = importance / counts
    return w / w.mean()


# -- subject-chunked batching ------------------------------------------------

class Batch(NamedTuple):
    chunk: np.ndarray            # [K, C, T], trials grouped by subject
    boundaries: list[int]        # group offsets, 0 ... K
    head: int
    labels: np.ndarray
    indices: np.ndarray          # positions in the concatenated input sets
    subjects: list[int]


def _as_sets(trials) -> list[TrialSet]:
    return [trials] if isinstance(trials, TrialSet) else list(trials)


def subject_chunk_batches(trials, subjects_per_batch: int = 4, trials_per_subject: int = 16,
                          weights: SamplerWeights | None = None, seed: int = 0,
                          epoch: int = 0, n_batches: int | None = None) -> Iterator[Batch]:
    """Yield minibatches made of contiguous per-subject groups.

    ``trials`` is one TrialSet or a list of them (the dataset id selects the
    classifier head). Each batch draws one dataset by sampling mass, then
    ``subjects_per_batch`` subject slots with replacement in proportion to
    subject mass; repeated slots merge into one larger group. Each slot
    contributes ``trials_per_subject`` trials. The sequence is a pure
    function of ``(seed, epoch)``.
    """
    if subjects_per_batch < 1 or trials_per_subject < 1:
        raise ValueError("subjects_per_batch and trials_per_subject must be >= 1")
    sets = _as_sets(trials)
    total = sum(len(s) for s in sets)
    w = np.ones(total) if weights is None else weights.weight
    if len(w) != total:
        raise ValueError(f"{len(w)} weights for {total} trials")

    # subject pools keyed by (set position, subject id), in first-appearance order
    pools = []
    offset = 0
    for si, s in enumerate(sets):
        for subj in s.subjects():
            local = np.flatnonzero(s.subject_ids == subj)
            if local.size == 0:
                log.warning("subject %s has no trials; skipped", subj)
                continue
            pools.append((si, subj, local, w[offset + local]))
        offset += len(s)
    if not pools:
        return
    offsets = np.cumsum([0] + [len(s) for s in sets])
    head_of = [s.dataset_id for s in sets]
    subj_mass = np.array([pw.sum() for _, _, _, pw in pools])
    pool_set = np.array([si for si, _, _, _ in pools])
    set_mass = np.array([subj_mass[pool_set == si].sum() for si in range(len(sets))])

    if n_batches is None:
        n_batches = math.ceil(total / (subjects_per_batch * trials_per_subject))
    rng = stream(seed, "batches", epoch)
    for _ in range(n_batches):
        si = int(rng.choice(len(sets), p=set_mass / set_mass.sum()))
        cand = np.flatnonzero(pool_set == si)
        p = subj_mass[cand] / subj_mass[cand].sum()
        draws = rng.choice(cand, size=subjects_per_batch, replace=True, p=p)
        order, counts = [], {}
        for d in draws:
            d = int(d)
            if d not in counts:
                order.append(d)
                counts[d] = 0
            counts[d] += 1
        chunks, labels, idxs, bounds, subjects = [], [], [], [0], []
        for d in order:
            _, subj, local, pw = pools[d]
            need = counts[d] * trials_per_subject
            prob = pw / pw.sum()
            if need <= local.size:
                pick = rng.choice(local.size, size=need, replace=False, p=prob)
            else:
                pick = np.concatenate([rng.permutation(local.size),
                                       rng.choice(local.size, size=need - local.size, p=prob)])
            sel = local[pick]
            s = sets[si]
            chunks.append(s.data[sel])
            labels.append(s.labels[sel])
            idxs.append(offsets[si] + sel)
            bounds.append(bounds[-1] + need)
            subjects.append(int(subj))
        yield Batch(np.concatenate(chunks), bounds, head_of[si], np.concatenate(labels),
                    np.concatenate(idxs), subjects)


def subject_groups(subject_ids) -> tuple[np.ndarray, list[int]]:
    """Stable reorder grouping equal subject ids; returns (order, boundaries)."""
    subject_ids = np.asarray(subject_ids)
    _, first = np.unique(subject_ids, return_index=True)
    order_subjects = subject_ids[np.sort(first)]
    order = np.concatenate([np.flatnonzero(subject_ids == s) for s in order_subjects]) \
        if subject_ids.size else np.zeros(0, dtype=np.int64)
    bounds = [0]
    for s in order_subjects:
        bounds.append(bounds[-1] + int(np.sum(subject_ids == s)))
    return order, bounds


# -- synthetic covariate-shifted data ---------------------------------------

@dataclass
class SynthSpec:
    """Synthetic dataset description.

    Each class is a fixed template: shared band-limited source waveforms mixed
    into channels, with class-specific per-channel gains. Every subject then
    gets its own per-channel affine corruption ``a * x + b``.
    """

    n_subjects: int = 6
    trials_per_class: int = 40
    n_classes: int = 4
    n_channels: int = 8
    n_samples: int = 256
    fs: float = 128.0
    snr: float = 2.0
    shift: bool = True
    scale_range: tuple[float, float] = (0.5, 3.0)
    offset_range: tuple[float, float] = (-2.0, 2.0)
    n_sources: int = 4
    band_hz: tuple[float, float] = (4.0, 20.0)
    class_gain: float = 1.0
    dataset_id: int = 0
    first_subject: int = 0

    def validate(self) -> None:
        ints = ("n_subjects", "trials_per_class", "n_classes", "n_channels", "n_samples", "n_sources")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"synth spec: {name} must be >= 1")
        if self.n_classes < 2:
            raise ValueError("synth spec: need at least 2 classes")
        if self.fs <= 0 or not self.snr > 0:
            raise ValueError("synth spec: fs and snr must be positive")
        lo, hi = self.band_hz
        if not 0 <= lo < hi <= self.fs / 2:
            raise ValueError(f"synth spec: band {self.band_hz} outside (0, {self.fs / 2})")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("synth spec: scale range must be positive and ordered")
        if self.offset_range[0] > self.offset_range[1]:
            raise ValueError("synth spec: offset range must be ordered")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"synth spec: unknown keys {sorted(unknown)}")
        vals = dict(raw)
        for key in ("scale_range", "offset_range", "band_hz"):
            if key in vals:
                vals[key] = tuple(float(v) for v in vals[key])
        if vals.get("snr") in ("inf", "Infinity"):
            vals["snr"] = math.inf
        spec = cls(**vals)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _band_limited(rng: np.random.Generator, n: int, fs: float, band: tuple[float, float]) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < band[0]) | (f > band[1])] = 0.0
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x**2))


def synth_templates(spec: SynthSpec, seed: int) -> np.ndarray:
    """Class templates [n_classes, C, T]; shared by all subjects."""
    rng = stream(seed, "synth", "templates")
    sources = np.stack([_band_limited(rng, spec.n_samples, spec.fs, spec.band_hz)
                        for _ in range(spec.n_sources)])
    mixing = rng.standard_normal((spec.n_channels, spec.n_sources))
    waves = mixing @ sources
    waves /= np.sqrt(np.mean(waves**2, axis=1, keepdims=True))
    gains = 1.0 + spec.class_gain * rng.random((spec.n_classes, spec.n_channels))
    return gains[:, :, None] * waves[None]


def synth_generate(spec: SynthSpec, seed: int) -> TrialSet:
    spec.validate()
    templates = synth_templates(spec, seed)
    noise_sd = 0.0 if math.isinf(spec.snr) else float(np.sqrt(np.mean(templates**2))) / spec.snr
    data, labels, subjects = [], [], []
    for s in range(spec.n_subjects):
        sid = spec.first_subject + s
        rng = stream(seed, "synth", "subject", sid)
        y = rng.permutation(np.repeat(np.arange(spec.n_classes), spec.trials_per_class))
        x = templates[y] + noise_sd * rng.standard_normal((len(y), spec.n_channels, spec.n_samples))
        if spec.shift:
            a = rng.uniform(*spec.scale_range, size=spec.n_channels)
            b = rng.uniform(*spec.offset_range, size=spec.n_channels)
            x = a[None, :, None] * x + b[None, :, None]
        data.append(x)
        labels.append(y)
        subjects.append(np.full(len(y), sid))
    # float32-exact so the on-disk round trip is lossless
    data = np.concatenate(data).astype(np.float32).astype(np.float64)
    return TrialSet(data=data, labels=np.concatenate(labels), subject_ids=np.concatenate(subjects),
                    dataset_id=spec.dataset_id, fs_hz=float(spec.fs), n_classes=spec.n_classes)
