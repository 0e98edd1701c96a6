"""Recording containers, preprocessing (filter -> segment -> normalize), the
synthetic multichannel gesture generator, and the binary dataset format.

The preprocessing chain is order-fixed and pure: applying it twice to the
same recording yields identical patch sets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _signal

from .errors import ConfigError, DataError, FormatError

SAMPLE_RATE_HZ = 1000.0
WINDOW = 64
STEP = 8

_MAGIC = b"MEMB"
_VERSION = 1


@dataclass
class RecordingSession:
    """One labeled multichannel recording (T samples x V channels)."""

    samples: np.ndarray  # (T, V) float64
    label: int
    subject_id: int
    session_id: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise DataError(f"recording must be (T, V), got {self.samples.shape}")


@dataclass
class PatchSet:
    """Segmented, normalized windows cut from one recording."""

    patches: np.ndarray  # (P, L, V), every value in [-1, 1]
    labels: np.ndarray  # (P,) class id, inherited from the source
    source_ids: np.ndarray  # (P,) recording index for vote aggregation
    subject_id: int
    session_id: int


@dataclass
class DatasetSplit:
    train: list[PatchSet]
    test: list[PatchSet]
    protocol_tag: str = "inter-session"


def bandstop_filter(
    x: np.ndarray,
    low_hz: float = 45.0,
    high_hz: float = 55.0,
    order: int = 4,
    fs: float = SAMPLE_RATE_HZ,
) -> np.ndarray:
    """Zero-phase Butterworth band-stop applied per channel.

    Forward-backward (filtfilt) application keeps DC gain ~1 and avoids
    phase skew between overlapping windows.
    """
    nyq = fs / 2.0
    if not 0.0 < low_hz < high_hz < nyq:
        raise ConfigError(f"band edges {low_hz}-{high_hz} Hz invalid for fs={fs}")
    if x.shape[0] <= 3 * order:
        raise DataError(f"need more than {3 * order} samples, got {x.shape[0]}")
    sos = _signal.butter(order, [low_hz / nyq, high_hz / nyq], btype="bandstop", output="sos")
    return _signal.sosfiltfilt(sos, x, axis=0)


def segment(x: np.ndarray, window: int = WINDOW, step: int = STEP) -> list[np.ndarray]:
    """Cut overlapping windows; count = floor((T - window)/step) + 1."""
    t = x.shape[0]
    if t < window:
        raise DataError(f"recording too short: {t} < window {window}")
    count = (t - window) // step + 1
    return [x[i * step : i * step + window] for i in range(count)]


def normalize(patch: np.ndarray) -> np.ndarray:
    """Affine map sending the patch min to -1 and max to +1.

    A constant patch maps to all zeros by convention.
    """
    lo, hi = patch.min(), patch.max()
    if hi == lo:
        return np.zeros_like(patch)
    return (patch - lo) * (2.0 / (hi - lo)) - 1.0


def preprocess(rec: RecordingSession, source_id: int = 0) -> PatchSet:
    """filter -> segment -> normalize, in that fixed order."""
    filtered = bandstop_filter(rec.samples)
    windows = segment(filtered)
    patches = np.stack([normalize(w) for w in windows])
    n = len(windows)
    return PatchSet(
        patches=patches,
        labels=np.full(n, rec.label, dtype=np.int64),
        source_ids=np.full(n, source_id, dtype=np.int64),
        subject_id=rec.subject_id,
        session_id=rec.session_id,
    )


def preprocess_all(recordings: list[RecordingSession]) -> list[PatchSet]:
    return [preprocess(r, i) for i, r in enumerate(recordings)]


# ---------------------------------------------------------------------------
# synthetic generator


def _child_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic per-consumer stream derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _class_templates(seed: int, classes: int, channels: int) -> np.ndarray:
    """Smooth, strictly positive spatial activation per class (G, V)."""
    rng = _child_rng(seed, 0xA11)
    raw = rng.standard_normal((classes, channels))
    kernel = np.exp(-0.5 * (np.arange(-3, 4) / 1.5) ** 2)
    kernel /= kernel.sum()
    smooth = np.stack(
        [np.convolve(np.tile(r, 3), kernel, mode="same")[channels : 2 * channels] for r in raw]
    )
    smooth -= smooth.min(axis=1, keepdims=True)
    smooth /= smooth.max(axis=1, keepdims=True) + 1e-12
    # moderate spatial contrast: enough to separate classes sharing a
    # modulation rate, not enough for per-channel amplitude alone to solve
    # the task
    return 0.45 + 0.55 * smooth


def _band_noise(
    rng: np.random.Generator, t: int, v: int, fs: float,
    lo: float = 20.0, hi: float = 450.0,
) -> np.ndarray:
    """Unit-power noise band-limited to [lo, hi] Hz within the usable
    20-450 Hz sEMG band."""
    white = rng.standard_normal((t, v))
    sos = _signal.butter(4, [lo / (fs / 2), hi / (fs / 2)], btype="bandpass", output="sos")
    shaped = _signal.sosfiltfilt(sos, white, axis=0)
    return shaped / (shaped.std(axis=0, keepdims=True) + 1e-12)


def synth_dataset(
    seed: int,
    subjects: int = 9,
    sessions: int = 2,
    classes: int = 8,
    trials_per_class: int = 1,
    t: int = 1000,
    v: int = 16,
) -> list[RecordingSession]:
    """Deterministic synthetic gesture corpus standing in for a real HD-sEMG
    dataset at desk scale.

    Each class couples a distinct spatial activation template with a
    class-specific low-frequency amplitude envelope on band-limited noise.
    Session 2 rolls the channel layout by one electrode and applies per-channel
    gain drift (inter-session variability); 50 Hz interference at random phase
    exercises the band-stop filter. Samples are rounded to f32 precision so a
    container round-trip is bit-exact.
    """
    if v < 4:
        raise ConfigError(f"need at least 4 channels, got {v}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    templates = _class_templates(seed, classes, v)
    # modulation rates in widely-spaced groups: fast enough that a
    # 64-sample window sees a full cycle, below the 45-55 Hz stop band.
    # The rate survives electrode shift and gain drift, unlike raw
    # amplitude; classes sharing a rate differ spatially.
    rates = np.array([15.0, 21.0, 29.0, 40.0])
    env_freq = rates[np.arange(classes) % 4] + 1.5 * (np.arange(classes) // 4)
    # each class also colors its carrier: log-spaced sub-bands of the sEMG
    # range, kept above the 45-55 Hz stop band. Spectral content is blind
    # to per-channel RMS summaries and survives electrode shift, so it
    # rewards models that look at waveform shape
    centers = 60.0 * (420.0 / 60.0) ** ((np.arange(classes) % 8) / 7.0)
    band_lo = 0.75 * centers
    band_hi = np.minimum(1.3 * centers, 449.0)
    time = np.arange(t) / SAMPLE_RATE_HZ
    recordings = []
    for subj in range(subjects):
        for sess in range(1, sessions + 1):
            drift_rng = _child_rng(seed, 0xD21F, subj, sess)
            gain = drift_rng.uniform(0.85, 1.15, size=v) if sess > 1 else np.ones(v)
            roll = sess - 1  # electrode-shift analogue
            for cls in range(classes):
                for trial in range(trials_per_class):
                    rng = _child_rng(seed, subj, sess, cls, trial)
                    # per-recording channel jitter keeps raw per-channel
                    # amplitude from being a sufficient class statistic
                    chan_jitter = rng.uniform(0.8, 1.2, size=v)
                    template = np.roll(templates[cls], roll) * gain * chan_jitter
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    envelope = 1.0 + 0.8 * np.sin(2.0 * np.pi * env_freq[cls] * time + phase)
                    carrier = _band_noise(
                        rng, t, v, SAMPLE_RATE_HZ, lo=band_lo[cls], hi=band_hi[cls]
                    )
                    amp = rng.uniform(0.6, 1.6)  # per-recording gain jitter
                    x = amp * envelope[:, None] * template[None, :] * carrier
                    hum_phase = rng.uniform(0.0, 2.0 * np.pi)
                    hum_gain = rng.uniform(0.1, 0.3, size=v)
                    x += hum_gain[None, :] * np.sin(2.0 * np.pi * 50.0 * time + hum_phase)[:, None]
                    x += 0.02 * rng.standard_normal((t, v))
                    x = x.astype(np.float32).astype(np.float64)
                    recordings.append(
                        RecordingSession(x, label=cls, subject_id=subj, session_id=sess)
                    )
    return recordings


# ---------------------------------------------------------------------------
# splits


def build_split(
    recordings: list[RecordingSession],
    protocol: str = "inter-session",
    test_session: int | None = None,
) -> DatasetSplit:
    """Assemble a train/test split under the named protocol.

    inter-session: hold out one whole session (default: the highest id).
    intra-session: split each recording in time, leaving a one-window gap so
    no raw sample is shared between sides.
    """
    if not recordings:
        raise DataError("no recordings to split")
    if protocol == "inter-session":
        sessions = sorted({r.session_id for r in recordings})
        if len(sessions) < 2:
            raise DataError("inter-session split needs at least two sessions")
        held = test_session if test_session is not None else sessions[-1]
        train, test = [], []
        for i, rec in enumerate(recordings):
            (test if rec.session_id == held else train).append(preprocess(rec, i))
        split = DatasetSplit(train, test, "inter-session")
        check_split(split)
        return split
    if protocol == "intra-session":
        train, test = [], []
        for i, rec in enumerate(recordings):
            t = rec.samples.shape[0]
            cut = int(t * 0.7)
            head = RecordingSession(rec.samples[:cut], rec.label, rec.subject_id, rec.session_id)
            tail = RecordingSession(
                rec.samples[cut + WINDOW :], rec.label, rec.subject_id, rec.session_id
            )
            train.append(preprocess(head, i))
            test.append(preprocess(tail, i))
        return DatasetSplit(train, test, "intra-session")
    raise ConfigError(f"unknown protocol {protocol!r}")


def check_split(split: DatasetSplit):
    """Raise if a (subject, session) pair leaks across an inter-session split."""
    if split.protocol_tag != "inter-session":
        return
    train_keys = {(p.subject_id, p.session_id) for p in split.train}
    test_keys = {(p.subject_id, p.session_id) for p in split.test}
    leaked = train_keys & test_keys
    if leaked:
        raise DataError(f"session leakage across split: {sorted(leaked)}")


# ---------------------------------------------------------------------------
# container format (magic MEMB)


def save_container(recordings: list[RecordingSession], path):
    """Write the little-endian binary container described in the docs."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(recordings)))
        for rec in recordings:
            t, v = rec.samples.shape
            fh.write(struct.pack("<IIBHH", t, v, rec.label, rec.subject_id, rec.session_id))
            fh.write(rec.samples.astype("<f4").tobytes())


def load_container(path) -> list[RecordingSession]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise FormatError("not a MEMB container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    offset = 12
    recordings = []
    for _ in range(count):
        if offset + 13 > len(blob):
            raise FormatError("truncated container header")
        t, v, label, subject, session = struct.unpack_from("<IIBHH", blob, offset)
        offset += 13
        nbytes = t * v * 4
        if offset + nbytes > len(blob):
            raise FormatError("truncated container payload")
        samples = np.frombuffer(blob, dtype="<f4", count=t * v, offset=offset)
        offset += nbytes
        recordings.append(
            RecordingSession(
                samples.reshape(t, v).astype(np.float64),
                label=label,
                subject_id=subject,
                session_id=session,
            )
        )
    return recordings


def load_csv_recording(path, label: int, subject_id: int, session_id: int) -> RecordingSession:
    """Per-recording CSV ingestion: T rows x V comma-separated columns."""
    try:
        samples = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"bad CSV recording {path}: {exc}") from exc
    return RecordingSession(samples, label=label, subject_id=subject_id, session_id=session_id)
