"""Recording ingestion, 50%-overlap sliding windows and first-sample normalization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

ACTIONS = ("brushing", "combing", "deodorant", "drinking", "face_wash",
           "feeding", "glasses", "RTT", "shelf")
PARETIC_SIDES = ("Left", "Right")
SEXES = ("F", "M")
IMPAIRMENTS = ("Mild", "Moderate", "Severe")
TASK_LABELS = {"paretic": PARETIC_SIDES, "action": ACTIONS}
SIDECAR_FIELDS = ("id", "paretic_side", "action", "age", "sex", "impairment",
                  "time_since_stroke_days", "ue_fma")


class RecordingFormatError(ValueError):
    """Malformed recording or sidecar file."""


class RecordingValidationError(ValueError):
    """Well-formed input that violates a recording invariant."""


class RecordingTooShort(ValueError):
    """The recording has fewer samples than one window."""


@dataclass(frozen=True)
class SubjectMeta:
    age_years: int
    sex: str
    impairment: str
    time_since_stroke: float
    ue_fma: int | None = None


@dataclass
class Recording:
    id: str
    channels: list[str]
    samples: np.ndarray
    sample_rate_hz: float
    paretic_side: str
    action: str
    meta: SubjectMeta
    units: list[str] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise RecordingValidationError(f"recording {self.id}: samples must be a non-empty L x F matrix")
        if self.samples.shape[1] != len(self.channels):
            raise RecordingValidationError(f"recording {self.id}: {len(self.channels)} channel names "
                             f"for {self.samples.shape[1]} columns")
        if not np.all(np.isfinite(self.samples)):
            raise RecordingValidationError(f"recording {self.id}: non-finite sample values")
        if not self.sample_rate_hz > 0:
            raise RecordingValidationError(f"recording {self.id}: sample rate must be positive")
        _check_labels(self.id, self.paretic_side, self.action, self.meta)

    @property
    def labels(self) -> dict:
        return {"paretic": self.paretic_side, "action": self.action}

    def sidecar(self) -> dict:
        m = self.meta
        return {"id": self.id, "paretic_side": self.paretic_side, "action": self.action,
                "age": m.age_years, "sex": m.sex, "impairment": m.impairment,
                "time_since_stroke_days": m.time_since_stroke, "ue_fma": m.ue_fma,
                "sample_rate_hz": self.sample_rate_hz}


def _check_labels(rid, side, action, meta: SubjectMeta):
    if side not in PARETIC_SIDES:
        raise RecordingValidationError(f"recording {rid}: unknown paretic side {side!r}")
    if action not in ACTIONS:
        raise RecordingValidationError(f"recording {rid}: unknown action label {action!r}")
    if meta.sex not in SEXES:
        raise RecordingValidationError(f"recording {rid}: unknown sex {meta.sex!r}")
    if meta.impairment not in IMPAIRMENTS:
        raise RecordingValidationError(f"recording {rid}: unknown impairment {meta.impairment!r}")
    if meta.age_years < 0 or meta.time_since_stroke < 0:
        raise RecordingValidationError(f"recording {rid}: age and time since stroke must be nonnegative")
    if meta.ue_fma is not None and not 0 <= meta.ue_fma <= 66:
        raise RecordingValidationError(f"recording {rid}: UE-FMA {meta.ue_fma} outside [0, 66]")


@dataclass
class Window:
    data: np.ndarray
    source_id: str
    offset: int
    labels: dict = field(default_factory=dict)
    normalized: bool = False


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_sidecar(path) -> dict:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RecordingFormatError(f"{path}: cannot read sidecar: {exc}") from exc
    missing = [k for k in SIDECAR_FIELDS if k not in meta]
    if missing:
        raise RecordingFormatError(f"{path}: sidecar missing required fields {missing}")
    return meta


def meta_from_sidecar(meta: dict) -> SubjectMeta:
    ue = meta["ue_fma"]
    return SubjectMeta(age_years=int(meta["age"]), sex=meta["sex"], impairment=meta["impairment"],
                       time_since_stroke=float(meta["time_since_stroke_days"]),
                       ue_fma=None if ue is None else int(ue))


def _parse_float(tok, where: str) -> float:
    try:
        v = float(tok)
    except (TypeError, ValueError):
        raise RecordingFormatError(f"{where}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise RecordingValidationError(f"{where}: non-finite value {tok!r}")
    return v


def _read_csv(path: Path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "time" or len(header) < 2:
            raise RecordingFormatError(f"{path}:1: header must be 'time,<ch1>,...,<chF>'")
        channels = [h.strip() for h in header[1:]]
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RecordingFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            where = f"{path}:{lineno}"
            vals = [_parse_float(t, where) for t in row]
            times.append(vals[0])
            rows.append(vals[1:])
    return channels, np.array(times), np.array(rows, dtype=np.float64).reshape(len(rows), len(channels))


def _read_jsonl(path: Path):
    channels, times, rows = None, [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordingFormatError(f"{where}: invalid JSON: {exc}") from None
            if "time" not in obj:
                raise RecordingFormatError(f"{where}: missing 'time'")
            keys = [k for k in obj if k != "time"]
            if channels is None:
                channels = keys
            elif set(keys) != set(channels) or len(keys) != len(channels):
                raise RecordingFormatError(f"{where}: expected channels {channels}, got {keys}")
            times.append(_parse_float(obj["time"], where))
            rows.append([_parse_float(obj[k], where) for k in channels])
    if channels is None:
        raise RecordingFormatError(f"{path}: no samples")
    return channels, np.array(times), np.array(rows, dtype=np.float64)


def ingest_recording(path, format: str | None = None, sidecar=None) -> Recording:
    """Read a recording file plus its JSON sidecar (``<stem>.json`` by default)."""
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        channels, times, samples = _read_csv(path)
    elif fmt == "jsonl":
        channels, times, samples = _read_jsonl(path)
    else:
        raise ValueError(f"unsupported recording format {fmt!r}")
    if len(samples) == 0:
        raise RecordingFormatError(f"{path}: no samples")
    meta = read_sidecar(sidecar or path.with_suffix(".json"))
    rate = meta.get("sample_rate_hz")
    if rate is None:
        rate = 1.0 / float(np.median(np.diff(times))) if len(times) > 1 else 100.0
    return Recording(id=str(meta["id"]), channels=channels, samples=samples,
                     sample_rate_hz=float(rate), paretic_side=meta["paretic_side"],
                     action=meta["action"], meta=meta_from_sidecar(meta))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_recording(rec: Recording, directory, format: str = "csv") -> list[Path]:
    """Write ``<id>.<format>`` and ``<id>.json``; values keep full precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / f"{rec.id}.{format}"
    times = np.arange(len(rec.samples)) / rec.sample_rate_hz
    if format == "csv":
        with data_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", *rec.channels])
            for t, row in zip(times, rec.samples):
                w.writerow([_fmt(t), *map(_fmt, row)])
    elif format == "jsonl":
        with data_path.open("w") as fh:
            for t, row in zip(times, rec.samples):
                obj = {"time": float(t)}
                obj.update(zip(rec.channels, map(float, row)))
                fh.write(json.dumps(obj) + "\n")
    else:
        raise ValueError(f"unsupported recording format {format!r}")
    side_path = directory / f"{rec.id}.json"
    side_path.write_text(json.dumps(rec.sidecar(), indent=1, sort_keys=True) + "\n")
    return [data_path, side_path]


def load_directory(directory) -> list[Recording]:
    """Ingest every recording in a directory, sorted by file name."""
    directory = Path(directory)
    out = []
    for path in sorted(directory.iterdir()):
        if path.suffix in (".csv", ".jsonl"):
            out.append(ingest_recording(path))
    return out


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def default_skip(window_len: int) -> int:
    return max(window_len // 2, 1)


def window_count(length: int, window_len: int, skip: int) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // skip + 1


def slide_windows(rec: Recording, window_len: int, skip: int | None = None) -> list[Window]:
    """Cut ``rec`` into windows starting at 0, skip, 2*skip, ...

    A trailing remainder shorter than ``window_len`` is dropped. Raises
    :class:`RecordingTooShort` when not even one window fits.
    """
    skip = default_skip(window_len) if skip is None else skip
    if window_len < 1 or skip < 1:
        raise ValueError(f"window_len and skip must be >= 1, got {window_len}, {skip}")
    length = len(rec.samples)
    if window_len > length:
        raise RecordingTooShort(f"recording {rec.id}: {length} samples < window length {window_len}")
    return [Window(rec.samples[o:o + window_len].copy(), rec.id, o, dict(rec.labels))
            for o in range(0, length - window_len + 1, skip)]


def normalize_window(w: Window) -> Window:
    """Subtract each channel's first sample from the whole channel."""
    data = w.data - w.data[:1]
    return replace(w, data=data, normalized=True)


def normalize_array(X) -> np.ndarray:
    """Same as :func:`normalize_window` over a ``[n, T, F]`` stack."""
    X = np.asarray(X, dtype=np.float64)
    return X - X[:, :1]


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(not 0.0 <= f <= 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must lie in [0, 1] and sum to 1, got {fr}")

    def counts(self, n: int) -> tuple[int, int, int]:
        n_val = int(round(self.val * n))
        n_test = int(round(self.test * n))
        n_val = min(n_val, n)
        n_test = min(n_test, n - n_val)
        return n - n_val - n_test, n_val, n_test


@dataclass
class WindowSet:
    X: np.ndarray
    y: np.ndarray
    source_ids: list[str]
    offsets: np.ndarray
    class_names: tuple[str, ...]

    def __len__(self):
        return len(self.y)


def split_recordings(ids, split: SplitSpec) -> tuple[list[str], list[str], list[str]]:
    ids = sorted(set(ids))
    order = np.random.default_rng(split.seed).permutation(len(ids))
    n_train, n_val, _ = split.counts(len(ids))
    shuffled = [ids[i] for i in order]
    return (sorted(shuffled[:n_train]), sorted(shuffled[n_train:n_train + n_val]),
            sorted(shuffled[n_train + n_val:]))


def windows_to_set(recordings, task: str, window_len: int, skip: int | None = None,
                   normalize: bool = True) -> WindowSet:
    classes = TASK_LABELS[task]
    X, y, src, off = [], [], [], []
    for rec in recordings:
        try:
            wins = slide_windows(rec, window_len, skip)
        except RecordingTooShort:
            continue
        for w in wins:
            X.append(w.data)
            y.append(classes.index(w.labels[task]))
            src.append(w.source_id)
            off.append(w.offset)
    n_feat = recordings[0].samples.shape[1] if recordings else 0
    X = np.stack(X) if X else np.zeros((0, window_len, n_feat))
    if normalize:
        X = normalize_array(X)
    return WindowSet(X, np.array(y, dtype=np.int64), src, np.array(off, dtype=np.int64), classes)


def build_dataset(recordings, task: str, window_len: int = 64, skip: int | None = None,
                  split: SplitSpec | None = None):
    """Window, normalize and split ``recordings`` by recording id.

    Returns ``(train, val, test)`` :class:`WindowSet` objects.
    """
    if not recordings:
        raise ValueError("no recordings")
    if task not in TASK_LABELS:
        raise ValueError(f"task must be one of {sorted(TASK_LABELS)}, got {task!r}")
    split = split or SplitSpec()
    widths = {r.samples.shape[1] for r in recordings}
    if len(widths) != 1:
        raise ValueError(f"recordings disagree on channel count: {sorted(widths)}")
    by_id = {r.id: r for r in recordings}
    if len(by_id) != len(recordings):
        raise ValueError("duplicate recording ids")
    parts = split_recordings(by_id, split)
    return tuple(windows_to_set([by_id[i] for i in ids], task, window_len, skip) for ids in parts)


class SlidingWindowTransformer(TransformerMixin, BaseEstimator):
    """Turn ``[n_series, L, F]`` (or a single ``[L, F]``) into normalized windows.

    ``transform`` returns the stacked ``[n_windows, window_len, F]`` array;
    ``window_index_`` holds ``(series, offset)`` for each output row after the
    last call.
    """

    def __init__(self, window_len=64, skip=None, normalize=True):
        self.window_len = window_len
        self.skip = skip
        self.normalize = normalize

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ValueError(f"expected [n_series, L, F] input, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        skip = default_skip(self.window_len) if self.skip is None else self.skip
        if self.window_len > X.shape[1]:
            raise RecordingTooShort(f"{X.shape[1]} samples < window length {self.window_len}")
        starts = range(0, X.shape[1] - self.window_len + 1, skip)
        out = np.stack([X[:, s:s + self.window_len] for s in starts], axis=1)
        self.window_index_ = [(i, s) for i in range(X.shape[0]) for s in starts]
        out = out.reshape(-1, self.window_len, X.shape[2])
        return normalize_array(out) if self.normalize else out
