"""Windowing, per-stream subsampling, feature files, manifests and synthetic data.

Feature files hold one T×d float32 matrix, little-endian::

    b"MMFB" | u32 version=1 | u32 T | u32 d | T*d float32, row-major

Manifests are JSON Lines, one clip per line::

    {"id": "clip00000", "fold": 3, "label": 1, "video": "...", "image": "...", "text": "..."}

with feature paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError

__all__ = [
    "MODALITIES",
    "STREAM_LENGTH",
    "WINDOW",
    "FeatureSequence",
    "WindowSample",
    "ManifestRecord",
    "Manifest",
    "Dataset",
    "SynthConfig",
    "window_starts",
    "uniform_subsample",
    "windows_from_frames",
    "write_features",
    "read_features",
    "encode_block",
    "decode_block",
    "read_manifest",
    "write_manifest",
    "load_dataset",
    "generate_synthetic",
    "synthetic_dataset",
    "augment",
]

MODALITIES = ("video", "image", "text")
STREAM_LENGTH = {"video": 16, "image": 16, "text": 4}
WINDOW = 64
DEFAULT_STRIDE = 16

MAGIC = b"MMFB"
HEADER = struct.Struct("<4sIII")
# version 1 carries float32 payloads (feature files); version 2 float64 (checkpoint tensors)
PAYLOAD_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class FeatureSequence:
    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ContractError(f"feature sequence must be T×d with T, d >= 1, got {list(self.data.shape)}")
        if not np.isfinite(self.data).all():
            raise DataError(f"{self.modality} features contain NaN or Inf")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class WindowSample:
    """The three aligned streams of one 64-frame window plus its label."""

    video: FeatureSequence
    image: FeatureSequence
    text: FeatureSequence
    label: object

    def __post_init__(self):
        for m in MODALITIES:
            seq = getattr(self, m)
            if seq.T != STREAM_LENGTH[m]:
                raise ContractError(f"{m} stream must have T={STREAM_LENGTH[m]}, got {seq.T}")


def window_starts(n_frames: int, window: int = WINDOW, stride: int = DEFAULT_STRIDE) -> list[int]:
    """Start frames of full sliding windows; ``[0]`` for clips shorter than one window."""
    if n_frames < 1 or stride < 1 or window < 1:
        raise ContractError(f"window_starts: need n_frames, window, stride >= 1 (got {n_frames}, {window}, {stride})")
    if n_frames < window:
        return [0]
    return list(range(0, n_frames - window + 1, stride))


def uniform_subsample(window: int = WINDOW, k: int = 16) -> list[int]:
    """``floor(j * window / k)`` for j = 0..k-1."""
    if not 1 <= k <= window:
        raise ContractError(f"uniform_subsample: need 1 <= k <= window, got k={k}, window={window}")
    return [(j * window) // k for j in range(k)]


def _pad(frames: np.ndarray, length: int) -> np.ndarray:
    if frames.shape[0] >= length:
        return frames
    tail = np.repeat(frames[-1:], length - frames.shape[0], axis=0)
    return np.concatenate([frames, tail], axis=0)


def windows_from_frames(frames: dict, label, window: int = WINDOW,
                        stride: int = DEFAULT_STRIDE) -> list[WindowSample]:
    """Cut per-frame feature matrices (n_frames×d per modality) into window samples.

    Clips shorter than ``window`` are padded by repeating the last frame.
    """
    lengths = {np.asarray(frames[m]).shape[0] for m in MODALITIES}
    if len(lengths) != 1:
        raise ContractError(f"per-frame streams disagree on frame count: {sorted(lengths)}")
    n = lengths.pop()
    picks = {m: np.array(uniform_subsample(window, STREAM_LENGTH[m])) for m in MODALITIES}
    padded = {m: _pad(np.asarray(frames[m], dtype=np.float32), window) for m in MODALITIES}
    out = []
    for s in window_starts(n, window, stride):
        seqs = {m: FeatureSequence(m, padded[m][s + picks[m]]) for m in MODALITIES}
        out.append(WindowSample(label=label, **seqs))
    return out


# -- binary feature files ---------------------------------------------------


def encode_block(matrix: np.ndarray, version: int = 1) -> bytes:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ContractError(f"feature block must be 2-D, got shape {list(arr.shape)}")
    T, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE[version]).tobytes()
    return HEADER.pack(MAGIC, version, T, d) + payload


def decode_block(buf: bytes, offset: int = 0, versions=(1, 2)):
    """Decode one block starting at ``offset``; returns (matrix, end offset)."""
    if len(buf) - offset < HEADER.size:
        raise ParseError("truncated header", len(buf))
    magic, version, T, d = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset)
    if version not in versions:
        raise ParseError(f"unsupported version {version}", offset + 4)
    dtype = PAYLOAD_DTYPE[version]
    start = offset + HEADER.size
    end = start + T * d * dtype.itemsize
    if len(buf) < end:
        raise ParseError(f"truncated payload: expected {T}x{d} values", len(buf))
    mat = np.frombuffer(buf, dtype=dtype, count=T * d, offset=start).reshape(T, d)
    return mat, end


def write_features(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_block(seq.data, version=1))


def read_features(path, modality: str = "video") -> FeatureSequence:
    buf = Path(path).read_bytes()
    mat, end = decode_block(buf, 0, versions=(1,))
    if end != len(buf):
        raise ParseError("trailing bytes after payload", end)
    if not np.isfinite(mat).all():
        raise DataError(f"{path}: payload contains NaN or Inf")
    return FeatureSequence(modality, mat.astype(np.float32))


# -- manifests --------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    fold: int
    label: object
    video: str
    image: str
    text: str


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def task(self) -> str:
        kinds = {"regression" if isinstance(r.label, (list, tuple)) else "classification" for r in self.records}
        if len(kinds) != 1:
            raise ConfigError("manifest mixes classification and regression labels")
        return kinds.pop()

    def path(self, rec: ManifestRecord, modality: str) -> Path:
        return self.root / getattr(rec, modality)

    def validate(self, task: str | None = None) -> None:
        """Check every referenced file parses and every label fits ``task``."""
        task = task or self.task()
        for rec in self.records:
            _check_label(rec, task)
            if not 1 <= rec.fold <= 5:
                raise ConfigError(f"{rec.id}: fold {rec.fold} outside 1..5")
            for m in MODALITIES:
                p = self.path(rec, m)
                if not p.exists():
                    raise ConfigError(f"{rec.id}: missing {m} file {p}")
                read_features(p, m)


def _check_label(rec: ManifestRecord, task: str) -> None:
    if task == "classification":
        if rec.label not in (0, 1) or isinstance(rec.label, (list, bool)):
            raise ConfigError(f"{rec.id}: classification label must be 0 or 1, got {rec.label!r}")
    elif task == "regression":
        lab = rec.label
        if not isinstance(lab, (list, tuple)) or len(lab) != 2 or not all(-1.0 <= float(v) <= 1.0 for v in lab):
            raise ConfigError(f"{rec.id}: regression label must be a pair in [-1, 1], got {lab!r}")
    else:
        raise ConfigError(f"unknown task {task!r}")


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ManifestRecord(**{k: obj[k] for k in ("id", "fold", "label", *MODALITIES)}))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return Manifest(records, path.parent)


def write_manifest(path, records) -> None:
    lines = [json.dumps(asdict(r), separators=(", ", ": ")) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Dataset:
    """All window samples of a manifest as stacked arrays (one row per window)."""

    video: np.ndarray
    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    folds: np.ndarray
    task: str

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dims(self) -> dict:
        return {m: getattr(self, m).shape[2] for m in MODALITIES}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.video[idx], self.image[idx], self.text[idx], self.labels[idx], self.folds[idx], self.task)

    def split(self, val_fold: int):
        val = self.folds == val_fold
        return self.subset(np.flatnonzero(~val)), self.subset(np.flatnonzero(val))


def load_dataset(manifest: Manifest, task: str | None = None, stride: int = DEFAULT_STRIDE) -> Dataset:
    """Read every clip; files with 16/16/4 rows are one window, longer files are per-frame."""
    task = task or manifest.task()
    streams = {m: [] for m in MODALITIES}
    labels, folds = [], []
    for rec in manifest.records:
        _check_label(rec, task)
        seqs = {m: read_features(manifest.path(rec, m), m) for m in MODALITIES}
        if all(seqs[m].T == STREAM_LENGTH[m] for m in MODALITIES):
            windows = [WindowSample(label=rec.label, **seqs)]
        else:
            windows = windows_from_frames({m: seqs[m].data for m in MODALITIES}, rec.label, stride=stride)
        for w in windows:
            for m in MODALITIES:
                streams[m].append(getattr(w, m).data)
            labels.append(w.label)
            folds.append(rec.fold)
    if not labels:
        raise ConfigError("manifest has no records")
    lab = np.asarray(labels, dtype=np.float64)
    if task == "classification":
        lab = lab.reshape(-1, 1)
    return Dataset(*(np.stack(streams[m]).astype(np.float64) for m in MODALITIES), lab,
                   np.asarray(folds, dtype=np.int64), task)


# -- synthetic data -----------------------------------------------------------

# latent coordinates (0-based) visible to each stream
LATENT_SUBSETS = {"video": (0, 2), "image": (2, 3), "text": (1, 3)}


@dataclass
class SynthConfig:
    n_clips: int = 2000
    d_v: int = 16
    d_i: int = 16
    d_t: int = 16
    task: str = "classification"
    seed: int = 0
    noise: float = 0.5

    def dims(self) -> dict:
        return {"video": self.d_v, "image": self.d_i, "text": self.d_t}


def synthetic_arrays(cfg: SynthConfig):
    """Latents, per-stream feature arrays and labels, without touching disk.

    Each clip draws ``u ~ N(0, I_4)``.  Every timestep of a stream is a fixed
    random linear image of that stream's latent subset plus iid Gaussian
    noise.  Labels: class ``1[u1*u2 + u3 > 0]``; regression target
    ``(tanh(u1 + u3), tanh(u2 + u4))``.
    """
    if cfg.n_clips < 10:
        raise ContractError(f"n_clips must be >= 10, got {cfg.n_clips}")
    dims = cfg.dims()
    if min(dims.values()) < 4:
        raise ContractError(f"feature dims must be >= 4, got {dims}")
    if cfg.task not in ("classification", "regression"):
        raise ContractError(f"unknown task {cfg.task!r}")
    proj_rng = np.random.default_rng([cfg.seed, 0xF00D])
    proj = {m: proj_rng.standard_normal((len(LATENT_SUBSETS[m]), dims[m])) / np.sqrt(len(LATENT_SUBSETS[m]))
            for m in MODALITIES}
    U = np.empty((cfg.n_clips, 4))
    feats = {m: np.empty((cfg.n_clips, STREAM_LENGTH[m], dims[m]), dtype=np.float32) for m in MODALITIES}
    for i in range(cfg.n_clips):
        rng = np.random.default_rng([cfg.seed, i])  # per-clip stream: clip ranges can be generated independently
        u = rng.standard_normal(4)
        U[i] = u
        for m in MODALITIES:
            signal = u[list(LATENT_SUBSETS[m])] @ proj[m]
            noise = cfg.noise * rng.standard_normal((STREAM_LENGTH[m], dims[m]))
            feats[m][i] = signal + noise
    if cfg.task == "classification":
        labels = (U[:, 0] * U[:, 1] + U[:, 2] > 0).astype(np.int64)
    else:
        labels = np.stack([np.tanh(U[:, 0] + U[:, 2]), np.tanh(U[:, 1] + U[:, 3])], axis=1)
    return U, feats, labels


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Write feature files plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    _, feats, labels = synthetic_arrays(cfg)
    records = []
    for i in range(cfg.n_clips):
        cid = f"clip{i:05d}"
        paths = {}
        for m in MODALITIES:
            rel = f"features/{cid}.{m}.mmfb"
            write_features(out / rel, FeatureSequence(m, feats[m][i]))
            paths[m] = rel
        label = int(labels[i]) if cfg.task == "classification" else [float(v) for v in labels[i]]
        records.append(ManifestRecord(cid, i % 5 + 1, label, **paths))
    write_manifest(out / "manifest.jsonl", records)
    return Manifest(records, out)


# -- augmentation ---------------------------------------------------------------


def augment(x, sigma: float = 0.01, mask_p: float = 0.1, rng: np.random.Generator | None = None):
    """Add N(0, sigma^2) noise, then zero each timestep row with probability ``mask_p``.

    Accepts a FeatureSequence or any ``[..., T, d]`` array; returns the same kind.
    """
    if sigma < 0 or not 0.0 <= mask_p <= 1.0:
        raise ContractError(f"augment: need sigma >= 0 and mask_p in [0, 1], got {sigma}, {mask_p}")
    rng = rng if rng is not None else np.random.default_rng()
    is_seq = isinstance(x, FeatureSequence)
    arr = x.data if is_seq else np.asarray(x)
    out = arr.astype(np.float64, copy=True)
    if sigma > 0:
        out += sigma * rng.standard_normal(out.shape)
    if mask_p > 0:
        keep = rng.random(out.shape[:-1]) >= mask_p
        out *= keep[..., None]
    if is_seq:
        return FeatureSequence(x.modality, out)
    return out.astype(arr.dtype, copy=False)


def synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """In-memory equivalent of ``load_dataset(generate_synthetic(cfg, dir))``."""
    _, feats, labels = synthetic_arrays(cfg)
    lab = labels.astype(np.float64)
    if cfg.task == "classification":
        lab = lab.reshape(-1, 1)
    folds = np.arange(cfg.n_clips) % 5 + 1
    # round-trip through float32 exactly as the feature files do
    return Dataset(*(feats[m].astype(np.float32).astype(np.float64) for m in MODALITIES), lab, folds, cfg.task)
