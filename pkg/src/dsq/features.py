"""Feature matrices, instance normalization and the synthetic corpus.

Feature matrices are stored frame-major: ``data[t]`` is the D-dim vector of
frame ``t``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .errors import (
    BadMagicError,
    DimensionMismatchError,
    DimOverflowError,
    InvalidInputError,
    ParseError,
    TruncatedError,
    VersionError,
)

STD_FLOOR = 1e-5

FEATURE_MAGIC = b"FTR1"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sBBIIf")
# 2**31 values is 8 GiB of payload; anything larger is a corrupt header.
MAX_FEATURE_VALUES = 2**31


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    data: np.ndarray
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise InvalidInputError(f"feature matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise InvalidInputError(f"feature matrix needs T >= 1 and D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("feature matrix contains non-finite values")
        if not (np.isfinite(self.frame_rate_hz) and self.frame_rate_hz > 0):
            raise InvalidInputError(f"frame rate must be positive, got {self.frame_rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> FeatureMatrix:
        return FeatureMatrix(data, self.frame_rate_hz)


@dataclass(frozen=True, eq=False)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionMismatchError(f"mean has {mean.size} dims, std has {std.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, STD_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.size


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def channel_stats(R) -> ChannelStats:
    """Per-dimension population mean and floored std along time."""
    data = _as_array(R)
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("non-finite values in input")
    if data.shape[0] < 1:
        raise InvalidInputError("need at least one frame")
    return ChannelStats(data.mean(axis=0), data.std(axis=0))


def instance_normalize(R) -> tuple[FeatureMatrix, ChannelStats]:
    """Standardize each dimension along time.

    Returns the normalized matrix and the (mean, std) statistics; std is the
    population standard deviation floored at ``STD_FLOOR``, so a single frame
    or a constant dimension normalizes to zeros.
    """
    stats = channel_stats(R)
    data = _as_array(R)
    normalized = (data - stats.mean) / stats.std
    rate = R.frame_rate_hz if isinstance(R, FeatureMatrix) else 50.0
    return FeatureMatrix(normalized, rate), stats


def denormalize(normalized, stats: ChannelStats) -> FeatureMatrix:
    data = _as_array(normalized)
    if data.shape[1] != stats.dim:
        raise DimensionMismatchError(
            f"normalized matrix has {data.shape[1]} dims, stats have {stats.dim}")
    rate = normalized.frame_rate_hz if isinstance(normalized, FeatureMatrix) else 50.0
    return FeatureMatrix(data * stats.std + stats.mean, rate)


# --------------------------------------------------------------------------
# feature files

def encode_feature_file(m: FeatureMatrix) -> bytes:
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, m.dim, m.n_frames,
                                  m.frame_rate_hz)
    return header + m.data.astype("<f4").tobytes()


def decode_feature_file(buf: bytes) -> FeatureMatrix:
    if len(buf) < _FEATURE_HEADER.size:
        if buf[:4] != FEATURE_MAGIC[:len(buf[:4])]:
            raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {FEATURE_MAGIC!r}")
        raise TruncatedError(f"feature header needs {_FEATURE_HEADER.size} bytes, got {len(buf)}")
    magic, version, _reserved, dim, n_frames, rate = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise VersionError(f"unsupported feature file version {version}")
    if dim == 0 or n_frames == 0:
        raise ParseError(f"feature file declares empty shape T={n_frames} D={dim}")
    if dim * n_frames > MAX_FEATURE_VALUES:
        raise DimOverflowError(f"declared shape T={n_frames} D={dim} exceeds {MAX_FEATURE_VALUES} values")
    need = dim * n_frames * 4
    payload = buf[_FEATURE_HEADER.size:]
    if len(payload) < need:
        raise TruncatedError(f"payload has {len(payload)} bytes, header declares {need}")
    if len(payload) > need:
        raise ParseError(f"{len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_frames, dim)
    if not np.isfinite(rate) or rate <= 0:
        raise ParseError(f"invalid frame rate {rate}")
    if not np.all(np.isfinite(data)):
        raise ParseError("payload contains non-finite values")
    return FeatureMatrix(data, float(rate))


def write_feature_file(path, m: FeatureMatrix) -> None:
    atomic_write_bytes(path, encode_feature_file(m))


def read_feature_file(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        return decode_feature_file(fh.read())


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the additive speech-like feature model.

    Each frame is ``centroid[content] + gain[speaker] * (A @ prosody) +
    offset[speaker] + noise``.  Prosody trajectories are whitened per
    utterance so every utterance has the same prosody covariance.
    """

    n_speakers: int = 20
    n_contents: int = 16
    speaker_offset_scale: float = 1.0
    speaker_gain_spread: float = 0.2
    prosody_dim: int = 4
    prosody_smoothness: float = 0.9
    noise_std: float = 0.0
    seed: int = 0
    dim: int = 32
    content_scale: float = 10.0
    prosody_scale: float = 1.0
    prosody_decay: float = 0.7

    def __post_init__(self):
        for name in ("n_speakers", "n_contents", "prosody_dim", "dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("speaker_offset_scale", "speaker_gain_spread", "noise_std",
                      "content_scale", "prosody_scale"):
            if not float(getattr(self, name)) >= 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not 0 <= self.prosody_smoothness < 1:
            raise InvalidInputError("prosody_smoothness must lie in [0, 1)")
        if not 0 < self.prosody_decay <= 1:
            raise InvalidInputError("prosody_decay must lie in (0, 1]")
        if self.prosody_dim > self.dim:
            raise InvalidInputError("prosody_dim cannot exceed dim")


@dataclass(frozen=True, eq=False)
class UtteranceLabels:
    speaker: int
    content: np.ndarray
    prosody: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """The fixed (utterance-independent) parameters drawn from a spec."""

    centroids: np.ndarray
    offsets: np.ndarray
    gains: np.ndarray
    mixing: np.ndarray
    prosody_scales: np.ndarray


def synthetic_world(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.default_rng([spec.seed, 0])
    centroids = rng.normal(0.0, spec.content_scale, (spec.n_contents, spec.dim))
    offsets = rng.normal(0.0, spec.speaker_offset_scale, (spec.n_speakers, spec.dim))
    gains = np.exp(spec.speaker_gain_spread * rng.normal(size=(spec.n_speakers, spec.dim)))
    q, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.prosody_dim)))
    scales = spec.prosody_scale * spec.prosody_decay ** np.arange(spec.prosody_dim)
    return SyntheticWorld(centroids, offsets, gains, q, scales)


def _prosody_trajectory(rng, spec: SyntheticSpec, n_frames: int, scales) -> np.ndarray:
    k = spec.prosody_dim
    eta = rng.normal(size=(n_frames, k))
    a = spec.prosody_smoothness
    p = np.empty_like(eta)
    p[0] = eta[0]
    for t in range(1, n_frames):
        p[t] = a * p[t - 1] + np.sqrt(1 - a * a) * eta[t]
    p -= p.mean(axis=0)
    if n_frames > k:
        cov = p.T @ p / n_frames
        evals, evecs = np.linalg.eigh(cov)
        if evals.min() > 1e-12:
            p = p @ (evecs / np.sqrt(evals)) @ evecs.T
    return p * scales


def _content_sequence(rng, n_contents: int, n_frames: int) -> np.ndarray:
    seq = np.empty(n_frames, dtype=np.int64)
    t = 0
    while t < n_frames:
        dur = int(rng.integers(2, 10))
        seq[t:t + dur] = rng.integers(n_contents)
        t += dur
    return seq


def generate_synthetic(spec: SyntheticSpec, n_utterances: int, frames_per_utterance: int,
                       frame_rate_hz: float = 50.0):
    """Generate ``n_utterances`` utterances, speakers assigned round-robin.

    Returns a list of ``(FeatureMatrix, UtteranceLabels)`` pairs.  The output
    is a pure function of the arguments.
    """
    if n_utterances < 1 or frames_per_utterance < 1:
        raise InvalidInputError("n_utterances and frames_per_utterance must be >= 1")
    world = synthetic_world(spec)
    out = []
    for u in range(n_utterances):
        rng = np.random.default_rng([spec.seed, 1, u])
        s = u % spec.n_speakers
        content = _content_sequence(rng, spec.n_contents, frames_per_utterance)
        prosody = _prosody_trajectory(rng, spec, frames_per_utterance, world.prosody_scales)
        frames = world.centroids[content] + world.offsets[s]
        if spec.prosody_scale > 0:
            frames = frames + world.gains[s] * (prosody @ world.mixing.T)
        if spec.noise_std > 0:
            frames = frames + rng.normal(0.0, spec.noise_std, frames.shape)
        out.append((FeatureMatrix(frames, frame_rate_hz), UtteranceLabels(s, content, prosody)))
    return out
