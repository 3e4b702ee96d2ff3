"""Bit-exact container for code streams, plus bitrate accounting.

Layout (all integers little-endian)::

    "DSQ1" | version u8 | flags u8 | config_hash u64 | T u32 | frame_rate f32
    | n_streams u8 | n_streams x (codebook_hash u64, width u8, count u32)
    | payload: each stream MSB-first, fixed width, padded to a byte
    | trailer: continuous prosody (u32 F, T*F f32) and/or speaker (u32 n, n f32)
    | crc32 u32 over everything before it

Flags: bit 0 prosody quantized, bit 1 speaker quantized, bit 2 std included.
Streams appear in the order content, prosody (layer-major), speaker
(group-major, then layer); absent streams are simply not listed.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codebook import symbol_width
from .config import QuantizerConfig
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    DimensionMismatchError,
    IncompatibleCodebookError,
    InvalidInputError,
    ParseError,
    TruncatedError,
    VersionError,
)
from .pipeline import DisentangledCodes, FittedPipeline, check_codes

MAGIC = b"DSQ1"
VERSION = 1
FLAG_PROSODY = 1
FLAG_SPEAKER = 2
FLAG_SIGMA = 4

_HEAD = struct.Struct("<4sBBQIfB")
_DESC = struct.Struct("<QBI")
_MAX_WIDTH = 32
_MAX_SYMBOLS = 2**28


def pack_symbols(symbols, width: int) -> bytes:
    """Fixed-width MSB-first packing, zero-padded to a whole byte."""
    sym = np.asarray(symbols, dtype=np.uint64).reshape(-1)
    if width == 0 or sym.size == 0:
        if sym.size and sym.max() != 0:
            raise InvalidInputError("non-zero symbol in a zero-width stream")
        return b""
    if sym.size and int(sym.max()) >> width:
        raise InvalidInputError(f"symbol {int(sym.max())} does not fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((sym[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_symbols(buf: bytes, width: int, count: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[:count * width]
    weights = (np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64))
    return (bits.reshape(count, width).astype(np.uint64) @ weights).astype(np.int64)


def stream_bytes(width: int, count: int) -> int:
    return (width * count + 7) // 8


@dataclass(frozen=True, eq=False)
class StreamDescriptor:
    name: str
    codebook_hash: int
    width: int
    count: int
    symbols: np.ndarray = field(repr=False)

    @property
    def payload_bits(self) -> int:
        return self.width * self.count


@dataclass(frozen=True, eq=False)
class Bitstream:
    config_hash: int
    n_frames: int
    frame_rate_hz: float
    flags: int
    streams: list
    prosody_values: np.ndarray | None = None
    speaker_values: np.ndarray | None = None
    version: int = VERSION

    @property
    def prosody_quantized(self) -> bool:
        return bool(self.flags & FLAG_PROSODY)

    @property
    def speaker_quantized(self) -> bool:
        return bool(self.flags & FLAG_SPEAKER)

    def stream(self, name: str) -> StreamDescriptor | None:
        for s in self.streams:
            if s.name == name:
                return s
        return None

    def to_bytes(self) -> bytes:
        out = [_HEAD.pack(MAGIC, self.version, self.flags, self.config_hash, self.n_frames,
                          self.frame_rate_hz, len(self.streams))]
        for s in self.streams:
            out.append(_DESC.pack(s.codebook_hash, s.width, s.count))
        for s in self.streams:
            out.append(pack_symbols(s.symbols, s.width))
        if self.prosody_values is not None:
            pv = np.asarray(self.prosody_values, dtype="<f4")
            out.append(struct.pack("<I", pv.shape[1]) + pv.tobytes())
        if self.speaker_values is not None:
            sv = np.asarray(self.speaker_values, dtype="<f4").reshape(-1)
            out.append(struct.pack("<I", sv.size) + sv.tobytes())
        body = b"".join(out)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, buf: bytes) -> Bitstream:
        buf = bytes(buf)
        if buf[:4] != MAGIC:
            raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        if len(buf) < _HEAD.size + 4:
            raise TruncatedError(f"bitstream of {len(buf)} bytes is shorter than its header")
        (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
        body = buf[:-4]
        if zlib.crc32(body) != stored_crc:
            raise ChecksumError("bitstream CRC mismatch")
        _, version, flags, cfg_hash, n_frames, rate, n_streams = _HEAD.unpack_from(body)
        if version != VERSION:
            raise VersionError(f"unsupported bitstream version {version}")
        if flags & ~(FLAG_PROSODY | FLAG_SPEAKER | FLAG_SIGMA):
            raise ParseError(f"unknown flag bits {flags:#x}")
        if not (math.isfinite(rate) and rate > 0):
            raise ParseError(f"invalid frame rate {rate}")
        expected = 1 + bool(flags & FLAG_PROSODY) + bool(flags & FLAG_SPEAKER)
        if n_streams != expected:
            raise ParseError(f"flags imply {expected} streams, header lists {n_streams}")
        pos = _HEAD.size
        if pos + n_streams * _DESC.size > len(body):
            raise TruncatedError("bitstream truncated in stream descriptors")
        names = ["content"]
        if flags & FLAG_PROSODY:
            names.append("prosody")
        if flags & FLAG_SPEAKER:
            names.append("speaker")
        descs = []
        for name in names:
            h, width, count = _DESC.unpack_from(body, pos)
            pos += _DESC.size
            if width > _MAX_WIDTH:
                raise ParseError(f"{name} stream symbol width {width} exceeds {_MAX_WIDTH}")
            if count > _MAX_SYMBOLS:
                raise ParseError(f"{name} stream declares {count} symbols")
            descs.append((name, h, width, count))
        if descs[0][3] != n_frames:
            raise ParseError(f"content stream has {descs[0][3]} symbols for T={n_frames}")
        if flags & FLAG_PROSODY:
            count = descs[1][3]
            if (count % n_frames if n_frames else count):
                raise ParseError(f"prosody symbol count {count} is not a multiple of T={n_frames}")
        streams = []
        for name, h, width, count in descs:
            nbytes = stream_bytes(width, count)
            if pos + nbytes > len(body):
                raise TruncatedError(f"bitstream truncated in {name} payload")
            symbols = unpack_symbols(body[pos:pos + nbytes], width, count)
            pos += nbytes
            streams.append(StreamDescriptor(name, h, width, count, symbols))
        prosody_values = speaker_values = None
        if not flags & FLAG_PROSODY:
            prosody_values, pos = _read_floats(body, pos, "prosody", n_frames)
        if not flags & FLAG_SPEAKER:
            speaker_values, pos = _read_floats(body, pos, "speaker")
        if pos != len(body):
            raise ParseError(f"{len(body) - pos} unexpected bytes after payload")
        return cls(cfg_hash, n_frames, float(rate), flags, streams, prosody_values, speaker_values, version)

    def payload_bits(self) -> int:
        return sum(s.payload_bits for s in self.streams)

    def payload_bytes(self) -> int:
        return sum(stream_bytes(s.width, s.count) for s in self.streams)


def _read_floats(body: bytes, pos: int, name: str, n_frames: int | None = None):
    """Read a ``u32 n`` prefixed float32 block.

    For per-frame blocks ``n`` is the width and ``n_frames * n`` values
    follow; otherwise ``n`` values follow.
    """
    if pos + 4 > len(body):
        raise TruncatedError(f"bitstream truncated before continuous {name} trailer")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    count = n if n_frames is None else n * n_frames
    if pos + 4 * count > len(body):
        raise TruncatedError(f"bitstream truncated in continuous {name} trailer")
    vals = np.frombuffer(body, dtype="<f4", count=count, offset=pos).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"continuous {name} trailer has non-finite values")
    if n_frames is not None:
        vals = vals.reshape(n_frames, n)
    return vals, pos + 4 * count


def _widths(cfg: QuantizerConfig):
    return (symbol_width(cfg.content_codebook_size), symbol_width(cfg.prosody_codebook_size),
            symbol_width(cfg.speaker_codebook_size))


def pack(codes: DisentangledCodes, p: FittedPipeline) -> Bitstream:
    check_codes(codes, p)
    cfg = p.config
    hashes = p.stream_hashes()
    wc, wp, ws = _widths(cfg)
    flags = FLAG_SIGMA if cfg.include_sigma else 0
    streams = [StreamDescriptor("content", hashes["content"], wc, codes.n_frames, codes.content)]
    prosody_values = speaker_values = None
    if codes.prosody_quantized:
        flags |= FLAG_PROSODY
        sym = codes.prosody_indices.reshape(-1)  # layer-major
        streams.append(StreamDescriptor("prosody", hashes["prosody"], wp, sym.size, sym))
    else:
        prosody_values = codes.prosody_values
    if codes.speaker_quantized:
        flags |= FLAG_SPEAKER
        sym = codes.speaker_indices.reshape(-1)  # group-major
        streams.append(StreamDescriptor("speaker", hashes["speaker"], ws, sym.size, sym))
    else:
        speaker_values = codes.speaker_values
    return Bitstream(cfg.hash, codes.n_frames, float(codes.frame_rate_hz), flags, streams,
                     prosody_values, speaker_values)


def unpack(bs, p: FittedPipeline) -> DisentangledCodes:
    """Rebuild codes from a bitstream (or its bytes), checking compatibility."""
    if not isinstance(bs, Bitstream):
        bs = Bitstream.from_bytes(bs)
    cfg = p.config
    if bs.config_hash != cfg.hash:
        raise ConfigMismatchError(
            f"bitstream config {bs.config_hash:016x} does not match pipeline config {cfg.hash:016x}")
    if bs.prosody_quantized != cfg.quantize_prosody or bs.speaker_quantized != cfg.quantize_speaker:
        raise ConfigMismatchError(f"bitstream streams do not match variant {cfg.variant}")
    hashes = p.stream_hashes()
    wc, wp, ws = _widths(cfg)
    sizes = {"content": cfg.content_codebook_size, "prosody": cfg.prosody_codebook_size,
             "speaker": cfg.speaker_codebook_size}
    widths = {"content": wc, "prosody": wp, "speaker": ws}
    for s in bs.streams:
        if s.codebook_hash != hashes[s.name]:
            raise IncompatibleCodebookError(
                f"{s.name} stream was coded with codebooks {s.codebook_hash:016x}, "
                f"pipeline has {hashes[s.name]:016x}")
        if s.width != widths[s.name]:
            raise ParseError(f"{s.name} stream width {s.width} != {widths[s.name]}")
        if s.count and s.symbols.max() >= sizes[s.name]:
            raise ParseError(f"{s.name} stream has symbol {int(s.symbols.max())} >= codebook size {sizes[s.name]}")
    kw = {}
    T = bs.n_frames
    if bs.prosody_quantized:
        s = bs.stream("prosody")
        if s.count != cfg.prosody_layers * T:
            raise DimensionMismatchError(f"prosody stream has {s.count} symbols, expected {cfg.prosody_layers * T}")
        kw["prosody_indices"] = s.symbols.reshape(cfg.prosody_layers, T)
    else:
        pv = bs.prosody_values
        if pv.shape[1] != cfg.prosody_dim:
            raise DimensionMismatchError(f"prosody trailer has width {pv.shape[1]}, expected {cfg.prosody_dim}")
        kw["prosody_values"] = pv
    if bs.speaker_quantized:
        s = bs.stream("speaker")
        if s.count != cfg.speaker_groups * cfg.speaker_layers:
            raise DimensionMismatchError(f"speaker stream has {s.count} symbols")
        kw["speaker_indices"] = s.symbols.reshape(cfg.speaker_groups, cfg.speaker_layers)
    else:
        if bs.speaker_values.size != cfg.speaker_dim:
            raise DimensionMismatchError(f"speaker trailer has {bs.speaker_values.size} values")
        kw["speaker_values"] = bs.speaker_values
    return DisentangledCodes(bs.stream("content").symbols, cfg.hash, bs.frame_rate_hz, **kw)


def pack_bytes(codes: DisentangledCodes, p: FittedPipeline) -> bytes:
    return pack(codes, p).to_bytes()


# --------------------------------------------------------------------------
# bitrate accounting

@dataclass(frozen=True)
class BitrateReport:
    content_bps: float
    prosody_bps: float | None
    speaker_bits_per_utterance: int | None
    content_entropy_bps: float
    prosody_entropy_bps: float | None
    speaker_entropy_bits: float | None
    prosody_continuous_dims: int | None = None
    speaker_continuous_dims: int | None = None

    @property
    def content_kbps(self) -> float:
        return self.content_bps / 1000

    @property
    def prosody_kbps(self) -> float | None:
        return None if self.prosody_bps is None else self.prosody_bps / 1000

    @property
    def speaker_kbpu(self) -> float | None:
        b = self.speaker_bits_per_utterance
        return None if b is None else b / 1000

    def describe(self) -> str:
        parts = [f"content {self.content_kbps:.2f} kb/s"]
        if self.prosody_bps is not None:
            parts.append(f"prosody {self.prosody_kbps:.2f} kb/s")
        else:
            parts.append(f"prosody continuous {self.prosody_continuous_dims} dim/frame")
        if self.speaker_bits_per_utterance is not None:
            parts.append(f"speaker {self.speaker_bits_per_utterance} bits/u ({self.speaker_kbpu:.2f} kb/u)")
        else:
            parts.append(f"speaker continuous {self.speaker_continuous_dims} dim/u")
        return ", ".join(parts)


def bitrate(cfg: QuantizerConfig) -> BitrateReport:
    """Bitrates implied by the config alone under fixed-width packing."""
    rate = cfg.frame_rate_hz
    wc, wp, ws = _widths(cfg)
    content = rate * wc
    content_h = rate * math.log2(cfg.content_codebook_size)
    if cfg.quantize_prosody:
        prosody = rate * cfg.prosody_layers * wp
        prosody_h = rate * cfg.prosody_layers * math.log2(cfg.prosody_codebook_size)
        p_dims = None
    else:
        prosody = prosody_h = None
        p_dims = cfg.prosody_dim
    if cfg.quantize_speaker:
        n = cfg.speaker_groups * cfg.speaker_layers
        speaker = n * ws
        speaker_h = n * math.log2(cfg.speaker_codebook_size)
        s_dims = None
    else:
        speaker = speaker_h = None
        s_dims = cfg.speaker_dim
    return BitrateReport(content, prosody, speaker, content_h, prosody_h, speaker_h, p_dims, s_dims)
