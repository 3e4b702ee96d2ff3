import struct
import zlib

import numpy as np
import pytest
from conftest import random_codes, random_pipeline
from hypothesis import given, settings
from hypothesis import strategies as st

from dsq import Bitstream, QuantizerConfig, bitrate, pack, unpack
from dsq.bitstream import pack_bytes, pack_symbols, unpack_symbols
from dsq.config import PRESETS
from dsq.errors import (
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    DsqError,
    IncompatibleCodebookError,
    ParseError,
    TruncatedError,
    VersionError,
)
from dsq.pipeline import DisentangledCodes

SMALL = QuantizerConfig(dim=8, prosody_dim=2, content_codebook_size=10, prosody_layers=2,
                        prosody_codebook_size=5, speaker_groups=2, speaker_layers=3,
                        speaker_codebook_size=7, lookup_dim=4)


def bit_string_oracle(symbols, width):
    bits = "".join(format(int(s), f"0{width}b") for s in symbols)
    bits += "0" * (-len(bits) % 8)
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


@pytest.mark.parametrize("width", [1, 3, 7, 8, 10, 13, 16])
def test_pack_symbols_matches_bit_string(width, rng):
    sym = rng.integers(0, 2 ** width, 37)
    assert pack_symbols(sym, width) == bit_string_oracle(sym, width)
    np.testing.assert_array_equal(unpack_symbols(pack_symbols(sym, width), width, 37), sym)


def test_msb_first():
    assert pack_symbols([1, 2], 2) == bytes([0b01100000])
    assert pack_symbols([1000], 10) == bytes([0b11111010, 0b00000000])


def test_symbol_overflow_rejected():
    with pytest.raises(DsqError):
        pack_symbols([8], 3)


def test_round_trip_all_quantized():
    p = random_pipeline(SMALL)
    codes = random_codes(p, 33)
    back = unpack(pack_bytes(codes, p), p)
    assert back.equals(codes)


@pytest.mark.parametrize("variant", ["skq", "skq+sigma", "skq2+sigma"])
def test_round_trip_continuous_trailers(variant):
    p = random_pipeline(SMALL.replace(variant=variant))
    codes = random_codes(p, 12, seed=3)
    back = unpack(pack_bytes(codes, p), p)
    assert back.equals(codes)


def test_payload_length_formula():
    p = random_pipeline(SMALL)
    T = 21
    bs = pack(random_codes(p, T), p)
    bc, bp, bsp = 4, 3, 3  # ceil(log2) of 10, 5, 7
    assert bs.payload_bits() == T * bc + 2 * T * bp + 2 * 3 * bsp
    expected_bytes = sum((b + 7) // 8 for b in (T * bc, 2 * T * bp, 6 * bsp))
    assert bs.payload_bytes() == expected_bytes
    raw = bs.to_bytes()
    header = 4 + 1 + 1 + 8 + 4 + 4 + 1 + 3 * (8 + 1 + 4)
    assert len(raw) == header + expected_bytes + 4


def test_empty_content_stream():
    p = random_pipeline(SMALL)
    codes = DisentangledCodes(np.zeros(0, dtype=int), SMALL.hash, 50.0,
                              prosody_indices=np.zeros((2, 0), dtype=int),
                              speaker_indices=np.ones((2, 3), dtype=int))
    bs = pack(codes, p)
    assert bs.stream("content").count == 0 and bs.stream("prosody").count == 0
    raw = bs.to_bytes()
    header = 4 + 1 + 1 + 8 + 4 + 4 + 1 + 3 * (8 + 1 + 4)
    assert len(raw) == header + (6 * 3 + 7) // 8 + 4
    assert unpack(raw, p).equals(codes)


def test_header_fields():
    p = random_pipeline(SMALL)
    raw = pack_bytes(random_codes(p, 5), p)
    magic, version, flags, cfg_hash, T, rate, n = struct.unpack_from("<4sBBQIfB", raw)
    assert (magic, version, flags, cfg_hash, T, rate, n) == (b"DSQ1", 1, 7, SMALL.hash, 5, 50.0, 3)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_hash_mismatch_is_incompatible():
    p = random_pipeline(SMALL, seed=1)
    other = random_pipeline(SMALL, seed=2)
    raw = pack_bytes(random_codes(p, 9), p)
    with pytest.raises(IncompatibleCodebookError):
        unpack(raw, other)


def test_config_mismatch():
    p = random_pipeline(SMALL)
    q = random_pipeline(SMALL.replace(seed=5))
    with pytest.raises(ConfigMismatchError):
        unpack(pack_bytes(random_codes(p, 4), p), q)


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_structured_errors():
    p = random_pipeline(SMALL)
    raw = pack_bytes(random_codes(p, 9), p)
    with pytest.raises(BadMagicError):
        Bitstream.from_bytes(b"DSQ2" + raw[4:])
    with pytest.raises(ChecksumError):
        Bitstream.from_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(VersionError):
        Bitstream.from_bytes(_reseal(raw[:4] + b"\x02" + raw[5:-4]))
    with pytest.raises(TruncatedError):
        Bitstream.from_bytes(_reseal(raw[:-9]))
    with pytest.raises(ParseError):
        Bitstream.from_bytes(_reseal(raw[:-4] + b"\x00"))


def test_fuzz_random_bytes():
    rng = np.random.default_rng(0)
    p = random_pipeline(SMALL)
    valid = pack_bytes(random_codes(p, 6), p)
    for i in range(2000):
        if i % 2:
            buf = rng.integers(0, 256, int(rng.integers(0, 80)), dtype=np.uint8).tobytes()
            if i % 4 == 1:
                buf = b"DSQ1" + buf
        else:
            b = bytearray(valid)
            for _ in range(int(rng.integers(1, 4))):
                b[int(rng.integers(len(b)))] = int(rng.integers(256))
            buf = _reseal(bytes(b[:-4])) if i % 4 == 0 else bytes(b)
        try:
            unpack(buf, p)
        except DsqError:
            pass


def test_bitrate_full_size_preset():
    rep = bitrate(PRESETS["paper-skq3"])
    assert rep.content_bps == 500 and rep.content_kbps == 0.50
    assert rep.prosody_bps == 1000 and rep.prosody_kbps == 1.00
    assert rep.speaker_bits_per_utterance == 1280 and rep.speaker_kbpu == 1.28
    assert rep.content_entropy_bps == pytest.approx(50 * np.log2(1000))
    assert "0.50 kb/s" in rep.describe() and "1280 bits/u" in rep.describe()


def test_bitrate_continuous_variant():
    rep = bitrate(PRESETS["paper-skq3"].replace(variant="skq+sigma"))
    assert rep.prosody_bps is None and rep.speaker_bits_per_utterance is None
    assert rep.prosody_continuous_dims == 8 and rep.speaker_continuous_dims == 2048


def test_bitrate_reports_measured_bits(rng):
    cfg = SMALL
    p = random_pipeline(cfg)
    T = 50
    bs = pack(random_codes(p, T), p)
    rep = bitrate(cfg)
    assert bs.stream("content").payload_bits == rep.content_bps * T / cfg.frame_rate_hz
    assert bs.stream("prosody").payload_bits == rep.prosody_bps * T / cfg.frame_rate_hz
    assert bs.stream("speaker").payload_bits == rep.speaker_bits_per_utterance


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 40), st.sampled_from([1, 2, 4]),
       st.integers(1, 3), st.integers(2, 20), st.integers(0, 30), st.integers(0, 10**6),
       st.sampled_from(["skq+sigma", "skq2+sigma", "skq3+sigma"]))
def test_bijection_random_configs(pl, pj, groups, sl, sj, T, seed, variant):
    cfg = QuantizerConfig(dim=8, prosody_dim=2, content_codebook_size=int(pj) + 3, prosody_layers=pl,
                          prosody_codebook_size=pj, speaker_groups=groups, speaker_layers=sl,
                          speaker_codebook_size=sj, lookup_dim=2, variant=variant, seed=seed % 7)
    p = random_pipeline(cfg, seed)
    codes = random_codes(p, T, seed)
    raw = pack_bytes(codes, p)
    assert unpack(raw, p).equals(codes)
    assert pack_bytes(unpack(raw, p), p) == raw
