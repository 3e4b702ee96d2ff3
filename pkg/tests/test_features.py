import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsq import FeatureMatrix, SyntheticSpec, denormalize, generate_synthetic, instance_normalize
from dsq.errors import (
    BadMagicError,
    DimensionMismatchError,
    DimOverflowError,
    InvalidInputError,
    TruncatedError,
    VersionError,
)
from dsq.features import (
    STD_FLOOR,
    ChannelStats,
    decode_feature_file,
    encode_feature_file,
    read_feature_file,
    synthetic_world,
    write_feature_file,
)


def test_feature_matrix_rejects_bad_values():
    with pytest.raises(InvalidInputError):
        FeatureMatrix(np.array([[np.nan, 1.0]]))
    with pytest.raises(InvalidInputError):
        FeatureMatrix(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        FeatureMatrix(np.zeros((2, 3)), frame_rate_hz=0.0)


def test_two_point_normalization():
    normalized, stats = instance_normalize(np.array([[1.0], [3.0]]))
    assert stats.mean[0] == 2.0
    assert stats.std[0] == 1.0
    np.testing.assert_array_equal(normalized.data[:, 0], [-1.0, 1.0])


def test_constant_matrix_normalizes_to_zero():
    normalized, stats = instance_normalize(np.full((7, 3), 5.0))
    np.testing.assert_array_equal(normalized.data, 0.0)
    np.testing.assert_array_equal(stats.std, STD_FLOOR)


def test_single_frame_is_all_zero():
    normalized, stats = instance_normalize(np.array([[4.0, -2.0]]))
    np.testing.assert_array_equal(normalized.data, 0.0)
    np.testing.assert_array_equal(stats.std, STD_FLOOR)


def test_random_output_statistics(rng):
    x = rng.normal(3.0, 2.5, size=(100, 4))
    normalized, _ = instance_normalize(x)
    out = normalized.data
    # recompute the statistics directly from the output
    T = out.shape[0]
    means = out.sum(axis=0) / T
    stds = np.sqrt(((out - means) ** 2).sum(axis=0) / T)
    assert np.all(np.abs(means) < 1e-6)
    assert np.all(np.abs(stds - 1.0) < 1e-4)


def test_population_std_convention():
    _, stats = instance_normalize(np.array([[0.0], [2.0], [4.0]]))
    assert stats.std[0] == pytest.approx(np.sqrt(8.0 / 3.0))


def test_non_finite_input_rejected():
    with pytest.raises(InvalidInputError):
        instance_normalize(np.array([[1.0], [np.inf]]))


def test_denormalize_zeros_gives_mean():
    stats = ChannelStats(np.array([1.5, -2.0]), np.array([3.0, 0.5]))
    out = denormalize(np.zeros((4, 2)), stats)
    np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (4, 1)))


def test_denormalize_dim_mismatch():
    stats = ChannelStats(np.zeros(3), np.ones(3))
    with pytest.raises(DimensionMismatchError):
        denormalize(np.zeros((4, 2)), stats)


def test_round_trip_sweep(rng):
    worst = 0.0
    for _ in range(100):
        T, D = rng.integers(2, 40), rng.integers(1, 10)
        x = rng.normal(0, rng.uniform(0.1, 10), size=(T, D)) + rng.normal(0, 5, size=D)
        normalized, stats = instance_normalize(x)
        worst = max(worst, np.max(np.abs(denormalize(normalized, stats).data - x)))
    assert worst < 1e-4


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_round_trip_property(x):
    normalized, stats = instance_normalize(x)
    if np.all(stats.std > 1e-3):
        np.testing.assert_allclose(denormalize(normalized, stats).data, x, atol=1e-5, rtol=0)


# --------------------------------------------------------------------------
# feature files

def test_feature_file_round_trip(tmp_path, rng):
    m = FeatureMatrix(rng.normal(size=(8, 16)).astype(np.float32), 50.0)
    path = tmp_path / "x.ftr"
    write_feature_file(path, m)
    back = read_feature_file(path)
    assert back.data.tobytes() == m.data.tobytes()
    assert back.frame_rate_hz == 50.0
    assert back.data.dtype == m.data.dtype


def test_feature_file_layout():
    m = FeatureMatrix(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), 25.0)
    buf = encode_feature_file(m)
    assert buf[:4] == b"FTR1"
    assert buf[4:6] == b"\x01\x00"
    assert int.from_bytes(buf[6:10], "little") == 2
    assert int.from_bytes(buf[10:14], "little") == 3
    assert np.frombuffer(buf[14:18], "<f4")[0] == 25.0
    np.testing.assert_array_equal(np.frombuffer(buf[18:], "<f4"), [1, 2, 3, 4, 5, 6])


def test_wrong_magic_is_named():
    buf = bytearray(encode_feature_file(FeatureMatrix(np.ones((2, 2)))))
    buf[:4] = b"NOPE"
    with pytest.raises(BadMagicError, match="NOPE"):
        decode_feature_file(bytes(buf))


def test_truncated_payload():
    buf = encode_feature_file(FeatureMatrix(np.ones((4, 3))))
    with pytest.raises(TruncatedError):
        decode_feature_file(buf[:-5])
    with pytest.raises(TruncatedError):
        decode_feature_file(buf[:9])


def test_dim_overflow():
    import struct
    buf = struct.pack("<4sBBIIf", b"FTR1", 1, 0, 2**20, 2**20, 50.0)
    with pytest.raises(DimOverflowError):
        decode_feature_file(buf)


def test_version_mismatch():
    buf = bytearray(encode_feature_file(FeatureMatrix(np.ones((2, 2)))))
    buf[4] = 9
    with pytest.raises(VersionError):
        decode_feature_file(bytes(buf))


# --------------------------------------------------------------------------
# synthetic generator

def test_pure_content_frames_equal_centroids():
    spec = SyntheticSpec(noise_std=0.0, speaker_offset_scale=0.0, prosody_scale=0.0, seed=5)
    world = synthetic_world(spec)
    for W, lab in generate_synthetic(spec, 3, 50):
        np.testing.assert_array_equal(W.data, world.centroids[lab.content])


def test_generator_is_deterministic():
    spec = SyntheticSpec(noise_std=0.3, seed=11)
    a = generate_synthetic(spec, 4, 30)
    b = generate_synthetic(spec, 4, 30)
    for (wa, la), (wb, lb) in zip(a, b):
        assert wa.data.tobytes() == wb.data.tobytes()
        np.testing.assert_array_equal(la.content, lb.content)
        np.testing.assert_array_equal(la.prosody, lb.prosody)


def test_different_seeds_differ():
    a = generate_synthetic(SyntheticSpec(seed=1), 1, 30)[0][0].data
    b = generate_synthetic(SyntheticSpec(seed=2), 1, 30)[0][0].data
    assert not np.array_equal(a, b)


def test_well_separated_centroids_recover_content():
    spec = SyntheticSpec(noise_std=0.05, speaker_offset_scale=0.1, prosody_scale=0.1,
                         content_scale=10.0, seed=8)
    world = synthetic_world(spec)
    cents = world.centroids
    pair = np.sqrt(((cents[:, None] - cents[None]) ** 2).sum(-1))
    min_sep = pair[np.triu_indices(len(cents), 1)].min()
    assert min_sep > 6 * (spec.speaker_offset_scale * np.sqrt(spec.dim) + spec.noise_std * np.sqrt(spec.dim))
    for W, lab in generate_synthetic(spec, 5, 80):
        # brute-force nearest centroid
        guess = [min(range(len(cents)), key=lambda j: np.sum((w - cents[j]) ** 2)) for w in W.data]
        np.testing.assert_array_equal(guess, lab.content)


def test_labels_and_speaker_assignment():
    spec = SyntheticSpec(n_speakers=3)
    corpus = generate_synthetic(spec, 7, 20)
    assert [lab.speaker for _, lab in corpus] == [0, 1, 2, 0, 1, 2, 0]
    for W, lab in corpus:
        assert W.data.shape == (20, spec.dim)
        assert lab.content.shape == (20,)
        assert lab.prosody.shape == (20, spec.prosody_dim)


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        SyntheticSpec(n_speakers=0)
    with pytest.raises(InvalidInputError):
        SyntheticSpec(noise_std=-1.0)
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticSpec(), 0, 10)
