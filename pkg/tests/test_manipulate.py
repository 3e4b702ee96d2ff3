import numpy as np
import pytest

from dsq import decode, encode, flatten_prosody, swap_speaker
from dsq.errors import ConfigMismatchError, InvalidInputError
from dsq.manipulate import resolve_frame
from dsq.pipeline import dequantize_streams


@pytest.fixture(scope="module")
def pair(fitted, small_corpus):
    return encode(small_corpus[0][0], fitted), encode(small_corpus[1][0], fitted)


def test_swap_with_self_is_identity(pair):
    a, _ = pair
    assert swap_speaker(a, a).equals(a)


def test_swap_back_restores(pair):
    a, b = pair
    assert swap_speaker(swap_speaker(a, b), a).equals(a)


def test_swap_isolates_streams(pair):
    a, b = pair
    out = swap_speaker(a, b)
    np.testing.assert_array_equal(out.content, a.content)
    np.testing.assert_array_equal(out.prosody_indices, a.prosody_indices)
    np.testing.assert_array_equal(out.speaker_indices, b.speaker_indices)


def test_swap_continuous_variant(fitted, small_corpus):
    q = fitted.with_variant("skq2+sigma")
    a, b = encode(small_corpus[0][0], q), encode(small_corpus[3][0], q)
    out = swap_speaker(a, b)
    np.testing.assert_array_equal(out.speaker_values, b.speaker_values)
    np.testing.assert_array_equal(out.prosody_indices, a.prosody_indices)


def test_swap_config_mismatch(fitted, small_corpus, pair):
    a, _ = pair
    other = encode(small_corpus[1][0], fitted.with_variant("skq2+sigma"))
    with pytest.raises(ConfigMismatchError):
        swap_speaker(a, other)


def test_swap_moves_decoded_mean_to_reference(fitted, small_corpus, pair):
    a, b = pair
    s_b = dequantize_streams(b, fitted)
    out = swap_speaker(a, b)
    decoded = decode(out, fitted).data
    s_out = dequantize_streams(out, fitted)
    # time-mean of the decoded residual is the reference mean plus the
    # std-scaled mean of the (source) prosody term
    residual_mean = (decoded - s_out.content).mean(axis=0)
    prosody_term = (s_b.std * (s_out.prosody @ fitted.projector.matrix)).mean(axis=0)
    np.testing.assert_allclose(residual_mean - prosody_term, s_b.mean, atol=1e-10)
    np.testing.assert_array_equal(out.content, a.content)


def test_resolve_frame():
    assert resolve_frame("mid", 9) == 4
    assert resolve_frame("7", 9) == 7
    assert resolve_frame(3, 9) == 3
    with pytest.raises(InvalidInputError):
        resolve_frame("middle", 9)


def test_flatten_from_end_is_noop(pair):
    a, _ = pair
    assert flatten_prosody(a, a.n_frames).equals(a)


def test_flatten_everything_holds_one_code(fitted, pair):
    a, _ = pair
    out = flatten_prosody(a, 0, 17)
    np.testing.assert_array_equal(out.prosody_indices, np.repeat(a.prosody_indices[:, 17:18], a.n_frames, axis=1))
    term = dequantize_streams(out, fitted).prosody @ fitted.projector.matrix
    assert np.max(np.var(term, axis=0)) < 1e-20


def test_flatten_alters_only_suffix(pair):
    a, _ = pair
    T = a.n_frames
    out = flatten_prosody(a, "mid", "mid")
    np.testing.assert_array_equal(out.prosody_indices[:, :T // 2], a.prosody_indices[:, :T // 2])
    assert np.all(out.prosody_indices[:, T // 2:] == a.prosody_indices[:, T // 2:T // 2 + 1])
    np.testing.assert_array_equal(out.content, a.content)
    np.testing.assert_array_equal(out.speaker_indices, a.speaker_indices)


def test_midpoint_flatten_variance(fitted, pair):
    a, _ = pair
    T = a.n_frames
    out = flatten_prosody(a, "mid")
    s = dequantize_streams(out, fitted)
    term = s.std * (s.prosody @ fitted.projector.matrix)
    assert np.max(np.var(term[T // 2:], axis=0)) < 1e-10
    assert np.min(np.var(term[:T // 2], axis=0)) > 1e-3


def test_flatten_continuous_prosody(fitted, small_corpus):
    q = fitted.with_variant("skq+sigma")
    a = encode(small_corpus[0][0], q)
    out = flatten_prosody(a, 10, 4)
    np.testing.assert_array_equal(out.prosody_values[10:], np.tile(a.prosody_values[4], (a.n_frames - 10, 1)))
    np.testing.assert_array_equal(out.prosody_values[:10], a.prosody_values[:10])


def test_flatten_range_errors(pair):
    a, _ = pair
    with pytest.raises(InvalidInputError):
        flatten_prosody(a, a.n_frames + 1)
    with pytest.raises(InvalidInputError):
        flatten_prosody(a, 0, a.n_frames)
    with pytest.raises(InvalidInputError):
        flatten_prosody(a, -1)
