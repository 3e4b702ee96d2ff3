"""Code-domain edits: speaker swap and prosody flattening."""

from __future__ import annotations

import numpy as np

from .errors import ConfigMismatchError, InvalidInputError
from .pipeline import DisentangledCodes


def swap_speaker(source: DisentangledCodes, reference: DisentangledCodes) -> DisentangledCodes:
    """Replace the speaker stream of ``source`` with that of ``reference``.

    Works for quantized and continuous speaker streams alike; content and
    prosody are carried over untouched.
    """
    if source.config_hash != reference.config_hash:
        raise ConfigMismatchError(
            f"source config {source.config_hash:016x} != reference config {reference.config_hash:016x}")
    if source.speaker_quantized != reference.speaker_quantized:
        raise ConfigMismatchError("source and reference disagree on speaker quantization")
    if reference.speaker_quantized:
        return source.replace(speaker_indices=reference.speaker_indices.copy(), speaker_values=None)
    return source.replace(speaker_values=reference.speaker_values.copy(), speaker_indices=None)


def resolve_frame(spec, n_frames: int) -> int:
    """Frame index from an int or the string ``"mid"`` (``T // 2``)."""
    if isinstance(spec, str):
        if spec.strip().lower() == "mid":
            return n_frames // 2
        try:
            return int(spec)
        except ValueError:
            raise InvalidInputError(f"frame must be an integer or 'mid', got {spec!r}") from None
    return int(spec)


def flatten_prosody(codes: DisentangledCodes, from_frame, hold_frame=None) -> DisentangledCodes:
    """Hold the prosody code of ``hold_frame`` on every frame ``>= from_frame``.

    ``hold_frame`` defaults to ``from_frame``.  Continuous prosody is held
    the same way.
    """
    T = codes.n_frames
    start = resolve_frame(from_frame, T)
    hold = start if hold_frame is None else resolve_frame(hold_frame, T)
    if not 0 <= start <= T:
        raise InvalidInputError(f"from_frame {start} outside [0, {T}]")
    if start == T and hold_frame is None:
        return codes.replace()
    if not 0 <= hold < T:
        raise InvalidInputError(f"hold_frame {hold} outside [0, {T})")
    if codes.prosody_quantized:
        idx = codes.prosody_indices.copy()
        idx[:, start:] = idx[:, hold:hold + 1]
        return codes.replace(prosody_indices=idx)
    vals = np.array(codes.prosody_values, copy=True)
    vals[start:] = vals[hold]
    return codes.replace(prosody_values=vals)
