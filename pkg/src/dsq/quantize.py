"""Plain VQ, residual VQ and group-residual VQ over fixed codebooks.

All searches break ties towards the lowest index.  Inputs are frame-major
arrays (or :class:`~dsq.features.FeatureMatrix`); results carry plain numpy
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, nearest
from .errors import DimensionMismatchError, InvalidInputError


def _frames(x) -> np.ndarray:
    arr = np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


@dataclass(frozen=True, eq=False)
class VqResult:
    indices: np.ndarray
    quantized: np.ndarray


@dataclass(frozen=True, eq=False)
class RvqResult:
    indices: np.ndarray          # n_layers x T
    quantized_sum: np.ndarray    # T x K
    final_residual: np.ndarray   # T x K
    residual_energy: np.ndarray  # mean squared residual after each layer


@dataclass(frozen=True, eq=False)
class GrvqResult:
    indices: np.ndarray    # n_groups x n_layers
    quantized: np.ndarray  # concatenated group outputs


def vq_quantize(x, cb: Codebook) -> VqResult:
    frames = _frames(x)
    if frames.shape[1] != cb.input_dim:
        raise DimensionMismatchError(f"input has {frames.shape[1]} dims, codebook expects {cb.input_dim}")
    idx, _ = nearest(cb.lookup_space(frames), cb.entries, cb.l2_normalized_lookup)
    return VqResult(idx, cb.output(idx))


def vq_dequantize(indices, cb: Codebook) -> np.ndarray:
    return cb.output(indices)


def _check_stack(codebooks):
    if not codebooks:
        raise InvalidInputError("need at least one codebook")
    dims = {cb.input_dim for cb in codebooks}
    if len(dims) != 1:
        raise DimensionMismatchError(f"codebooks disagree on input width: {sorted(dims)}")
    return dims.pop()


def rvq_quantize(x, codebooks) -> RvqResult:
    """Quantize each layer's running residual and sum the layer outputs."""
    frames = _frames(x)
    width = _check_stack(codebooks)
    if frames.shape[1] != width:
        raise DimensionMismatchError(f"input has {frames.shape[1]} dims, codebooks expect {width}")
    residual = frames.copy()
    total = np.zeros_like(frames)
    indices = np.empty((len(codebooks), frames.shape[0]), dtype=np.int64)
    energy = np.empty(len(codebooks))
    for i, cb in enumerate(codebooks):
        step = vq_quantize(residual, cb)
        indices[i] = step.indices
        total += step.quantized
        residual -= step.quantized
        energy[i] = float(np.mean(np.sum(residual ** 2, axis=1)))
    return RvqResult(indices, total, residual, energy)


def rvq_dequantize(indices, codebooks) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None, :]
    if idx.shape[0] != len(codebooks):
        raise DimensionMismatchError(f"{idx.shape[0]} index rows for {len(codebooks)} codebooks")
    width = _check_stack(codebooks)
    total = np.zeros((idx.shape[1], width))
    for row, cb in zip(idx, codebooks):
        total += cb.output(row)
    return total


def _check_groups(groups, length: int):
    if not groups:
        raise InvalidInputError("need at least one group")
    n_groups = len(groups)
    if length % n_groups:
        raise DimensionMismatchError(f"vector length {length} is not divisible by {n_groups} groups")
    width = length // n_groups
    n_layers = {len(stack) for stack in groups}
    if len(n_layers) != 1:
        raise InvalidInputError("every group needs the same number of layers")
    for stack in groups:
        if _check_stack(stack) != width:
            raise DimensionMismatchError(f"group codebooks do not take slices of width {width}")
    return width


def grvq_quantize(x, groups) -> GrvqResult:
    """Split ``x`` into contiguous equal slices and RVQ each with its own stack.

    ``groups[g]`` is the list of per-layer codebooks of group ``g``; each
    codebook typically carries a low-dimensional lookup projection.
    """
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    width = _check_groups(groups, vec.size)
    indices = np.empty((len(groups), len(groups[0])), dtype=np.int64)
    out = np.empty_like(vec)
    for g, stack in enumerate(groups):
        res = rvq_quantize(vec[g * width:(g + 1) * width], stack)
        indices[g] = res.indices[:, 0]
        out[g * width:(g + 1) * width] = res.quantized_sum[0]
    return GrvqResult(indices, out)


def grvq_dequantize(indices, groups) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (len(groups), len(groups[0])):
        raise DimensionMismatchError(
            f"indices shape {idx.shape} does not match {len(groups)} groups x {len(groups[0])} layers")
    parts = [rvq_dequantize(idx[g][:, None], stack)[0] for g, stack in enumerate(groups)]
    return np.concatenate(parts)
