"""The disentangling quantizer: content, prosody and speaker streams.

Encoding a feature matrix ``W``:

* content: nearest entry of the frozen content codebook per frame (``C``)
* residual ``R = W - C`` is instance-normalized along time; the per-dim
  mean and std form the time-invariant speaker vector
* prosody: the normalized residual projected onto ``F`` principal axes,
  optionally residual-quantized in the unit-normalized space
* speaker: ``concat(mean, std)``, optionally group-residual-quantized

Decoding is the algebraic inverse ``C + std * unproject(P) + mean``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import (
    Codebook,
    KMeansConfig,
    codebook_from_bytes,
    codebook_to_bytes,
    fit_residual_stack,
    fnv1a64,
    principal_axes,
    random_orthonormal,
)
from .config import QuantizerConfig
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    DimensionMismatchError,
    IncompatibleCodebookError,
    InfeasibleError,
    InvalidInputError,
    NotFittedError,
    ParseError,
    TruncatedError,
    VersionError,
)
from .features import FeatureMatrix, channel_stats
from .quantize import grvq_dequantize, grvq_quantize, rvq_dequantize, rvq_quantize, vq_quantize


@dataclass(frozen=True, eq=False)
class ProsodyProjector:
    """``F x D`` projection with orthonormal rows, fitted by PCA."""

    matrix: np.ndarray
    explained_variance_ratio: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64).astype(np.float32), dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if self.explained_variance_ratio is None:
            object.__setattr__(self, "explained_variance_ratio", np.full(m.shape[0], np.nan))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def project(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def unproject(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.matrix


def fit_projector(frames, n_components: int) -> ProsodyProjector:
    """Top principal axes of the (already zero-mean) pooled frames."""
    X = np.asarray(frames, dtype=np.float64)
    comps = principal_axes(X, n_components)
    total = float(np.einsum("ij,ij->", X, X))
    captured = np.sum((X @ comps.T) ** 2, axis=0)
    ratio = captured / total if total > 0 else np.zeros(n_components)
    return ProsodyProjector(comps, ratio)


@dataclass(frozen=True, eq=False)
class DisentangledCodes:
    """Code streams of one utterance.

    Quantized streams hold integer indices (prosody ``L_p x T``, speaker
    ``G x L_s``); unquantized variants hold continuous values instead
    (prosody ``T x F``, speaker vector).
    """

    content: np.ndarray
    config_hash: int
    frame_rate_hz: float
    prosody_indices: np.ndarray | None = None
    prosody_values: np.ndarray | None = None
    speaker_indices: np.ndarray | None = None
    speaker_values: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "content", np.asarray(self.content, dtype=np.int64).reshape(-1))
        if (self.prosody_indices is None) == (self.prosody_values is None):
            raise InvalidInputError("exactly one of prosody_indices / prosody_values must be set")
        if (self.speaker_indices is None) == (self.speaker_values is None):
            raise InvalidInputError("exactly one of speaker_indices / speaker_values must be set")
        if self.prosody_indices is not None:
            pi = np.asarray(self.prosody_indices, dtype=np.int64)
            if pi.ndim != 2 or pi.shape[1] != self.n_frames:
                raise DimensionMismatchError(f"prosody indices shape {pi.shape} does not match T={self.n_frames}")
            object.__setattr__(self, "prosody_indices", pi)
        else:
            pv = np.asarray(self.prosody_values, dtype=np.float64)
            if pv.ndim != 2 or pv.shape[0] != self.n_frames:
                raise DimensionMismatchError(f"prosody values shape {pv.shape} does not match T={self.n_frames}")
            object.__setattr__(self, "prosody_values", pv)
        if self.speaker_indices is not None:
            si = np.asarray(self.speaker_indices, dtype=np.int64)
            if si.ndim != 2:
                raise DimensionMismatchError("speaker indices must be groups x layers")
            object.__setattr__(self, "speaker_indices", si)
        else:
            object.__setattr__(self, "speaker_values",
                               np.asarray(self.speaker_values, dtype=np.float64).reshape(-1))

    @property
    def n_frames(self) -> int:
        return self.content.size

    @property
    def prosody_quantized(self) -> bool:
        return self.prosody_indices is not None

    @property
    def speaker_quantized(self) -> bool:
        return self.speaker_indices is not None

    def replace(self, **changes) -> DisentangledCodes:
        fields = dict(content=self.content, config_hash=self.config_hash,
                      frame_rate_hz=self.frame_rate_hz, prosody_indices=self.prosody_indices,
                      prosody_values=self.prosody_values, speaker_indices=self.speaker_indices,
                      speaker_values=self.speaker_values)
        fields.update(changes)
        return DisentangledCodes(**fields)

    def equals(self, other: DisentangledCodes) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        return (self.config_hash == other.config_hash
                and self.frame_rate_hz == other.frame_rate_hz
                and same(self.content, other.content)
                and same(self.prosody_indices, other.prosody_indices)
                and same(self.prosody_values, other.prosody_values)
                and same(self.speaker_indices, other.speaker_indices)
                and same(self.speaker_values, other.speaker_values))


@dataclass(frozen=True, eq=False)
class FilmParams:
    """Affine scale ``f(S) = Wf S + bf`` and shift ``h(S) = Wh S + bh``."""

    scale_weight: np.ndarray
    scale_bias: np.ndarray
    shift_weight: np.ndarray
    shift_bias: np.ndarray

    @classmethod
    def identity(cls, n_features: int, cond_dim: int) -> FilmParams:
        return cls(np.zeros((n_features, cond_dim)), np.ones(n_features),
                   np.zeros((n_features, cond_dim)), np.zeros(n_features))

    @property
    def n_features(self) -> int:
        return self.scale_bias.size

    @property
    def cond_dim(self) -> int:
        return self.scale_weight.shape[1]


def film(content_prosody, speaker, params: FilmParams) -> np.ndarray:
    """``f(S) * [C; P] + h(S)`` on a frame-major ``T x (D+F)`` matrix."""
    x = np.asarray(content_prosody, dtype=np.float64)
    s = np.asarray(speaker, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != params.n_features:
        raise DimensionMismatchError(f"input shape {x.shape} does not match {params.n_features} FiLM features")
    if s.size != params.cond_dim:
        raise DimensionMismatchError(f"speaker vector has {s.size} dims, FiLM expects {params.cond_dim}")
    scale = params.scale_weight @ s + params.scale_bias
    shift = params.shift_weight @ s + params.shift_bias
    return x * scale + shift


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    config: QuantizerConfig
    content_codebook: Codebook
    projector: ProsodyProjector
    prosody_codebooks: list | None = None
    speaker_codebooks: list | None = None  # groups x layers
    film_params: FilmParams | None = None
    readout: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        if self.content_codebook.dim != cfg.dim:
            raise DimensionMismatchError(
                f"content codebook has {self.content_codebook.dim} dims, config expects {cfg.dim}")
        if self.projector.matrix.shape != (cfg.prosody_dim, cfg.dim):
            raise DimensionMismatchError(f"projector shape {self.projector.matrix.shape} does not match config")
        if cfg.quantize_prosody and not self.prosody_codebooks:
            raise NotFittedError(f"variant {cfg.variant} needs prosody codebooks")
        if cfg.quantize_speaker and not self.speaker_codebooks:
            raise NotFittedError(f"variant {cfg.variant} needs speaker codebooks")

    def with_variant(self, variant: str) -> FittedPipeline:
        """The same fitted components viewed under another variant.

        Only variants sharing this pipeline's normalization (with or
        without std) are reachable, since the projector depends on it.
        """
        cfg = self.config.replace(variant=variant)
        if cfg.include_sigma != self.config.include_sigma:
            raise ConfigMismatchError(
                f"cannot derive {cfg.variant} from a {self.config.variant} pipeline; refit instead")
        return FittedPipeline(cfg, self.content_codebook, self.projector, self.prosody_codebooks,
                              self.speaker_codebooks, self.film_params, self.readout)

    def stream_hashes(self) -> dict:
        def combine(cbs):
            h = fnv1a64(b"")
            for cb in cbs:
                h = fnv1a64(struct.pack("<Q", cb.hash), h)
                if cb.projection is not None:
                    h = fnv1a64(cb.projection.astype("<f4").tobytes(), h)
            return h
        out = {"content": self.content_codebook.hash}
        if self.config.quantize_prosody:
            out["prosody"] = combine(self.prosody_codebooks)
        if self.config.quantize_speaker:
            out["speaker"] = combine([cb for grp in self.speaker_codebooks for cb in grp])
        return out

    def encode(self, W) -> DisentangledCodes:
        return encode(W, self)

    def decode(self, codes: DisentangledCodes) -> FeatureMatrix:
        return decode(codes, self)


@dataclass(frozen=True, eq=False)
class Analysis:
    """Continuous intermediate values of one encoded utterance."""

    content: np.ndarray          # T x D quantized content vectors
    content_indices: np.ndarray
    residual: np.ndarray         # W - C
    normalized: np.ndarray       # IN(R) (or R - mean for the mean-only variant)
    mean: np.ndarray
    std: np.ndarray
    speaker_vector: np.ndarray


def analyze(W, content_cb: Codebook, include_sigma: bool) -> Analysis:
    data = W.data if isinstance(W, FeatureMatrix) else np.asarray(W, dtype=np.float64)
    if data.shape[1] != content_cb.dim:
        raise DimensionMismatchError(f"features have {data.shape[1]} dims, pipeline expects {content_cb.dim}")
    vq = vq_quantize(data, content_cb)
    residual = data - vq.quantized
    stats = channel_stats(residual)
    if include_sigma:
        normalized = (residual - stats.mean) / stats.std
        speaker = np.concatenate([stats.mean, stats.std])
        std = stats.std
    else:
        normalized = residual - stats.mean
        speaker = stats.mean.copy()
        std = np.ones_like(stats.mean)
    return Analysis(vq.quantized, vq.indices, residual, normalized, stats.mean, std, speaker)


def _kmeans_cfg(cfg: QuantizerConfig, n_centroids: int, seed: int) -> KMeansConfig:
    return KMeansConfig(n_centroids, cfg.kmeans_max_iters, cfg.kmeans_batch_size, seed,
                        cfg.kmeans_tolerance)


def speaker_projections(cfg: QuantizerConfig, group: int) -> list:
    width = cfg.speaker_group_width
    return [random_orthonormal(width, cfg.lookup_dim, [cfg.seed, 7, group, layer])
            for layer in range(cfg.speaker_layers)]


def fit_pipeline(training, cfg: QuantizerConfig, content_cb: Codebook) -> FittedPipeline:
    """Fit projector, prosody RVQ and speaker GRVQ around a frozen content codebook."""
    if content_cb.dim != cfg.dim:
        raise DimensionMismatchError(f"content codebook has {content_cb.dim} dims, config expects {cfg.dim}")
    training = list(training)
    if not training:
        raise InfeasibleError("no training utterances")
    analyses = [analyze(W, content_cb, cfg.include_sigma) for W in training]
    pooled = np.concatenate([a.normalized for a in analyses])
    projector = fit_projector(pooled, cfg.prosody_dim)

    prosody_cbs = None
    if cfg.quantize_prosody:
        projected = projector.project(pooled)
        prosody_cbs = fit_residual_stack(
            projected, cfg.prosody_layers, _kmeans_cfg(cfg, cfg.prosody_codebook_size, cfg.seed + 101),
            l2_normalized=True, id_prefix="prosody")

    speaker_cbs = None
    if cfg.quantize_speaker:
        if len(training) < cfg.speaker_codebook_size:
            raise InfeasibleError(
                f"{len(training)} utterances cannot support speaker codebooks of size {cfg.speaker_codebook_size}")
        vectors = np.stack([a.speaker_vector for a in analyses])
        width = cfg.speaker_group_width
        speaker_cbs = []
        for g in range(cfg.speaker_groups):
            stack = fit_residual_stack(
                vectors[:, g * width:(g + 1) * width], cfg.speaker_layers,
                _kmeans_cfg(cfg, cfg.speaker_codebook_size, cfg.seed + 1000 + 100 * g),
                l2_normalized=True,
                projections=speaker_projections(cfg, g) if cfg.speaker_projection == "random" else None,
                lookup_dim=cfg.lookup_dim,
                id_prefix=f"speaker{g}.")
            speaker_cbs.append(stack)
    return FittedPipeline(cfg, content_cb, projector, prosody_cbs, speaker_cbs)


def encode(W, p: FittedPipeline) -> DisentangledCodes:
    cfg = p.config
    a = analyze(W, p.content_codebook, cfg.include_sigma)
    prosody = p.projector.project(a.normalized)
    kw = {}
    if cfg.quantize_prosody:
        kw["prosody_indices"] = rvq_quantize(prosody, p.prosody_codebooks).indices
    else:
        kw["prosody_values"] = prosody
    if cfg.quantize_speaker:
        kw["speaker_indices"] = grvq_quantize(a.speaker_vector, p.speaker_codebooks).indices
    else:
        kw["speaker_values"] = a.speaker_vector
    rate = W.frame_rate_hz if isinstance(W, FeatureMatrix) else cfg.frame_rate_hz
    return DisentangledCodes(a.content_indices, cfg.hash, rate, **kw)


def check_codes(codes: DisentangledCodes, p: FittedPipeline) -> None:
    cfg = p.config
    if codes.config_hash != cfg.hash:
        raise ConfigMismatchError(
            f"codes were produced under config {codes.config_hash:016x}, pipeline has {cfg.hash:016x}")
    if codes.prosody_quantized != cfg.quantize_prosody or codes.speaker_quantized != cfg.quantize_speaker:
        raise ConfigMismatchError(f"code streams do not match variant {cfg.variant}")
    if codes.prosody_quantized:
        if codes.prosody_indices.shape[0] != cfg.prosody_layers:
            raise DimensionMismatchError(
                f"{codes.prosody_indices.shape[0]} prosody layers, config has {cfg.prosody_layers}")
    elif codes.prosody_values.shape[1] != cfg.prosody_dim:
        raise DimensionMismatchError(f"prosody has {codes.prosody_values.shape[1]} dims, config has {cfg.prosody_dim}")
    if codes.speaker_quantized:
        if codes.speaker_indices.shape != (cfg.speaker_groups, cfg.speaker_layers):
            raise DimensionMismatchError(f"speaker indices shape {codes.speaker_indices.shape} does not match config")
    elif codes.speaker_values.size != cfg.speaker_dim:
        raise DimensionMismatchError(f"speaker vector has {codes.speaker_values.size} dims, config has {cfg.speaker_dim}")


@dataclass(frozen=True, eq=False)
class DecodedStreams:
    content: np.ndarray   # T x D
    prosody: np.ndarray   # T x F
    speaker: np.ndarray   # speaker vector
    mean: np.ndarray
    std: np.ndarray


def dequantize_streams(codes: DisentangledCodes, p: FittedPipeline) -> DecodedStreams:
    check_codes(codes, p)
    cfg = p.config
    content = p.content_codebook.output(codes.content).reshape(codes.n_frames, cfg.dim)
    if codes.prosody_quantized:
        prosody = rvq_dequantize(codes.prosody_indices, p.prosody_codebooks)
    else:
        prosody = codes.prosody_values
    if codes.speaker_quantized:
        speaker = grvq_dequantize(codes.speaker_indices, p.speaker_codebooks)
    else:
        speaker = codes.speaker_values
    mean = speaker[:cfg.dim]
    std = speaker[cfg.dim:] if cfg.include_sigma else np.ones(cfg.dim)
    return DecodedStreams(content, prosody, speaker, mean, std)


def decode(codes: DisentangledCodes, p: FittedPipeline) -> FeatureMatrix:
    s = dequantize_streams(codes, p)
    if codes.n_frames == 0:
        raise InvalidInputError("cannot decode an empty code sequence")
    recon = s.content + s.std * p.projector.unproject(s.prosody) + s.mean
    return FeatureMatrix(recon, codes.frame_rate_hz)


# --------------------------------------------------------------------------
# learned FiLM readout

def _film_design(training, p: FittedPipeline):
    items = []
    for W in training:
        codes = encode(W, p)
        s = dequantize_streams(codes, p)
        x = np.concatenate([s.content, s.prosody], axis=1)
        y = W.data if isinstance(W, FeatureMatrix) else np.asarray(W, dtype=np.float64)
        items.append((x, s.speaker, y))
    return items


def _film_outputs(items, params: FilmParams, readout):
    return [film(x, s, params) @ readout.T for x, s, _ in items]


def _mse(items, preds) -> float:
    err = sum(float(np.sum((y - yh) ** 2)) for (_, _, y), yh in zip(items, preds))
    count = sum(y.size for _, _, y in items)
    return err / count


_JITTER = 1e-9


def solve_film_readout(items, init_params: FilmParams, init_readout, lam: float = 1e-3,
                       n_iters: int = 50, rtol: float = 1e-10):
    """Alternating ridge solves: readout given FiLM, then FiLM given readout.

    ``items`` is a list of ``(x, s, y)`` triples: frame-major inputs
    ``T x K``, conditioning vector and targets ``T x D``.  Each half-step
    solves its normal equations exactly, so the ridge objective never
    increases.  The ridge ``lam`` acts on the conditioning weights of ``f``
    and ``h``; biases and the readout carry only a tiny jitter, so a large
    ``lam`` drives the fit towards a speaker-independent (bias-only) FiLM.
    """
    params, readout = init_params, np.asarray(init_readout, dtype=np.float64)
    K, S1 = params.n_features, params.cond_dim + 1
    prev = np.inf
    for _ in range(n_iters):
        # readout given FiLM
        gram = _JITTER * np.eye(K)
        cross = np.zeros((readout.shape[0], K))
        for x, s, y in items:
            z = film(x, s, params)
            gram += z.T @ z
            cross += y.T @ z
        readout = np.linalg.solve(gram, cross.T).T

        # FiLM given readout; unknowns are [scale | shift] rows over [s; 1].
        # Hessian blocks are sums over utterances of Kronecker products, so
        # they are assembled with a single contraction over the utterance axis.
        G = readout.T @ readout
        half = K * S1
        GM, Gm, SS, rhs_a, rhs_b = [], [], 0.0, 0.0, 0.0
        for x, s, y in items:
            st = np.append(s, 1.0)
            ss = np.outer(st, st)
            H = y @ readout                      # T x K rows of R^T y_t
            GM.append(G * (x.T @ x))
            Gm.append(G * x.sum(axis=0)[:, None])
            SS = SS + x.shape[0] * ss
            rhs_a = rhs_a + np.outer((x * H).sum(axis=0), st)
            rhs_b = rhs_b + np.outer(H.sum(axis=0), st)
        SU = np.stack([np.outer(np.append(s, 1.0), np.append(s, 1.0)) for _, s, _ in items])

        def kron_sum(left):
            t = np.tensordot(np.stack(left), SU, axes=([0], [0]))  # k, l, i, j
            return t.transpose(0, 2, 1, 3).reshape(half, half)

        hess = np.empty((2 * half, 2 * half))
        hess[:half, :half] = kron_sum(GM)
        ab = kron_sum(Gm)
        hess[:half, half:] = ab
        hess[half:, :half] = ab.T
        hess[half:, half:] = np.kron(G, SS)
        # ridge on the conditioning weights only; biases get a tiny jitter
        penalty = np.full((2, K, S1), lam)
        penalty[:, :, -1] = _JITTER
        hess[np.diag_indices_from(hess)] += penalty.reshape(-1)
        rhs = np.concatenate([np.ravel(rhs_a), np.ravel(rhs_b)])
        theta = np.linalg.solve(hess, rhs)
        A = theta[:half].reshape(K, S1)
        B = theta[half:].reshape(K, S1)
        params = FilmParams(A[:, :-1], A[:, -1], B[:, :-1], B[:, -1])

        loss = _mse(items, _film_outputs(items, params, readout))
        if np.isfinite(prev) and abs(prev - loss) <= rtol * max(prev, 1e-300):
            break
        prev = loss
    return params, readout, loss


def fit_film_readout(training, p: FittedPipeline, lam: float = 1e-3, n_iters: int = 50):
    """Fit FiLM parameters and a ``D x (D+F)`` readout to reconstruct ``W``.

    Starts from the analytical decode's structure (unit scale, mean as
    shift, identity/unprojection readout).  Returns
    ``(params, readout, mse)``.
    """
    cfg = p.config
    items = _film_design(training, p)
    K = cfg.dim + cfg.prosody_dim
    params = FilmParams.identity(K, cfg.speaker_dim)
    shift_w = params.shift_weight.copy()
    shift_w[np.arange(cfg.dim), np.arange(cfg.dim)] = 1.0
    params = FilmParams(params.scale_weight, params.scale_bias, shift_w, params.shift_bias)
    readout = np.concatenate([np.eye(cfg.dim), p.projector.matrix.T], axis=1)
    return solve_film_readout(items, params, readout, lam, n_iters)


def film_decode(codes: DisentangledCodes, p: FittedPipeline) -> FeatureMatrix:
    if p.film_params is None or p.readout is None:
        raise NotFittedError("pipeline has no fitted FiLM readout")
    s = dequantize_streams(codes, p)
    x = np.concatenate([s.content, s.prosody], axis=1)
    return FeatureMatrix(film(x, s.speaker, p.film_params) @ p.readout.T, codes.frame_rate_hz)


def analytic_mse(training, p: FittedPipeline) -> float:
    err, count = 0.0, 0
    for W in training:
        recon = decode(encode(W, p), p).data
        err += float(np.sum((W.data - recon) ** 2))
        count += W.data.size
    return err / count


# --------------------------------------------------------------------------
# archive

ARCHIVE_MAGIC = b"DSQP"
ARCHIVE_VERSION = 1


def _matrix_section(name: str, m) -> bytes:
    return codebook_to_bytes(Codebook(np.atleast_2d(m), False, name))


def pipeline_to_bytes(p: FittedPipeline) -> bytes:
    sections = [("config", p.config.to_text().encode("utf-8")),
                ("content", codebook_to_bytes(p.content_codebook)),
                ("projector", _matrix_section("projector", p.projector.matrix)),
                ("projector.evr", _matrix_section("projector.evr",
                                                  np.nan_to_num(p.projector.explained_variance_ratio)))]
    for i, cb in enumerate(p.prosody_codebooks or []):
        sections.append((f"prosody.{i}", codebook_to_bytes(cb)))
    for g, stack in enumerate(p.speaker_codebooks or []):
        for l, cb in enumerate(stack):
            sections.append((f"speaker.{g}.{l}", codebook_to_bytes(cb)))
            sections.append((f"speaker.{g}.{l}.proj", _matrix_section("proj", cb.projection)))
    if p.film_params is not None:
        fp = p.film_params
        for name, m in (("scale_weight", fp.scale_weight), ("scale_bias", fp.scale_bias),
                        ("shift_weight", fp.shift_weight), ("shift_bias", fp.shift_bias),
                        ("readout", p.readout)):
            sections.append((f"film.{name}", _matrix_section(name, m)))
    out = [struct.pack("<4sBH", ARCHIVE_MAGIC, ARCHIVE_VERSION, len(sections))]
    for name, payload in sections:
        raw = name.encode("utf-8")
        out.append(struct.pack("<B", len(raw)) + raw + struct.pack("<Q", len(payload)))
        out.append(payload)
        out.append(struct.pack("<Q", fnv1a64(payload)))
    return b"".join(out)


def _read_sections(buf: bytes) -> dict:
    if buf[:4] != ARCHIVE_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {ARCHIVE_MAGIC!r}")
    if len(buf) < 7:
        raise TruncatedError("archive header truncated")
    _, version, n = struct.unpack_from("<4sBH", buf)
    if version != ARCHIVE_VERSION:
        raise VersionError(f"unsupported archive version {version}")
    pos = 7
    sections = {}
    for _ in range(n):
        if pos >= len(buf):
            raise TruncatedError("archive truncated in section header")
        name_len = buf[pos]
        pos += 1
        if pos + name_len + 8 > len(buf):
            raise TruncatedError("archive truncated in section header")
        name = bytes(buf[pos:pos + name_len]).decode("utf-8", errors="replace")
        pos += name_len
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + size + 8 > len(buf):
            raise TruncatedError(f"archive section {name!r} truncated")
        payload = bytes(buf[pos:pos + size])
        pos += size
        (stored,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if fnv1a64(payload) != stored:
            is_codebook = name == "content" or name.startswith(("prosody.", "speaker."))
            exc = IncompatibleCodebookError if is_codebook else ChecksumError
            raise exc(f"archive section {name!r} fails its integrity hash")
        sections[name] = payload
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes after archive")
    return sections


def pipeline_from_bytes(buf: bytes) -> FittedPipeline:
    sec = _read_sections(buf)
    try:
        cfg = QuantizerConfig.from_text(sec["config"].decode("utf-8"))
        content = codebook_from_bytes(sec["content"])
        proj = codebook_from_bytes(sec["projector"]).entries
        evr = codebook_from_bytes(sec["projector.evr"]).entries[0] if "projector.evr" in sec else None
        prosody = None
        if "prosody.0" in sec:
            prosody = [codebook_from_bytes(sec[f"prosody.{i}"]) for i in range(cfg.prosody_layers)]
        speaker = None
        if "speaker.0.0" in sec:
            speaker = []
            for g in range(cfg.speaker_groups):
                stack = []
                for l in range(cfg.speaker_layers):
                    cb = codebook_from_bytes(sec[f"speaker.{g}.{l}"])
                    pm = codebook_from_bytes(sec[f"speaker.{g}.{l}.proj"]).entries
                    stack.append(cb.with_projection(pm))
                speaker.append(stack)
        film_params = readout = None
        if "film.readout" in sec:
            get = lambda name: codebook_from_bytes(sec[f"film.{name}"]).entries
            film_params = FilmParams(get("scale_weight"), get("scale_bias")[0],
                                     get("shift_weight"), get("shift_bias")[0])
            readout = get("readout")
    except KeyError as exc:
        raise ParseError(f"archive is missing section {exc.args[0]!r}") from None
    except UnicodeDecodeError:
        raise ParseError("archive config is not UTF-8") from None
    return FittedPipeline(cfg, content, ProsodyProjector(proj, evr), prosody, speaker,
                          film_params, readout)


def save_pipeline(path, p: FittedPipeline) -> None:
    from ._io import atomic_write_bytes
    atomic_write_bytes(path, pipeline_to_bytes(p))


def load_pipeline(path) -> FittedPipeline:
    with open(path, "rb") as fh:
        return pipeline_from_bytes(fh.read())
