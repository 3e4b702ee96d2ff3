"""Command-line front end: ``dsq <subcommand> ...``.

Every failure prints a single ``CODE: message`` line on stderr and exits
with the error's status (2 usage, 3 parse/format, 4 incompatibility,
5 numeric infeasibility).  Outputs are written to a temp file and renamed,
so a failed command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text
from .bitstream import Bitstream, bitrate, pack_bytes, unpack
from .codebook import (
    Codebook,
    KMeansConfig,
    codebook_from_bytes,
    codebook_to_bytes,
    fit_kmeans,
)
from .config import load_config
from .errors import DsqError, InvalidInputError, ParseError
from .features import (
    SyntheticSpec,
    generate_synthetic,
    read_feature_file,
    synthetic_world,
    write_feature_file,
)
from .manipulate import flatten_prosody, swap_speaker
from .metrics import best_match_correlations, eer, feature_distance, nearest_centroid_purity
from .pipeline import (
    FittedPipeline,
    analyze,
    decode,
    dequantize_streams,
    encode,
    fit_film_readout,
    film_decode,
    fit_pipeline,
    load_pipeline,
    save_pipeline,
)
from .quantize import rvq_quantize

EVAL_SCHEMA = "dsq-eval"
EVAL_SCHEMA_VERSION = 1
LABELS_FILE = "labels.jsonl"
CENTROIDS_FILE = "content.cbk"


class UsageError(DsqError):
    code = "ERR_USAGE"
    exit_code = 2


def _seed(args) -> int | None:
    """Explicit ``--seed`` wins over ``DSQ_SEED``; ``None`` keeps the default."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("DSQ_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DSQ_SEED must be an integer, got {env!r}") from None


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _feature_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidInputError(f"{directory} is not a directory")
    files = sorted(d.glob("*.ftr"))
    if not files:
        raise InvalidInputError(f"no .ftr files in {directory}")
    return files


def _read_labels(directory) -> dict | None:
    path = Path(directory) / LABELS_FILE
    if not path.exists():
        return None
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                labels[rec["id"]] = rec
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ParseError(f"{path}:{n}: malformed label record") from None
    return labels


# --------------------------------------------------------------------------
# synth

def _load_spec(path) -> tuple[SyntheticSpec, dict]:
    """Read a synthetic-corpus TOML; returns the spec and corpus-shape keys."""
    from .config import tomllib

    values = {}
    if path is not None:
        try:
            values = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"spec is not valid TOML: {exc}") from None
        values = values.get("synthetic", values)
    shape_keys = {"n_utterances": 200, "frames_per_utterance": 200, "frame_rate_hz": 50.0}
    shape = {k: values.pop(k, v) for k, v in shape_keys.items()}
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidInputError(f"unknown spec keys: {', '.join(unknown)}")
    try:
        spec = SyntheticSpec(**values)
    except TypeError as exc:
        raise InvalidInputError(str(exc)) from None
    return spec, shape


def cmd_synth(args) -> int:
    spec, shape = _load_spec(args.spec)
    seed = _seed(args)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    n_utt = args.utterances if args.utterances is not None else int(shape["n_utterances"])
    n_frames = args.frames if args.frames is not None else int(shape["frames_per_utterance"])
    corpus = generate_synthetic(spec, n_utt, n_frames, float(shape["frame_rate_hz"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(n_utt - 1)))
    lines = []
    for u, (W, lab) in enumerate(corpus):
        uid = f"utt{u:0{width}d}"
        write_feature_file(out / f"{uid}.ftr", W)
        lines.append(json.dumps({
            "id": uid, "file": f"{uid}.ftr", "speaker": int(lab.speaker),
            "content": lab.content.tolist(),
            "prosody": np.round(lab.prosody, 8).tolist(),
        }))
    atomic_write_text(out / LABELS_FILE, "\n".join(lines) + "\n")
    world = synthetic_world(spec)
    atomic_write_bytes(out / CENTROIDS_FILE, codebook_to_bytes(Codebook(world.centroids, False, "content")))
    print(f"wrote {n_utt} utterances x {n_frames} frames ({spec.n_speakers} speakers) to {out}")
    return 0


# --------------------------------------------------------------------------
# fit

def _fmt(values) -> str:
    return " ".join(f"{v:.6g}" for v in values)


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    training = [read_feature_file(f) for f in _feature_files(args.train)]
    if args.content_codebook:
        content_cb = codebook_from_bytes(_read_bytes(args.content_codebook))
    else:
        pooled = np.concatenate([W.data for W in training])
        km = KMeansConfig(cfg.content_codebook_size, cfg.kmeans_max_iters, cfg.kmeans_batch_size,
                          cfg.seed, cfg.kmeans_tolerance)
        content_cb, history = fit_kmeans(pooled, km, id=cfg.content_codebook_id)
        print(f"content k-means inertia: {_fmt(history)}")

    p = fit_pipeline(training, cfg, content_cb)
    analyses = [analyze(W, content_cb, cfg.include_sigma) for W in training]
    total = sum(float(np.sum(W.data ** 2)) for W in training) / sum(W.n_frames for W in training)
    resid = (sum(float(np.sum(a.residual ** 2)) for a in analyses)
             / sum(a.residual.shape[0] for a in analyses))
    print(f"feature energy per frame: {total:.6g}")
    print(f"content residual energy per frame: {resid:.6g}")
    evr = p.projector.explained_variance_ratio
    print(f"prosody projector variance captured: {float(np.sum(evr)):.6f}")
    if p.prosody_codebooks:
        pooled = np.concatenate([p.projector.project(a.normalized) for a in analyses])
        energy = rvq_quantize(pooled, p.prosody_codebooks).residual_energy
        print(f"prosody rvq residual energy by layer: {_fmt(energy)}")
    if p.speaker_codebooks:
        vectors = np.stack([a.speaker_vector for a in analyses])
        width = cfg.speaker_group_width
        layer_energy = np.zeros(cfg.speaker_layers)
        for g, stack in enumerate(p.speaker_codebooks):
            layer_energy += rvq_quantize(vectors[:, g * width:(g + 1) * width], stack).residual_energy
        print(f"speaker grvq residual energy by layer: {_fmt(layer_energy)}")
    if args.film:
        params, readout, mse = fit_film_readout(training, p, lam=args.film_lambda)
        p = dataclasses.replace(p, film_params=params, readout=readout)
        print(f"film readout mse: {mse:.6g}")
    save_pipeline(args.out, p)
    print(f"saved {cfg.variant} pipeline to {args.out} (config {cfg.hash:016x})")
    return 0


# --------------------------------------------------------------------------
# encode / decode / manipulation

def cmd_encode(args) -> int:
    p = load_pipeline(args.pipeline)
    W = read_feature_file(args.input)
    codes = encode(W, p)
    atomic_write_bytes(args.out, pack_bytes(codes, p))
    print(f"{W.n_frames} frames: {bitrate(p.config).describe()}")
    return 0


def cmd_decode(args) -> int:
    p = load_pipeline(args.pipeline)
    codes = unpack(_read_bytes(args.input), p)
    if args.film:
        W = film_decode(codes, p)
    else:
        W = decode(codes, p)
    write_feature_file(args.out, W)
    print(f"decoded {W.n_frames} frames x {W.dim} dims")
    return 0


def cmd_swap(args) -> int:
    p = load_pipeline(args.pipeline)
    src = unpack(_read_bytes(args.src), p)
    ref = unpack(_read_bytes(args.ref), p)
    atomic_write_bytes(args.out, pack_bytes(swap_speaker(src, ref), p))
    print(f"swapped speaker of {args.src} with {args.ref}")
    return 0


def cmd_flatten(args) -> int:
    p = load_pipeline(args.pipeline)
    codes = unpack(_read_bytes(args.input), p)
    out = flatten_prosody(codes, args.from_frame, args.hold)
    atomic_write_bytes(args.out, pack_bytes(out, p))
    print(f"flattened prosody of {codes.n_frames} frames from {args.from_frame}")
    return 0


# --------------------------------------------------------------------------
# info

def info_lines(bs: Bitstream, p: FittedPipeline | None = None) -> list[str]:
    T, rate = bs.n_frames, bs.frame_rate_hz
    lines = [
        f"version        {bs.version}",
        f"config hash    {bs.config_hash:016x}",
        f"frames         {T}",
        f"frame rate     {rate:g} Hz",
        f"duration       {T / rate:.3f} s",
        f"flags          prosody={'quantized' if bs.prosody_quantized else 'continuous'} "
        f"speaker={'quantized' if bs.speaker_quantized else 'continuous'}",
    ]
    expected = p.stream_hashes() if p is not None else {}
    total_bits = 0
    for s in bs.streams:
        nbytes = (s.payload_bits + 7) // 8
        total_bits += s.payload_bits
        line = (f"stream {s.name:<8} hash {s.codebook_hash:016x}  width {s.width:>2}  "
                f"count {s.count:>6}  bits {s.payload_bits:>8}  bytes {nbytes}")
        if p is not None:
            line += "  hash ok" if expected.get(s.name) == s.codebook_hash else "  HASH MISMATCH"
        lines.append(line)
        if s.name == "content":
            lines.append(f"  content      {rate * s.width / 1000:.2f} kb/s")
        elif s.name == "prosody":
            layers = s.count // T if T else 0
            lines.append(f"  prosody      {rate * layers * s.width / 1000:.2f} kb/s ({layers} layers)")
        elif s.name == "speaker":
            lines.append(f"  speaker      {s.payload_bits} bits/u ({s.payload_bits / 1000:.2f} kb/u)")
    if bs.prosody_values is not None:
        lines.append(f"trailer prosody continuous {bs.prosody_values.shape[1]} dim/frame "
                     f"({bs.prosody_values.size * 32} bits)")
    if bs.speaker_values is not None:
        lines.append(f"trailer speaker continuous {bs.speaker_values.size} dim/u "
                     f"({bs.speaker_values.size * 32} bits)")
    lines.append(f"payload bits   {total_bits}")
    lines.append("crc32          ok")
    if p is not None:
        lines.append(f"pipeline       {'config ok' if p.config.hash == bs.config_hash else 'CONFIG MISMATCH'}")
    return lines


def cmd_info(args) -> int:
    bs = Bitstream.from_bytes(_read_bytes(args.input))
    p = load_pipeline(args.pipeline) if args.pipeline else None
    print("\n".join(info_lines(bs, p)))
    if p is not None:
        unpack(bs, p)  # raises on any incompatibility
    return 0


# --------------------------------------------------------------------------
# eval

def reachable_variants(p: FittedPipeline) -> list[str]:
    if not p.config.include_sigma:
        return ["skq"]
    out = ["skq+sigma"]
    if p.prosody_codebooks:
        out.append("skq2+sigma")
        if p.speaker_codebooks:
            out.append("skq3+sigma")
    return out


def speaker_trials(vectors, speakers):
    """All same-speaker pairs are genuine trials, all cross-speaker pairs impostors.

    The score is the negative Euclidean distance between speaker vectors.
    """
    V = np.asarray(vectors, dtype=np.float64)
    spk = np.asarray(speakers)
    d = np.sqrt(np.maximum(np.sum((V[:, None, :] - V[None, :, :]) ** 2, axis=-1), 0.0))
    iu = np.triu_indices(V.shape[0], k=1)
    scores = -d[iu]
    same = spk[iu[0]] == spk[iu[1]]
    return scores[same], scores[~same]


def evaluate(p: FittedPipeline, utterances, labels=None) -> dict:
    """Per-variant reconstruction, speaker and prosody metrics as a JSON-able dict."""
    rows = []
    speakers = None
    if labels is not None:
        speakers = [labels[uid]["speaker"] for uid, _ in utterances]
    for variant in reachable_variants(p):
        q = p.with_variant(variant)
        l2, cos, spk_vecs, pros_means, pccs = [], [], [], [], []
        for uid, W in utterances:
            codes = encode(W, q)
            recon = decode(codes, q)
            l2.append(feature_distance(W, recon, "l2"))
            cos.append(feature_distance(W, recon, "cosine"))
            s = dequantize_streams(codes, q)
            spk_vecs.append(s.speaker)
            pros_means.append(s.prosody.mean(axis=0))
            if labels is not None and labels[uid].get("prosody") is not None:
                truth = np.asarray(labels[uid]["prosody"], dtype=np.float64)
                if truth.shape[0] == W.n_frames:
                    pccs.append(float(np.mean(best_match_correlations(truth, s.prosody))))
        row = {"variant": variant, "feature_l2": float(np.mean(l2)), "feature_cosine": float(np.mean(cos)),
               "speaker_eer": None, "speaker_purity": None, "prosody_purity": None,
               "prosody_pcc_mean": None, "prosody_pcc_min": None}
        if speakers is not None and len(set(speakers)) >= 2:
            gen, imp = speaker_trials(spk_vecs, speakers)
            if gen.size and imp.size:
                row["speaker_eer"] = eer(gen, imp)[0]
            row["speaker_purity"] = nearest_centroid_purity(np.stack(spk_vecs), speakers)
            row["prosody_purity"] = nearest_centroid_purity(np.stack(pros_means), speakers)
        if pccs:
            row["prosody_pcc_mean"] = float(np.mean(pccs))
            row["prosody_pcc_min"] = float(np.min(pccs))
        rows.append(row)
    n_spk = len(set(speakers)) if speakers is not None else None
    return {
        "schema": EVAL_SCHEMA,
        "schema_version": EVAL_SCHEMA_VERSION,
        "config_hash": f"{p.config.hash:016x}",
        "pipeline_variant": p.config.variant,
        "n_utterances": len(utterances),
        "n_speakers": n_spk,
        "distance_note": "feature-space distances stand in for spectral distances",
        "trial_protocol": "all same-speaker pairs genuine, all cross-speaker pairs impostor; "
                          "score = -euclidean distance of decoded speaker vectors",
        "bitrate": bitrate(p.config).describe(),
        "variants": rows,
    }


def format_table(report: dict) -> str:
    cols = [("variant", "variant", "{}"), ("feature_l2", "l2", "{:.6f}"),
            ("feature_cosine", "cosine", "{:.6f}"), ("speaker_eer", "spk_eer", "{:.4f}"),
            ("speaker_purity", "spk_purity", "{:.3f}"), ("prosody_purity", "pros_purity", "{:.3f}"),
            ("prosody_pcc_mean", "pcc_mean", "{:.4f}"), ("prosody_pcc_min", "pcc_min", "{:.4f}")]
    table = [[title for _, title, _ in cols]]
    for row in report["variants"]:
        table.append(["-" if row[key] is None else fmt.format(row[key]) for key, _, fmt in cols])
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                       for i, (cell, w) in enumerate(zip(r, widths))) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    p = load_pipeline(args.pipeline)
    files = _feature_files(args.dir)
    labels = _read_labels(args.dir)
    utterances = [(f.stem, read_feature_file(f)) for f in files]
    if labels is not None:
        missing = [uid for uid, _ in utterances if uid not in labels]
        if missing:
            raise ParseError(f"{LABELS_FILE} has no record for {missing[0]}")
    report = evaluate(p, utterances, labels)
    print(format_table(report))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.json:
        atomic_write_text(args.json, text)
    else:
        print(text, end="")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsq", description="Disentangling feature quantizer")
    parser.add_argument("--version", action="version", version=f"dsq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic feature corpus")
    s.add_argument("--spec", help="TOML file of synthetic-corpus parameters")
    s.add_argument("--out", required=True)
    s.add_argument("--utterances", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit a pipeline on a directory of .ftr files")
    s.add_argument("--config", required=True, help="preset name or TOML file")
    s.add_argument("--train", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--content-codebook", help="frozen content codebook (.cbk); fitted by k-means if absent")
    s.add_argument("--film", action="store_true", help="also fit the FiLM readout")
    s.add_argument("--film-lambda", type=float, default=1e-3)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("encode", help="encode features into a bitstream")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decode a bitstream into features")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--film", action="store_true", help="use the fitted FiLM readout")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("swap-speaker", help="replace the speaker stream of a bitstream")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swap)

    s = sub.add_parser("flatten-prosody", help="hold one prosody code over a suffix")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--from", dest="from_frame", default="mid", help="first affected frame or 'mid'")
    s.add_argument("--hold", default=None, help="frame whose code is held (default: --from)")
    s.set_defaults(func=cmd_flatten)

    s = sub.add_parser("eval", help="evaluate a pipeline on a directory")
    s.add_argument("--pipeline", required=True)
    s.add_argument("--dir", required=True)
    s.add_argument("--json", help="write the JSON report here instead of stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("info", help="dump a bitstream header and bit accounting")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--pipeline", help="also verify codebook hashes against this pipeline")
    s.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DsqError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ERR_NOT_FOUND: {exc.filename}: no such file", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"ERR_IO: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
