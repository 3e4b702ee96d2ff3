import numpy as np
import pytest

from dsq import Codebook, SyntheticSpec, fit_pipeline, generate_synthetic
from dsq.config import PRESETS
from dsq.features import synthetic_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_speakers=8, noise_std=0.0, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    """40 noise-free utterances of 8 speakers, 120 frames each."""
    return generate_synthetic(small_spec, 40, 120)


@pytest.fixture(scope="session")
def true_codebook(small_spec):
    return Codebook(synthetic_world(small_spec).centroids, id="content")


@pytest.fixture(scope="session")
def small_config():
    return PRESETS["desk-small"].replace(speaker_codebook_size=8, prosody_codebook_size=32)


@pytest.fixture(scope="session")
def fitted(small_corpus, small_config, true_codebook):
    return fit_pipeline([W for W, _ in small_corpus], small_config, true_codebook)


def random_pipeline(cfg, seed=0):
    """A pipeline with random (unfitted) codebooks; enough for serialization tests."""
    from dsq.codebook import random_orthonormal
    from dsq.pipeline import FittedPipeline, ProsodyProjector

    r = np.random.default_rng(seed)
    content = Codebook(r.normal(size=(cfg.content_codebook_size, cfg.dim)), id="content")
    proj = ProsodyProjector(random_orthonormal(cfg.dim, cfg.prosody_dim, [seed, 1]).T)
    prosody = speaker = None
    if cfg.quantize_prosody:
        prosody = [Codebook(r.normal(size=(cfg.prosody_codebook_size, cfg.prosody_dim)), True, f"p{i}")
                   for i in range(cfg.prosody_layers)]
    if cfg.quantize_speaker:
        w = cfg.speaker_group_width
        speaker = [[Codebook(r.normal(size=(cfg.speaker_codebook_size, cfg.lookup_dim)), True, f"s{g}.{l}",
                             projection=random_orthonormal(w, cfg.lookup_dim, [seed, g, l]))
                    for l in range(cfg.speaker_layers)] for g in range(cfg.speaker_groups)]
    return FittedPipeline(cfg, content, proj, prosody, speaker)


def random_codes(p, n_frames, seed=0):
    from dsq.pipeline import DisentangledCodes

    cfg = p.config
    r = np.random.default_rng(seed)
    kw = {}
    if cfg.quantize_prosody:
        kw["prosody_indices"] = r.integers(0, cfg.prosody_codebook_size, (cfg.prosody_layers, n_frames))
    else:
        kw["prosody_values"] = r.normal(size=(n_frames, cfg.prosody_dim)).astype(np.float32)
    if cfg.quantize_speaker:
        kw["speaker_indices"] = r.integers(0, cfg.speaker_codebook_size, (cfg.speaker_groups, cfg.speaker_layers))
    else:
        kw["speaker_values"] = r.normal(size=cfg.speaker_dim).astype(np.float32)
    return DisentangledCodes(r.integers(0, cfg.content_codebook_size, n_frames), cfg.hash,
                             cfg.frame_rate_hz, **kw)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def report(number, ok, detail, elapsed=None, budget=None):
    """Record and print a criterion verdict; the time budget counts toward it.

    ``ok=None`` marks a criterion declared out of scope.
    """
    if budget is not None and elapsed is not None and elapsed >= budget:
        ok = False
        detail += f"; took {elapsed:.1f}s, budget {budget:g}s"
    elif elapsed is not None:
        detail += f" ({elapsed:.2f}s)"
    status = "N/A " if ok is None else "PASS" if ok else "FAIL"
    line = f"{status} criterion {number}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
