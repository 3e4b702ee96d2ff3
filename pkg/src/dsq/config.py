"""Quantizer configuration, named presets and their canonical text form."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass

from .codebook import fnv1a64
from .errors import InvalidInputError, ParseError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


VARIANTS = ("skq", "skq+sigma", "skq2+sigma", "skq3+sigma")
_ALIASES = {
    "skq+σ": "skq+sigma",
    "skq2+σ": "skq2+sigma",
    "skq3+σ": "skq3+sigma",
}

# (include_sigma, quantize_prosody, quantize_speaker)
_VARIANT_FLAGS = {
    "skq": (False, False, False),
    "skq+sigma": (True, False, False),
    "skq2+sigma": (True, True, False),
    "skq3+sigma": (True, True, True),
}


def canonical_variant(name: str) -> str:
    key = str(name).strip().lower()
    key = _ALIASES.get(key, key)
    if key not in _VARIANT_FLAGS:
        raise InvalidInputError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return key


@dataclass(frozen=True)
class QuantizerConfig:
    dim: int = 1024
    prosody_dim: int = 8
    frame_rate_hz: float = 50.0
    content_codebook_size: int = 1000
    content_codebook_id: str = "content"
    prosody_layers: int = 2
    prosody_codebook_size: int = 1000
    speaker_groups: int = 16
    speaker_layers: int = 8
    speaker_codebook_size: int = 1024
    lookup_dim: int = 8
    speaker_projection: str = "pca"
    variant: str = "skq3+sigma"
    seed: int = 0
    kmeans_max_iters: int = 50
    kmeans_batch_size: int = 0
    kmeans_tolerance: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        for name in ("dim", "prosody_dim", "content_codebook_size", "prosody_layers",
                     "prosody_codebook_size", "speaker_groups", "speaker_layers",
                     "speaker_codebook_size", "lookup_dim", "kmeans_max_iters"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.speaker_projection not in ("pca", "random"):
            raise InvalidInputError("speaker_projection must be 'pca' or 'random'")
        if self.kmeans_batch_size < 0 or self.kmeans_tolerance < 0:
            raise InvalidInputError("k-means batch size and tolerance must be >= 0")
        if not (math.isfinite(self.frame_rate_hz) and self.frame_rate_hz > 0):
            raise InvalidInputError("frame_rate_hz must be positive")
        if self.prosody_dim > self.dim:
            raise InvalidInputError("prosody_dim cannot exceed dim")
        if self.speaker_dim % self.speaker_groups:
            raise InvalidInputError(
                f"speaker vector of {self.speaker_dim} dims is not divisible into {self.speaker_groups} groups")
        if self.lookup_dim > self.speaker_group_width:
            raise InvalidInputError(
                f"lookup_dim {self.lookup_dim} exceeds group width {self.speaker_group_width}")

    @property
    def include_sigma(self) -> bool:
        return _VARIANT_FLAGS[self.variant][0]

    @property
    def quantize_prosody(self) -> bool:
        return _VARIANT_FLAGS[self.variant][1]

    @property
    def quantize_speaker(self) -> bool:
        return _VARIANT_FLAGS[self.variant][2]

    @property
    def speaker_dim(self) -> int:
        return 2 * self.dim if self.include_sigma else self.dim

    @property
    def speaker_group_width(self) -> int:
        return self.speaker_dim // self.speaker_groups

    def replace(self, **changes) -> QuantizerConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical ``key = value`` text (valid TOML), keys sorted."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, str):
                lines.append(f'{f.name} = "{v}"')
            elif isinstance(v, float):
                lines.append(f"{f.name} = {v!r}")
            else:
                lines.append(f"{f.name} = {int(v)}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> int:
        return fnv1a64(self.to_text().encode("utf-8"))

    @classmethod
    def from_mapping(cls, values: dict) -> QuantizerConfig:
        values = dict(values)
        preset = values.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise InvalidInputError(f"unknown preset {preset!r}")
        base = PRESETS[preset] if preset is not None else cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for key, v in values.items():
            ftype = type(getattr(base, key))
            try:
                coerced[key] = ftype(v)
            except (TypeError, ValueError):
                raise InvalidInputError(f"config key {key} has bad value {v!r}") from None
        return dataclasses.replace(base, **coerced)

    @classmethod
    def from_text(cls, text: str) -> QuantizerConfig:
        try:
            values = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"config is not valid TOML: {exc}") from None
        if "quantizer" in values and isinstance(values["quantizer"], dict):
            values = values["quantizer"]
        return cls.from_mapping(values)


PRESETS = {
    "paper-skq3": QuantizerConfig(kmeans_batch_size=10000),
    "desk-small": QuantizerConfig(
        dim=32, prosody_dim=4, content_codebook_size=16, prosody_layers=2,
        prosody_codebook_size=64, speaker_groups=4, speaker_layers=2,
        speaker_codebook_size=32, lookup_dim=8),
}


def load_config(source) -> QuantizerConfig:
    """Resolve a preset name, a path to a TOML file, or a mapping."""
    if isinstance(source, QuantizerConfig):
        return source
    if isinstance(source, dict):
        return QuantizerConfig.from_mapping(source)
    name = str(source)
    if name in PRESETS:
        return PRESETS[name]
    try:
        with open(name, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise InvalidInputError(f"{name!r} is neither a preset ({', '.join(PRESETS)}) nor a file") from None
    return QuantizerConfig.from_text(text)
