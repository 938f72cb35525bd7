"""Frozen soft-mask predictor for query foreground probability.

The built-in variant is the simplest pooled-prototype classifier: masked
average pooling over all supports gives one foreground and one background
prototype, and each query pixel gets a two-way temperature softmax over its
cosine similarities to them.  The file-backed variant loads a precomputed
soft mask instead, standing in for any external conservative model.

Either way the predictor is frozen: it runs in plain numpy, never touches a
differentiation tape, and its output enters the trainable model as a
constant.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .episodes import Episode, _check_magic, _Reader
from .errors import (
    ConfigError,
    InvalidValueError,
    PayloadRangeError,
    ShapeMismatchError,
    UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

MASK_MAGIC = b"PAHM"
MASK_FORMAT_VERSION = 1
RANGE_TOLERANCE = 1e-9

COSINE_EPS = 1e-12


@dataclass(frozen=True)
class PredictorHandle:
    """Tagged handle: built-in pooled-prototype model or a soft-mask file."""

    kind: str  # "builtin" | "file"
    temperature: float = 0.1
    path: Optional[Path] = None

    def __post_init__(self):
        if self.kind not in ("builtin", "file"):
            raise ConfigError(f"unknown predictor kind {self.kind!r}")
        if self.temperature <= 0:
            raise ConfigError(f"predictor temperature must be > 0, got {self.temperature}")
        if self.kind == "file" and self.path is None:
            raise ConfigError("file-backed predictor needs a path")


def builtin_predictor(temperature: float = 0.1) -> PredictorHandle:
    return PredictorHandle(kind="builtin", temperature=temperature)


def file_predictor(path) -> PredictorHandle:
    return PredictorHandle(kind="file", path=Path(path))


def _cosine_to(features: np.ndarray, proto: np.ndarray) -> np.ndarray:
    """Per-pixel cosine similarity, clamped, with zero-vector convention 0."""
    dots = features @ proto
    nf = np.linalg.norm(features, axis=-1)
    npr = float(np.linalg.norm(proto))
    out = np.clip(dots / (nf * npr + COSINE_EPS), -1.0, 1.0)
    return np.where((nf < 1e-12) | (npr < 1e-12), 0.0, out)


def pooled_prototypes(episode: Episode):
    """Foreground/background prototypes pooled jointly over all k supports."""
    num_f = np.zeros(episode.query_features.shape[-1])
    num_b = np.zeros_like(num_f)
    den_f = 0.0
    den_b = 0.0
    for sup in episode.supports:
        m = sup.mask.astype(np.float64)
        num_f += np.einsum("hw,hwd->d", m, sup.features)
        num_b += np.einsum("hw,hwd->d", 1.0 - m, sup.features)
        den_f += float(m.sum())
        den_b += float((1.0 - m).sum())
    w_f = num_f / (den_f + COSINE_EPS)
    w_b = num_b / (den_b + COSINE_EPS)
    return w_f, w_b


def two_way_softmax(fg_scores: np.ndarray, bg_scores: np.ndarray) -> np.ndarray:
    """Stable per-pixel softmax over {fg, bg} logits; returns the fg channel."""
    m = np.maximum(fg_scores, bg_scores)
    ef = np.exp(fg_scores - m)
    eb = np.exp(bg_scores - m)
    return ef / (ef + eb)


def predict(handle: PredictorHandle, episode: Episode) -> np.ndarray:
    """Soft foreground-probability mask for the episode's query, in [0,1]."""
    h, w, _ = episode.query_features.shape
    if handle.kind == "file":
        return load_soft_mask(handle.path, h, w)
    w_f, w_b = pooled_prototypes(episode)
    cos_f = _cosine_to(episode.query_features, w_f)
    cos_b = _cosine_to(episode.query_features, w_b)
    return two_way_softmax(cos_f / handle.temperature, cos_b / handle.temperature)


# ---------------------------------------------------------------------------
# PAHM soft-mask files


def write_soft_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"soft mask must be 2-D, got shape {mask.shape}")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise PayloadRangeError("soft mask values must lie in [0, 1]")
    h, w = mask.shape
    blob = MASK_MAGIC + struct.pack("<HII", MASK_FORMAT_VERSION, h, w) + mask.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_soft_mask(path, h: int, w: int) -> np.ndarray:
    """Read a soft mask and validate its shape and [0,1] range.

    Values past the bounds by at most ``RANGE_TOLERANCE`` are clamped with a
    warning; larger excursions are a payload error.
    """
    reader = _Reader(Path(path).read_bytes(), path)
    _check_magic(reader, MASK_MAGIC)
    version = reader.u16("format version")
    if version != MASK_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported soft-mask format version {version} "
            f"(expected {MASK_FORMAT_VERSION})"
        )
    fh = reader.u32("height")
    fw = reader.u32("width")
    if (fh, fw) != (h, w):
        raise ShapeMismatchError(f"{path}: soft mask is {fh}x{fw}, episode needs {h}x{w}")
    values = reader.f64_array(h * w, "soft mask payload").reshape(h, w)
    reader.done()
    if not np.isfinite(values).all():
        raise InvalidValueError(f"{path}: soft mask contains non-finite values")
    low, high = float(values.min()), float(values.max())
    if low < -RANGE_TOLERANCE or high > 1.0 + RANGE_TOLERANCE:
        raise PayloadRangeError(
            f"{path}: soft mask values span [{low:.3g}, {high:.3g}], outside [0, 1]"
        )
    if low < 0.0 or high > 1.0:
        logger.warning("%s: clamping soft-mask values within %.0e of [0, 1]", path, RANGE_TOLERANCE)
        values = np.clip(values, 0.0, 1.0)
    return values
