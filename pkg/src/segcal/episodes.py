"""Synthetic few-shot segmentation episodes and their binary file format.

Episodes live at feature resolution: the generator plays the role of a
frozen backbone and emits feature maps directly.  Foreground pixels of a
class draw from a Gaussian cluster around that class's anchor direction;
ordinary background pixels draw from one shared cluster placed far from all
anchors; an adjustable fraction of *query* background pixels draw from a
point interpolated toward the class anchor.  Those interpolated pixels are
the engineered mismatch traps: they sit close enough to foreground featues
to fool pixel-level matching while a pooled-prototype classifier still
rejects them at moderate proximity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    InvalidValueError,
    MagicMismatchError,
    TruncationError,
    UnsupportedVersionError,
)
from .rng import make_rng

MAGIC = b"PAHE"
FORMAT_VERSION = 1

MIN_FG_FRACTION = 0.10
MAX_FG_FRACTION = 0.40

# Distance of the shared background cluster from the origin.  Class anchors
# are unit vectors orthogonal to the background direction, so this sets how
# much background flavour an interpolated distractor keeps at a given
# proximity.
FAR_CLUSTER_DISTANCE = 12.0

_ANCHOR_SALT = 0x414E4348  # anchor stream
_EPISODE_SALT = 0x45505344  # episode stream


@dataclass(frozen=True)
class GeneratorConfig:
    h: int = 8
    w: int = 8
    d: int = 16
    k: int = 1
    fg_cluster_spread: float = 0.1
    distractor_fraction: float = 0.0
    distractor_proximity: float = 0.8
    n_classes: int = 10

    def validate(self) -> "GeneratorConfig":
        if min(self.h, self.w, self.d, self.k, self.n_classes) < 1:
            raise ConfigError("h, w, d, k, n_classes must all be >= 1")
        if self.d < 2:
            raise ConfigError("feature dimension must be >= 2 to place anchors")
        if self.fg_cluster_spread < 0:
            raise ConfigError(f"fg_cluster_spread must be >= 0, got {self.fg_cluster_spread}")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ConfigError(f"distractor_fraction must be in [0,1], got {self.distractor_fraction}")
        if not 0.0 <= self.distractor_proximity <= 1.0:
            raise ConfigError(f"distractor_proximity must be in [0,1], got {self.distractor_proximity}")
        if self.distractor_fraction + MIN_FG_FRACTION > 1.0:
            raise ConfigError(
                "distractor_fraction plus the minimum foreground fraction exceeds 1"
            )
        if not _rect_window_feasible(self.h, self.w):
            raise ConfigError(
                f"no rectangle covers {MIN_FG_FRACTION:.0%}-{MAX_FG_FRACTION:.0%} of a "
                f"{self.h}x{self.w} grid"
            )
        return self


@dataclass(frozen=True)
class Support:
    features: np.ndarray  # [h, w, d] float64
    mask: np.ndarray      # [h, w] uint8, at least one foreground pixel


@dataclass(frozen=True, eq=False)
class Episode:
    supports: tuple
    query_features: np.ndarray
    query_gt: np.ndarray
    class_id: int
    seed: int

    @property
    def k(self) -> int:
        return len(self.supports)

    @property
    def shape(self) -> tuple:
        return self.query_features.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.seed == other.seed
            and len(self.supports) == len(other.supports)
            and np.array_equal(self.query_features, other.query_features)
            and np.array_equal(self.query_gt, other.query_gt)
            and all(
                np.array_equal(a.features, b.features) and np.array_equal(a.mask, b.mask)
                for a, b in zip(self.supports, other.supports)
            )
        )


@dataclass(frozen=True)
class EpisodeInfo:
    """Generation-time bookkeeping exposed for tests and benchmark analysis."""

    distractor_mask: np.ndarray  # [h, w] bool, True at engineered trap pixels
    anchor: np.ndarray           # class anchor direction, unit norm
    background_center: np.ndarray


def _rect_window_feasible(h: int, w: int) -> bool:
    area = h * w
    for rh in range(1, h + 1):
        for rw in range(1, w + 1):
            if MIN_FG_FRACTION * area <= rh * rw <= MAX_FG_FRACTION * area:
                return True
    return False


def class_anchor(class_id: int, d: int) -> np.ndarray:
    """Unit anchor direction for one class, orthogonal to the background axis."""
    if class_id < 0:
        raise ConfigError(f"class_id must be >= 0, got {class_id}")
    rng = make_rng(_ANCHOR_SALT, class_id)
    v = rng.standard_normal(d)
    v[0] = 0.0
    norm = np.linalg.norm(v)
    if norm < 1e-12:  # absurdly unlikely; fall back to a fixed direction
        v = np.zeros(d)
        v[1] = 1.0
        norm = 1.0
    return v / norm


def background_center(d: int) -> np.ndarray:
    c = np.zeros(d)
    c[0] = FAR_CLUSTER_DISTANCE
    return c


def _sample_fg_rect(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    area = h * w
    while True:
        rh = int(rng.integers(1, h + 1))
        rw = int(rng.integers(1, w + 1))
        if MIN_FG_FRACTION * area <= rh * rw <= MAX_FG_FRACTION * area:
            break
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top : top + rh, left : left + rw] = 1
    return mask


def generate_episode(cfg: GeneratorConfig, class_id: int, seed: int) -> Episode:
    episode, _ = generate_episode_with_info(cfg, class_id, seed)
    return episode


def generate_episode_with_info(cfg: GeneratorConfig, class_id: int, seed: int):
    """Deterministically build one episode plus its generation bookkeeping."""
    cfg.validate()
    if not 0 <= class_id < cfg.n_classes:
        raise ConfigError(f"class_id {class_id} outside [0, {cfg.n_classes})")
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")

    rng = make_rng(_EPISODE_SALT, class_id, seed)
    anchor = class_anchor(class_id, cfg.d)
    bg = background_center(cfg.d)
    trap_center = (1.0 - cfg.distractor_proximity) * bg + cfg.distractor_proximity * anchor

    def cluster_field(mask: np.ndarray, distractors: np.ndarray) -> np.ndarray:
        centers = np.where(mask.astype(bool)[:, :, None], anchor, bg)
        centers = np.where(distractors[:, :, None], trap_center, centers)
        noise = rng.standard_normal((cfg.h, cfg.w, cfg.d))
        return centers + cfg.fg_cluster_spread * noise

    no_traps = np.zeros((cfg.h, cfg.w), dtype=bool)
    supports = []
    for _ in range(cfg.k):
        mask = _sample_fg_rect(rng, cfg.h, cfg.w)
        supports.append(Support(features=cluster_field(mask, no_traps), mask=mask))

    query_gt = _sample_fg_rect(rng, cfg.h, cfg.w)
    bg_rows, bg_cols = np.nonzero(query_gt == 0)
    n_traps = int(round(cfg.distractor_fraction * bg_rows.size))
    trap_mask = np.zeros((cfg.h, cfg.w), dtype=bool)
    if n_traps > 0:
        chosen = rng.choice(bg_rows.size, size=n_traps, replace=False)
        trap_mask[bg_rows[chosen], bg_cols[chosen]] = True
    query_features = cluster_field(query_gt, trap_mask)

    episode = Episode(
        supports=tuple(supports),
        query_features=query_features,
        query_gt=query_gt,
        class_id=class_id,
        seed=seed,
    )
    info = EpisodeInfo(distractor_mask=trap_mask, anchor=anchor, background_center=bg)
    return episode, info


# ---------------------------------------------------------------------------
# binary format


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncationError(
                f"{self.path}: truncated while reading {what}; expected {n} bytes at "
                f"offset {self.pos}, only {len(self.blob) - self.pos} remain"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 8, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.blob):
            raise InvalidValueError(
                f"{self.path}: {len(self.blob) - self.pos} unexpected trailing bytes"
            )


def _check_magic(reader: _Reader, magic: bytes):
    got = reader.take(len(magic), "magic bytes")
    if got != magic:
        raise MagicMismatchError(
            f"{reader.path}: bad magic {got!r}, expected {magic!r}"
        )


def _read_mask(reader: _Reader, h: int, w: int, what: str) -> np.ndarray:
    raw = np.frombuffer(reader.take(h * w, what), dtype=np.uint8)
    if not np.isin(raw, (0, 1)).all():
        raise InvalidValueError(f"{reader.path}: {what} contains non-binary values")
    return raw.reshape(h, w).copy()


def write_episode(episode: Episode, path) -> None:
    h, w, d = episode.query_features.shape
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    parts.append(struct.pack("<IIII", episode.k, h, w, d))
    for sup in episode.supports:
        parts.append(sup.mask.astype(np.uint8).tobytes())
        parts.append(sup.features.astype("<f8").tobytes())
    parts.append(episode.query_gt.astype(np.uint8).tobytes())
    parts.append(episode.query_features.astype("<f8").tobytes())
    parts.append(struct.pack("<QQ", episode.class_id, episode.seed))
    Path(path).write_bytes(b"".join(parts))


def read_episode(path) -> Episode:
    reader = _Reader(Path(path).read_bytes(), path)
    _check_magic(reader, MAGIC)
    version = reader.u16("format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported episode format version {version} (expected {FORMAT_VERSION})"
        )
    k = reader.u32("shot count")
    h = reader.u32("height")
    w = reader.u32("width")
    d = reader.u32("feature dim")
    if k < 1 or min(h, w, d) < 1:
        raise InvalidValueError(f"{path}: degenerate header k={k} h={h} w={w} d={d}")

    supports = []
    for i in range(k):
        mask = _read_mask(reader, h, w, f"support {i} mask")
        if mask.sum() == 0:
            raise InvalidValueError(f"{path}: support {i} mask has no foreground pixels")
        feats = reader.f64_array(h * w * d, f"support {i} features").reshape(h, w, d)
        if not np.isfinite(feats).all():
            raise InvalidValueError(f"{path}: support {i} features contain non-finite values")
        supports.append(Support(features=feats, mask=mask))

    query_gt = _read_mask(reader, h, w, "query mask")
    query_features = reader.f64_array(h * w * d, "query features").reshape(h, w, d)
    if not np.isfinite(query_features).all():
        raise InvalidValueError(f"{path}: query features contain non-finite values")
    class_id = reader.u64("class id")
    seed = reader.u64("seed")
    reader.done()
    return Episode(
        supports=tuple(supports),
        query_features=query_features,
        query_gt=query_gt,
        class_id=class_id,
        seed=seed,
    )
