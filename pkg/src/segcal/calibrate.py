"""Attention score calibration for the cross-attention layers.

Two complementary mechanisms, both driven by the frozen predictor's soft
mask and the support ground-truth mask:

* a learned re-weight matrix that scales each query-support score pair by
  the inner product of per-pixel mask embeddings, softly discounting likely
  foreground-background pairs;
* a hard additive mask that sets the score of certainly mismatched pairs
  (confident-background query pixel vs foreground support pixel, or
  confident-foreground query pixel vs background support pixel) to -inf so
  they receive exactly zero attention.

No gradient flows through the thresholding or the hard mask; the projection
parameters of the re-weight matrix are the module's only learnables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor import (
    Tensor,
    add_rowvec,
    masked_softmax_rows,
    matmul,
    mul,
    scalar_mul,
    transpose2d,
)


@dataclass
class CalibrationParams:
    """Per-block learnables and thresholds of the calibration module.

    The projection lifts one scalar mask value to ``d_c`` dimensions and is
    shared between the query-mask and support-mask sides.
    """

    proj_weight: Tensor  # [1, d_c]
    proj_bias: Tensor    # [d_c]
    gamma_fg: float = 0.7
    gamma_bg: float = 0.3

    def __post_init__(self):
        check_thresholds(self.gamma_fg, self.gamma_bg)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.proj_w": self.proj_weight, f"{prefix}.proj_b": self.proj_bias}


def check_thresholds(gamma_fg: float, gamma_bg: float):
    if not 0.0 < gamma_bg < gamma_fg < 1.0:
        raise ConfigError(
            f"thresholds must satisfy 0 < gamma_bg < gamma_fg < 1, got "
            f"gamma_bg={gamma_bg}, gamma_fg={gamma_fg}"
        )


def init_calibration_params(
    d_c: int, rng: np.random.Generator, gamma_fg: float = 0.7, gamma_bg: float = 0.3
) -> CalibrationParams:
    """Seeded uniform weight at scale 1.0 so mask values 0 and 1 start in
    distinguishable embedding clusters; zero bias."""
    return CalibrationParams(
        proj_weight=Tensor(rng.uniform(-1.0, 1.0, size=(1, d_c))),
        proj_bias=Tensor(np.zeros(d_c)),
        gamma_fg=gamma_fg,
        gamma_bg=gamma_bg,
    )


@dataclass(frozen=True)
class ThresholdedMask:
    """Soft mask banded into confident-foreground / confident-background /
    pass-through regions."""

    values: np.ndarray        # 1, 0, or the original probability
    confident_fg: np.ndarray  # bool, original >= gamma_fg
    confident_bg: np.ndarray  # bool, original <= gamma_bg


def threshold_mask(soft_mask: np.ndarray, gamma_fg: float, gamma_bg: float) -> ThresholdedMask:
    """Band the predictor's probabilities; boundaries are inclusive."""
    check_thresholds(gamma_fg, gamma_bg)
    soft_mask = np.asarray(soft_mask, dtype=np.float64)
    confident_fg = soft_mask >= gamma_fg
    confident_bg = soft_mask <= gamma_bg
    values = np.where(confident_fg, 1.0, np.where(confident_bg, 0.0, soft_mask))
    return ThresholdedMask(values=values, confident_fg=confident_fg, confident_bg=confident_bg)


def build_reweight_matrix(
    query_mask: np.ndarray, support_mask_flat: np.ndarray, params: CalibrationParams
) -> Tensor:
    """Learned pairwise re-weights: embed both flattened masks per pixel and
    take the [n_q, n_s] matrix of embedding inner products.

    The masks are constants; gradients reach only the projection parameters.
    """
    q = Tensor(np.asarray(query_mask, dtype=np.float64).reshape(-1, 1))
    s = Tensor(np.asarray(support_mask_flat, dtype=np.float64).reshape(-1, 1))
    proj_q = add_rowvec(matmul(q, params.proj_weight), params.proj_bias)
    proj_s = add_rowvec(matmul(s, params.proj_weight), params.proj_bias)
    return matmul(proj_q, transpose2d(proj_s))


def build_attention_mask(banded: ThresholdedMask, support_mask_flat: np.ndarray) -> Tensor:
    """Additive {0, -inf} mask killing certainly mismatched pairs.

    Entry (i, j) is -inf iff query pixel i is confidently background and
    support pixel j is foreground, or query pixel i is confidently
    foreground and support pixel j is background.  Evaluated on the boolean
    confidence bands rather than by floating-point equality.
    """
    support_fg = np.asarray(support_mask_flat).reshape(-1).astype(bool)
    qbg = banded.confident_bg.reshape(-1)
    qfg = banded.confident_fg.reshape(-1)
    mismatch = (qbg[:, None] & support_fg[None, :]) | (qfg[:, None] & ~support_fg[None, :])
    return Tensor.mask(np.where(mismatch, -np.inf, 0.0))


def calibrated_cross_attention(q: Tensor, k: Tensor, v: Tensor, reweight: Tensor, hard_mask):
    """One head of re-weighted, hard-masked scaled dot-product attention.

    Scores are q k^T / sqrt(d_head), multiplied elementwise by the re-weight
    matrix, then shifted by the additive mask before the row softmax.  Rows
    whose mask is entirely -inf fall back to the un-masked re-weighted
    softmax.  Returns (attention, attention @ v).
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError(
            f"attention inputs must be matrices, got {q.shape}, {k.shape}, {v.shape}"
        )
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(
            f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}"
        )
    d_head = q.shape[1]
    scores = scalar_mul(matmul(q, transpose2d(k)), 1.0 / np.sqrt(d_head))
    if reweight is not None:
        if reweight.shape != (q.shape[0], k.shape[0]):
            raise ShapeMismatchError(
                f"re-weight matrix is {reweight.shape}, scores are {(q.shape[0], k.shape[0])}"
            )
        scores = mul(reweight, scores)
    attention = masked_softmax_rows(scores, hard_mask)
    return attention, matmul(attention, v)
