"""Prototype-guided feature enhancement.

Before each self-attention layer, support and query feature maps are
enriched with a class prototype along two parallel branches: an aggressive
branch whose prototype comes from the model's own cosine-based soft mask of
the query, and a conservative branch whose prototype comes from the frozen
predictor's soft mask.  The two branch outputs are fused by a 1x1
convolution and added back to the input features, so zero weights reduce the
whole module to the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    MASKED_MEAN_EPS,
    Tensor,
    add,
    add_const,
    broadcast_spatial,
    concat_last,
    conv1x1,
    cosine,
    cosine_map,
    masked_mean,
    masked_softmax_rows,
    masked_sum,
    reshape,
    scalar_mul,
    scale_by,
    slice_last,
)

logger = logging.getLogger(__name__)


@dataclass
class EnhanceParams:
    """Learnable pieces of one block's enhancement module.

    The aggressive/conservative injection convolutions map [F ; prototype]
    (2d channels) back to d channels; each is shared between the support and
    query streams.  The fuse convolution maps the concatenated branch
    outputs (2d channels) to d channels before the residual.
    """

    aggressive_weight: Tensor   # [2d, d]
    aggressive_bias: Tensor     # [d]
    conservative_weight: Tensor
    conservative_bias: Tensor
    fuse_weight: Tensor         # [2d, d]
    fuse_bias: Tensor           # [d]
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}.aggressive_w": self.aggressive_weight,
            f"{prefix}.aggressive_b": self.aggressive_bias,
            f"{prefix}.conservative_w": self.conservative_weight,
            f"{prefix}.conservative_b": self.conservative_bias,
            f"{prefix}.fuse_w": self.fuse_weight,
            f"{prefix}.fuse_b": self.fuse_bias,
        }


def init_enhance_params(d: int, rng: np.random.Generator, temperature: float = 0.1) -> EnhanceParams:
    """Seeded scaled-uniform weights (scale 1/sqrt(2d)), zero biases."""
    scale = 1.0 / np.sqrt(2 * d)

    def w():
        return Tensor(rng.uniform(-scale, scale, size=(2 * d, d)))

    zero = lambda: Tensor(np.zeros(d))
    return EnhanceParams(
        aggressive_weight=w(),
        aggressive_bias=zero(),
        conservative_weight=w(),
        conservative_bias=zero(),
        fuse_weight=w(),
        fuse_bias=zero(),
        temperature=temperature,
    )


def masked_average_pool(features: Tensor, mask: Tensor):
    """Mask-weighted mean of pixel features; the class-prototype primitive.

    Returns (prototype, degenerate) where ``degenerate`` flags an all-zero
    mask, in which case the prototype is the zero vector.
    """
    degenerate = float(mask.data.sum()) <= 0.0
    if degenerate:
        logger.warning("masked_average_pool: mask sums to zero, returning zero prototype")
    return masked_mean(features, mask), degenerate


def joint_support_prototypes(support_features, support_masks):
    """Foreground and background prototypes pooled jointly over all k supports.

    ``support_masks`` are the binary ground-truth masks (constants); feature
    gradients flow through the pooled sums.
    """
    fg_terms, bg_terms = [], []
    fg_total, bg_total = 0.0, 0.0
    for feats, mask in zip(support_features, support_masks):
        m = mask.astype(np.float64)
        fg_terms.append(masked_sum(feats, Tensor(m)))
        bg_terms.append(masked_sum(feats, Tensor(1.0 - m)))
        fg_total += float(m.sum())
        bg_total += float((1.0 - m).sum())

    def combine(terms, total):
        acc = terms[0]
        for t in terms[1:]:
            acc = add(acc, t)
        return scalar_mul(acc, 1.0 / (total + MASKED_MEAN_EPS))

    return combine(fg_terms, fg_total), combine(bg_terms, bg_total)


def predict_soft_mask(query_features: Tensor, w_f: Tensor, w_b: Tensor, temperature: float) -> Tensor:
    """Per-pixel two-way softmax over cosine similarities to the prototypes."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    h, w, _ = query_features.shape
    cos_f = reshape(cosine_map(query_features, w_f), (h * w, 1))
    cos_b = reshape(cosine_map(query_features, w_b), (h * w, 1))
    logits = scalar_mul(concat_last(cos_f, cos_b), 1.0 / temperature)
    probs = masked_softmax_rows(logits)
    return reshape(slice_last(probs, 0, 1), (h, w))


def fuse_prototypes(w_sf: Tensor, w_qf: Tensor):
    """Adaptive convex blend of the support and query foreground prototypes.

    The blend weight is (cos(w_sf, w_qf) + 1) / 2, so identical prototypes
    keep the support one and antipodal prototypes keep the query one.
    Returns (prototype, alpha).
    """
    alpha = add_const(scalar_mul(cosine(w_sf, w_qf), 0.5), 0.5)
    one_minus = add_const(scalar_mul(alpha, -1.0), 1.0)
    fused = add(scale_by(w_sf, alpha), scale_by(w_qf, one_minus))
    return fused, alpha


def enhance(features: Tensor, prototype: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Inject a prototype into every pixel: conv1x1 over [F ; p broadcast]."""
    h, w, _ = features.shape
    stacked = concat_last(features, broadcast_spatial(prototype, h, w))
    return conv1x1(stacked, weight, bias)


def enhance_features(support_features, support_masks, query_features, predictor_mask, params):
    """Run the full enhancement module on every stream of one block.

    Arguments are lists over the k supports plus the query tensor and the
    frozen predictor's soft mask (a constant array).  Returns the enhanced
    support list, the enhanced query, and the aggressive soft mask's values
    for diagnostics.
    """
    w_sf, w_sb = joint_support_prototypes(support_features, support_masks)

    aggressive_mask = predict_soft_mask(query_features, w_sf, w_sb, params.temperature)
    w_qf = masked_mean(query_features, aggressive_mask)
    p_aggr, _ = fuse_prototypes(w_sf, w_qf)

    w_qf_cons = masked_mean(query_features, Tensor(np.asarray(predictor_mask, dtype=np.float64)))
    p_cons, _ = fuse_prototypes(w_sf, w_qf_cons)

    def enhance_stream(features: Tensor) -> Tensor:
        branch_a = enhance(features, p_aggr, params.aggressive_weight, params.aggressive_bias)
        branch_c = enhance(features, p_cons, params.conservative_weight, params.conservative_bias)
        fused = conv1x1(concat_last(branch_a, branch_c), params.fuse_weight, params.fuse_bias)
        return add(fused, features)

    enhanced_supports = [enhance_stream(f) for f in support_features]
    enhanced_query = enhance_stream(query_features)
    return enhanced_supports, enhanced_query, aggressive_mask.data.copy()
