"""The trainable segmentation model: stacked attention blocks with optional
feature enhancement and attention calibration, a linear two-class decoder,
pixel-wise cross-entropy training, and the PAHP parameter file format.

Each block runs (1) feature enhancement on both streams, (2) multi-head
self-attention per stream with residual and post-layer-norm, (3) multi-head
cross-attention from query to support tokens, optionally calibrated.  The
cross-attention output *replaces* the query features (no residual unless
``cross_residual`` is set), and the support stream passes to the next block
untouched by cross-attention.  With k > 1 shots, prototypes pool over all
supports jointly and the cross-attention keys/values are the concatenation
of every support's token sequence.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .calibrate import (
    CalibrationParams,
    build_attention_mask,
    build_reweight_matrix,
    calibrated_cross_attention,
    check_thresholds,
    init_calibration_params,
    threshold_mask,
)
from .enhance import EnhanceParams, enhance_features, init_enhance_params
from .episodes import Episode, _Reader, _check_magic
from .errors import (
    ConfigError,
    ConfigMismatchError,
    InvalidValueError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .predictor import PredictorHandle, predict
from .rng import make_rng
from .tensor import (
    Tape,
    Tensor,
    add,
    add_const,
    add_rowvec,
    backward,
    clip,
    concat_last,
    concat_rows,
    conv1x1,
    finite_diff_grad,
    layer_norm,
    log,
    masked_softmax_rows,
    matmul,
    mean_all,
    mul,
    normalize_tokens,
    relative_error,
    reshape,
    scalar_mul,
    slice_last,
    transpose2d,
)

PARAMS_MAGIC = b"PAHP"
PARAMS_FORMAT_VERSION = 1

LOSS_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 200
    step_size: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    n_heads: int = 2
    d: int = 16
    d_c: int = 16
    temperature: float = 0.1
    gamma_fg: float = 0.7
    gamma_bg: float = 0.3
    enhance_enabled: bool = True
    calibrate_enabled: bool = True
    cross_residual: bool = False
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> "ModelConfig":
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ConfigError(
                f"feature dim {self.d} must be divisible by n_heads {self.n_heads}"
            )
        if self.d_c < 1:
            raise ConfigError(f"d_c must be >= 1, got {self.d_c}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        check_thresholds(self.gamma_fg, self.gamma_bg)
        if self.train.steps < 0 or self.train.step_size < 0:
            raise ConfigError("training steps and step size must be non-negative")
        return self

    def structure_fields(self) -> tuple:
        """Fields that must agree between a parameter file and its consumer."""
        return (
            self.n_blocks,
            self.n_heads,
            self.d,
            self.d_c,
            self.temperature,
            self.gamma_fg,
            self.gamma_bg,
            self.enhance_enabled,
            self.calibrate_enabled,
            self.cross_residual,
        )


@dataclass
class BlockDiagnostics:
    aggressive_mask: Optional[np.ndarray]  # soft mask from the enhancement module
    reweight: Optional[np.ndarray]         # learned score re-weights
    attention_mask: Optional[np.ndarray]   # {0, -inf} hard mask


@dataclass
class Prediction:
    soft: np.ndarray      # [h, w] foreground probability
    binary: np.ndarray    # [h, w] uint8, soft >= 0.5
    diagnostics: list
    soft_tensor: Tensor   # tape-carrying version of ``soft`` for the loss


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int) -> dict:
    """Seeded parameter dict.  All groups are always created (unused toggled
    modules included) so every ablation variant shares identical common
    weights for a given seed."""
    config.validate()
    rng = make_rng(seed)
    d = config.d
    scale = 1.0 / math.sqrt(d)
    params: dict[str, Tensor] = {}

    def linear(name):
        params[f"{name}.w"] = Tensor(rng.uniform(-scale, scale, size=(d, d)))
        params[f"{name}.b"] = Tensor(np.zeros(d))

    for l in range(config.n_blocks):
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"block{l}.self.{proj}")
        params[f"block{l}.self.ln_g"] = Tensor(np.ones(d))
        params[f"block{l}.self.ln_b"] = Tensor(np.zeros(d))
        for proj in ("wq", "wk", "wv"):
            linear(f"block{l}.cross.{proj}")
        enh = init_enhance_params(d, rng, temperature=config.temperature)
        params.update(enh.named(f"block{l}.enhance"))
        cal = init_calibration_params(config.d_c, rng, config.gamma_fg, config.gamma_bg)
        params.update(cal.named(f"block{l}.calibrate"))
    params["decoder.w"] = Tensor(rng.uniform(-scale, scale, size=(d, 2)))
    params["decoder.b"] = Tensor(np.zeros(2))
    return params


def _enhance_params(params: dict, config: ModelConfig, l: int) -> EnhanceParams:
    p = f"block{l}.enhance"
    return EnhanceParams(
        aggressive_weight=params[f"{p}.aggressive_w"],
        aggressive_bias=params[f"{p}.aggressive_b"],
        conservative_weight=params[f"{p}.conservative_w"],
        conservative_bias=params[f"{p}.conservative_b"],
        fuse_weight=params[f"{p}.fuse_w"],
        fuse_bias=params[f"{p}.fuse_b"],
        temperature=config.temperature,
    )


def _calibration_params(params: dict, config: ModelConfig, l: int) -> CalibrationParams:
    p = f"block{l}.calibrate"
    return CalibrationParams(
        proj_weight=params[f"{p}.proj_w"],
        proj_bias=params[f"{p}.proj_b"],
        gamma_fg=config.gamma_fg,
        gamma_bg=config.gamma_bg,
    )


# ---------------------------------------------------------------------------
# layers


def _project(tokens: Tensor, params: dict, name: str) -> Tensor:
    return add_rowvec(matmul(tokens, params[f"{name}.w"]), params[f"{name}.b"])


def _heads(x: Tensor, n_heads: int):
    d = x.shape[1]
    dh = d // n_heads
    return [slice_last(x, i * dh, (i + 1) * dh) for i in range(n_heads)]


def _concat_heads(parts):
    out = parts[0]
    for p in parts[1:]:
        out = concat_last(out, p)
    return out


def self_attention(features: Tensor, params: dict, config: ModelConfig, l: int) -> Tensor:
    """Multi-head self-attention over the pixel tokens of one feature map,
    with residual connection and post-layer-norm."""
    h, w, d = features.shape
    x = reshape(features, (h * w, d))
    q = _project(x, params, f"block{l}.self.wq")
    k = _project(x, params, f"block{l}.self.wk")
    v = _project(x, params, f"block{l}.self.wv")
    dh = d // config.n_heads
    outs = []
    for qh, kh, vh in zip(*(_heads(m, config.n_heads) for m in (q, k, v))):
        scores = scalar_mul(matmul(qh, transpose2d(kh)), 1.0 / math.sqrt(dh))
        outs.append(matmul(masked_softmax_rows(scores), vh))
    o = _project(_concat_heads(outs), params, f"block{l}.self.wo")
    y = layer_norm(add(x, o), params[f"block{l}.self.ln_g"], params[f"block{l}.self.ln_b"])
    return reshape(y, (h, w, d))


def _cross_attention(query_feat, support_feats, support_flat_mask, predictor_mask,
                     params, config, l):
    """Query tokens attend over the concatenated support tokens."""
    h, w, d = query_feat.shape
    xq = reshape(query_feat, (h * w, d))
    token_blocks = [reshape(f, (f.shape[0] * f.shape[1], d)) for f in support_feats]
    xs = token_blocks[0]
    for blk in token_blocks[1:]:
        xs = concat_rows(xs, blk)

    q = _project(xq, params, f"block{l}.cross.wq")
    k = _project(xs, params, f"block{l}.cross.wk")
    v = _project(xs, params, f"block{l}.cross.wv")

    reweight = None
    hard = None
    if config.calibrate_enabled:
        cal = _calibration_params(params, config, l)
        reweight = build_reweight_matrix(predictor_mask, support_flat_mask, cal)
        banded = threshold_mask(predictor_mask, config.gamma_fg, config.gamma_bg)
        hard = build_attention_mask(banded, support_flat_mask)

    outs = []
    attns = []
    for qh, kh, vh in zip(*(_heads(m, config.n_heads) for m in (q, k, v))):
        attn, out = calibrated_cross_attention(qh, kh, vh, reweight, hard)
        attns.append(attn)
        outs.append(out)
    out = _concat_heads(outs)
    if config.cross_residual:
        out = add(out, xq)
    diag = BlockDiagnostics(
        aggressive_mask=None,
        reweight=reweight.data.copy() if reweight is not None else None,
        attention_mask=hard.data.copy() if hard is not None else None,
    )
    return reshape(out, (h, w, d)), diag


def block_forward(support_feats, query_feat, support_masks, predictor_mask,
                  params, config: ModelConfig, l: int):
    """One attention block.  Returns (new supports, new query, diagnostics).

    The support outputs are the self-attention results; cross-attention only
    rewrites the query stream.
    """
    aggressive = None
    if config.enhance_enabled:
        support_feats, query_feat, aggressive = enhance_features(
            support_feats, support_masks, query_feat, predictor_mask,
            _enhance_params(params, config, l),
        )
    support_feats = [self_attention(f, params, config, l) for f in support_feats]
    query_feat = self_attention(query_feat, params, config, l)

    support_flat = np.concatenate([m.reshape(-1) for m in support_masks])
    query_feat, diag = _cross_attention(
        query_feat, support_feats, support_flat, predictor_mask, params, config, l
    )
    diag.aggressive_mask = aggressive
    return support_feats, query_feat, diag


def decode(query_feat: Tensor, params: dict) -> Tensor:
    """Per-pixel linear map to two logits, softmax, foreground channel."""
    h, w, _ = query_feat.shape
    logits = conv1x1(query_feat, params["decoder.w"], params["decoder.b"])
    probs = masked_softmax_rows(reshape(logits, (h * w, 2)))
    return reshape(slice_last(probs, 0, 1), (h, w))


def forward(episode: Episode, predictor_mask: np.ndarray, params: dict,
            config: ModelConfig) -> Prediction:
    """Full forward pass for any k >= 1.  Pure given its inputs; runs on a
    tape only if the caller watched the parameters."""
    h, w, d = episode.query_features.shape
    if d != config.d:
        raise ConfigError(f"episode features have d={d}, model expects d={config.d}")
    predictor_mask = np.asarray(predictor_mask, dtype=np.float64)
    if predictor_mask.shape != (h, w):
        raise ConfigError(
            f"predictor mask is {predictor_mask.shape}, episode is {(h, w)}"
        )

    # Unit-normalize each token at the entrance (scaled back to sqrt(d)) so
    # attention scores reflect direction, not raw backbone magnitudes.
    token_scale = math.sqrt(config.d)
    support_feats = [
        normalize_tokens(Tensor(s.features), token_scale) for s in episode.supports
    ]
    support_masks = [s.mask for s in episode.supports]
    query_feat = normalize_tokens(Tensor(episode.query_features), token_scale)

    diagnostics = []
    for l in range(config.n_blocks):
        support_feats, query_feat, diag = block_forward(
            support_feats, query_feat, support_masks, predictor_mask, params, config, l
        )
        diagnostics.append(diag)

    soft = decode(query_feat, params)
    soft_data = soft.data.copy()
    return Prediction(
        soft=soft_data,
        binary=(soft_data >= 0.5).astype(np.uint8),
        diagnostics=diagnostics,
        soft_tensor=soft,
    )


def loss(prediction: Prediction, query_gt: np.ndarray) -> Tensor:
    """Mean pixel-wise binary cross-entropy with probability clamping."""
    soft = prediction.soft_tensor
    gt = np.asarray(query_gt, dtype=np.float64)
    if gt.shape != soft.shape:
        raise ConfigError(f"ground truth is {gt.shape}, prediction is {soft.shape}")
    p = clip(soft, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    one_minus_p = add_const(scalar_mul(p, -1.0), 1.0)
    ll = add(mul(Tensor(gt), log(p)), mul(Tensor(1.0 - gt), log(one_minus_p)))
    return scalar_mul(mean_all(ll), -1.0)


# ---------------------------------------------------------------------------
# training


def train(episodes: Iterable[Episode], predictor_handle: PredictorHandle,
          config: ModelConfig, initial_params: Optional[dict] = None):
    """Plain gradient descent over an episode stream.

    One episode per step; the frozen predictor runs off-tape.  Returns the
    final parameters and the per-step loss trace.  Deterministic given the
    stream, the seed, and the settings.
    """
    config.validate()
    params = initial_params if initial_params is not None else init_params(
        config, config.train.seed
    )
    losses: list[float] = []
    stream = iter(episodes)
    for step in range(config.train.steps):
        try:
            episode = next(stream)
        except StopIteration:
            raise ConfigError(f"episode stream exhausted at step {step}") from None
        mask = predict(predictor_handle, episode)

        tape = Tape()
        for p in params.values():
            tape.watch(p)
        try:
            prediction = forward(episode, mask, params, config)
            step_loss = loss(prediction, episode.query_gt)
        except InvalidValueError as exc:
            raise TrainingDivergedError(f"non-finite values at step {step}: {exc}") from exc
        value = step_loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        grads = backward(tape, step_loss)
        losses.append(value)

        updated = {}
        for name, p in params.items():
            g = grads[p]
            if not np.isfinite(g).all():
                raise TrainingDivergedError(
                    f"non-finite gradient for parameter {name} at step {step}"
                )
            with np.errstate(over="ignore"):
                stepped = p.data - config.train.step_size * g
            if not np.isfinite(stepped).all():
                raise TrainingDivergedError(
                    f"parameter {name} became non-finite at step {step}"
                )
            updated[name] = Tensor(stepped)
        params = updated
    return params, losses


# Gradients whose max-norm sits below this floor count as zero: central
# differences of an O(1) loss at eps=1e-6 carry ~1e-10 of roundoff noise, so
# comparing exactly-zero gradients (e.g. the self-attention key bias, which
# cancels under the softmax shift) against raw FD output is meaningless.
FD_ZERO_FLOOR = 1e-5


def gradient_report(episode: Episode, predictor_mask: np.ndarray, params: dict,
                    config: ModelConfig, eps: float = 1e-6,
                    param_names: Optional[list] = None) -> dict:
    """Max-norm relative error between backward and central differences, per
    named parameter.  This is the end-to-end gradient suite."""
    tape = Tape()
    for p in params.values():
        tape.watch(p)
    prediction = forward(episode, predictor_mask, params, config)
    grads = backward(tape, loss(prediction, episode.query_gt))

    report = {}
    for name in param_names if param_names is not None else params:
        def objective(x, _name=name):
            trial = dict(params)
            trial[_name] = x
            pred = forward(episode, predictor_mask, trial, config)
            return loss(pred, episode.query_gt)

        fd = finite_diff_grad(objective, params[name], eps=eps)
        report[name] = relative_error(grads[params[name]], fd, floor=FD_ZERO_FLOOR)
    return report


# ---------------------------------------------------------------------------
# PAHP parameter files


def save_params(params: dict, config: ModelConfig, path) -> None:
    flags = (
        (1 if config.enhance_enabled else 0)
        | (2 if config.calibrate_enabled else 0)
        | (4 if config.cross_residual else 0)
    )
    parts = [PARAMS_MAGIC, struct.pack("<H", PARAMS_FORMAT_VERSION)]
    parts.append(
        struct.pack(
            "<IIIIdddBIdQ",
            config.n_blocks,
            config.n_heads,
            config.d,
            config.d_c,
            config.temperature,
            config.gamma_fg,
            config.gamma_bg,
            flags,
            config.train.steps,
            config.train.step_size,
            config.train.seed,
        )
    )
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path, expect: Optional[ModelConfig] = None):
    """Read a PAHP file; returns (config, params).

    If ``expect`` is given, its structural fields must match the stored
    config exactly (training settings are a runtime choice and are not
    compared).
    """
    reader = _Reader(Path(path).read_bytes(), path)
    _check_magic(reader, PARAMS_MAGIC)
    version = reader.u16("format version")
    if version != PARAMS_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported parameter format version {version} "
            f"(expected {PARAMS_FORMAT_VERSION})"
        )
    n_blocks = reader.u32("n_blocks")
    n_heads = reader.u32("n_heads")
    d = reader.u32("d")
    d_c = reader.u32("d_c")
    temperature = struct.unpack("<d", reader.take(8, "temperature"))[0]
    gamma_fg = struct.unpack("<d", reader.take(8, "gamma_fg"))[0]
    gamma_bg = struct.unpack("<d", reader.take(8, "gamma_bg"))[0]
    flags = reader.take(1, "flags")[0]
    steps = reader.u32("train steps")
    step_size = struct.unpack("<d", reader.take(8, "step size"))[0]
    seed = reader.u64("train seed")
    config = ModelConfig(
        n_blocks=n_blocks,
        n_heads=n_heads,
        d=d,
        d_c=d_c,
        temperature=temperature,
        gamma_fg=gamma_fg,
        gamma_bg=gamma_bg,
        enhance_enabled=bool(flags & 1),
        calibrate_enabled=bool(flags & 2),
        cross_residual=bool(flags & 4),
        train=TrainSettings(steps=steps, step_size=step_size, seed=seed),
    ).validate()

    count = reader.u32("tensor count")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name_len = reader.u16("name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        ndim = reader.take(1, "tensor rank")[0]
        shape = tuple(reader.u32(f"{name} extent") for _ in range(ndim))
        n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = reader.f64_array(n_values, f"{name} payload").reshape(shape)
        params[name] = Tensor(values)
    reader.done()

    template = init_params(config, 0)
    if set(template) != set(params):
        missing = sorted(set(template) ^ set(params))
        raise ConfigMismatchError(f"{path}: parameter names do not match config: {missing[:4]}")
    for name, tensor in params.items():
        if tensor.shape != template[name].shape:
            raise ConfigMismatchError(
                f"{path}: parameter {name} has shape {tensor.shape}, "
                f"config implies {template[name].shape}"
            )
    if expect is not None and expect.structure_fields() != config.structure_fields():
        raise ConfigMismatchError(
            f"{path}: stored config {config.structure_fields()} does not match "
            f"expected {expect.structure_fields()}"
        )
    return config, params
