"""Dense float64 tensors with a define-by-run differentiation tape.

The model needs a small, fixed set of array operations; each one here is a
forward computation paired with an analytic pullback that the tape replays
in reverse.  ``finite_diff_grad`` provides the independent central-difference
oracle every pullback is checked against.

Tensors are immutable after construction and may be shared freely between
threads.  A ``Tape`` must stay on one thread for its whole forward+backward
lifetime and is rebuilt for every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidValueError, ShapeMismatchError, TapeError

Array = np.ndarray

COSINE_EPS = 1e-12        # denominator guard in cosine similarities
MASKED_MEAN_EPS = 1e-12   # denominator guard in mask-weighted means
LAYER_NORM_EPS = 1e-6
_NORM_GUARD = 1e-12       # below this, a vector counts as zero for cosine


class Tensor:
    """Immutable dense array of float64 values, optionally on a tape.

    Values must be finite.  The single exception is the -inf sentinel used
    by additive attention masks, which is only accepted through
    ``Tensor.mask``.
    """

    __slots__ = ("data", "_node")

    def __init__(self, data, *, _allow_neg_inf: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _allow_neg_inf:
            bad = np.isnan(arr) | np.isposinf(arr)
        else:
            bad = ~np.isfinite(arr)
        if bad.any():
            raise InvalidValueError(
                "tensor values must be finite (got NaN/Inf at %d positions)"
                % int(bad.sum())
            )
        arr.flags.writeable = False
        self.data = arr
        self._node: Optional[_Node] = None

    @classmethod
    def mask(cls, data) -> "Tensor":
        """Build an additive attention mask; entries must be 0 or -inf."""
        t = cls(data, _allow_neg_inf=True)
        ok = (t.data == 0.0) | np.isneginf(t.data)
        if not ok.all():
            raise InvalidValueError("attention mask entries must be 0 or -inf")
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no tape membership.  Shares the immutable buffer."""
        out = object.__new__(Tensor)
        out.data = self.data
        out._node = None
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = " (on tape)" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("tape", "index", "input_indices", "pullback")

    def __init__(self, tape, index, input_indices, pullback):
        self.tape = tape
        self.index = index
        self.input_indices = input_indices
        self.pullback = pullback


class Tape:
    """Ordered record of operations for one forward pass.

    Operations append themselves when at least one of their inputs carries a
    node, so recording follows the data flow with no global state.  Inputs
    always precede the operations that consume them.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: list[Tensor] = []
        self.finished = False

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf whose gradient ``backward`` should return."""
        if self.finished:
            raise TapeError("cannot watch tensors on a finished tape")
        node = t._node
        if node is not None and node.tape is not self:
            if not node.tape.finished:
                raise TapeError("tensor already belongs to another active tape")
            node = None  # stale membership from a finished tape; rewatch
        if node is None:
            node = self._append((), None)
            t._node = node
        if not any(w is t for w in self._watched):
            self._watched.append(t)
        return t

    def _append(self, input_indices, pullback) -> _Node:
        node = _Node(self, len(self._nodes), input_indices, pullback)
        self._nodes.append(node)
        return node


def _record(data: Array, inputs: Sequence[Tensor], pullback, *, allow_neg_inf=False) -> Tensor:
    """Wrap an op result, recording it if any input lives on a tape."""
    tape = None
    for t in inputs:
        node = t._node
        if node is None:
            continue
        if node.tape.finished:
            # Leaves of a dead tape are plain values; intermediate results of
            # one are a sign the caller thinks they are still being tracked.
            if node.pullback is None:
                continue
            raise TapeError("input belongs to a finished tape; detach() it first")
        if tape is None:
            tape = node.tape
        elif tape is not node.tape:
            raise TapeError("operation mixes tensors from two different tapes")
    out = Tensor(data, _allow_neg_inf=allow_neg_inf)
    if tape is not None:
        indices = tuple(
            t._node.index if t._node is not None and t._node.tape is tape else -1
            for t in inputs
        )
        out._node = tape._append(indices, pullback)
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep: gradients of a scalar ``loss`` for every watched tensor.

    Visits each recorded node exactly once and marks the tape finished, so a
    tape supports a single backward pass.
    """
    if loss._node is None or loss._node.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.shape != ():
        raise ShapeMismatchError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.finished:
        raise TapeError("backward already ran on this tape")
    tape.finished = True

    grads: list[Optional[Array]] = [None] * len(tape._nodes)
    grads[loss._node.index] = np.ones((), dtype=np.float64)
    for node in reversed(tape._nodes):
        g = grads[node.index]
        if g is None or node.pullback is None:
            continue
        for idx, ig in zip(node.input_indices, node.pullback(g)):
            if idx < 0 or ig is None:
                continue
            grads[idx] = ig if grads[idx] is None else grads[idx] + ig

    out = {}
    for t in tape._watched:
        g = grads[t._node.index]
        out[t] = np.zeros(t.shape, dtype=np.float64) if g is None else np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatchError(msg)


# ---------------------------------------------------------------------------
# elementwise and scalar operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add needs equal shapes, got {a.shape} and {b.shape}")

    def pullback(g):
        return g, g

    return _record(a.data + b.data, (a, b), pullback)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _require(a.shape == b.shape, f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def pullback(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), pullback)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def pullback(g):
        return (g * c,)

    return _record(x.data * c, (x,), pullback)


def add_const(x: Tensor, c: float) -> Tensor:
    def pullback(g):
        return (g,)

    return _record(x.data + float(c), (x,), pullback)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by a scalar tensor ``s`` (grads flow to both)."""
    _require(s.shape == (), f"scale_by needs a scalar multiplier, got shape {s.shape}")
    xd, sv = x.data, float(s.data)

    def pullback(g):
        return g * sv, np.asarray(np.sum(g * xd))

    return _record(xd * sv, (x, s), pullback)


def log(x: Tensor) -> Tensor:
    if not (x.data > 0).all():
        raise InvalidValueError("log requires strictly positive values")
    xd = x.data

    def pullback(g):
        return (g / xd,)

    return _record(np.log(xd), (x,), pullback)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where no clamp fired."""
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise InvalidValueError(f"clip needs lo < hi, got {lo} and {hi}")
    xd = x.data
    inside = (xd > lo) & (xd < hi)

    def pullback(g):
        return (g * inside,)

    return _record(np.clip(xd, lo, hi), (x,), pullback)


# ---------------------------------------------------------------------------
# structural operations


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    _require(
        int(np.prod(shape, dtype=np.int64)) == x.size,
        f"cannot reshape {x.shape} to {shape}",
    )
    old = x.shape

    def pullback(g):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), pullback)


def transpose2d(x: Tensor) -> Tensor:
    _require(x.ndim == 2, f"transpose2d needs a matrix, got shape {x.shape}")

    def pullback(g):
        return (g.T,)

    return _record(x.data.T.copy(), (x,), pullback)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis."""
    _require(
        a.ndim == b.ndim and a.ndim >= 1 and a.shape[:-1] == b.shape[:-1],
        f"concat_last needs matching leading shapes, got {a.shape} and {b.shape}",
    )
    na = a.shape[-1]

    def pullback(g):
        return g[..., :na], g[..., na:]

    return _record(np.concatenate((a.data, b.data), axis=-1), (a, b), pullback)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two matrices vertically (token-sequence concatenation)."""
    _require(
        a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1],
        f"concat_rows needs matrices with equal column counts, got {a.shape} and {b.shape}",
    )
    ma = a.shape[0]

    def pullback(g):
        return g[:ma], g[ma:]

    return _record(np.concatenate((a.data, b.data), axis=0), (a, b), pullback)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Take a [start, stop) slab of the last axis."""
    n = x.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeMismatchError(f"slice [{start}:{stop}) out of range for last axis of {x.shape}")

    def pullback(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[..., start:stop] = g
        return (full,)

    return _record(x.data[..., start:stop].copy(), (x,), pullback)


def broadcast_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Tile a d-vector over an h-by-w grid."""
    _require(v.ndim == 1, f"broadcast_spatial needs a vector, got shape {v.shape}")

    def pullback(g):
        return (g.sum(axis=(0, 1)),)

    return _record(np.broadcast_to(v.data, (h, w, v.shape[0])).copy(), (v,), pullback)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shp = x.shape

    def pullback(g):
        return (np.full(shp, float(g), dtype=np.float64),)

    return _record(np.asarray(x.data.sum()), (x,), pullback)


def mean_all(x: Tensor) -> Tensor:
    shp, n = x.shape, x.size

    def pullback(g):
        return (np.full(shp, float(g) / n, dtype=np.float64),)

    return _record(np.asarray(x.data.mean()), (x,), pullback)


def masked_sum(f: Tensor, m: Tensor) -> Tensor:
    """Sum of pixel feature vectors weighted by a spatial mask."""
    _require(
        f.ndim == 3 and m.shape == f.shape[:2],
        f"masked_sum needs features [h,w,d] with mask [h,w], got {f.shape} and {m.shape}",
    )
    fd, md = f.data, m.data

    def pullback(g):
        return md[:, :, None] * g, np.einsum("hwd,d->hw", fd, g)

    return _record(np.einsum("hw,hwd->d", md, fd), (f, m), pullback)


def masked_mean(f: Tensor, m: Tensor) -> Tensor:
    """Mask-weighted spatial mean of pixel features.

    A guard of ``MASKED_MEAN_EPS`` in the denominator makes an all-zero mask
    yield the zero vector instead of dividing by zero.  Gradients flow through
    both the features and the mask weights.
    """
    _require(
        f.ndim == 3 and m.shape == f.shape[:2],
        f"masked_mean needs features [h,w,d] with mask [h,w], got {f.shape} and {m.shape}",
    )
    fd, md = f.data, m.data
    denom = float(md.sum()) + MASKED_MEAN_EPS
    out = np.einsum("hw,hwd->d", md, fd) / denom

    def pullback(g):
        gf = (md[:, :, None] / denom) * g
        gm = np.einsum("hwd,d->hw", fd - out, g) / denom
        return gf, gm

    return _record(out, (f, m), pullback)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and b.ndim == 2, f"matmul needs matrices, got {a.shape} and {b.shape}")
    _require(
        a.shape[1] == b.shape[0],
        f"matmul inner extents differ: {a.shape} vs {b.shape}",
    )
    ad, bd = a.data, b.data

    def pullback(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), pullback)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    _require(
        x.ndim == 2 and b.ndim == 1 and x.shape[1] == b.shape[0],
        f"add_rowvec needs [m,n] plus [n], got {x.shape} and {b.shape}",
    )

    def pullback(g):
        return g, g.sum(axis=0)

    return _record(x.data + b.data, (x, b), pullback)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine map: [h,w,c_in] times [c_in,c_out] plus [c_out].

    Equivalent to flattening to (h*w, c_in) and right-multiplying by the
    weight, which is exactly how the reference oracle computes it.
    """
    _require(
        x.ndim == 3 and weight.ndim == 2 and bias.ndim == 1,
        f"conv1x1 needs [h,w,c_in], [c_in,c_out], [c_out]; got {x.shape}, {weight.shape}, {bias.shape}",
    )
    _require(
        x.shape[2] == weight.shape[0],
        f"conv1x1 channel mismatch: input has {x.shape[2]} channels, weight expects {weight.shape[0]}",
    )
    _require(
        weight.shape[1] == bias.shape[0],
        f"conv1x1 bias size {bias.shape[0]} does not match weight output {weight.shape[1]}",
    )
    xd, wd = x.data, weight.data
    h, w, cin = xd.shape
    cout = wd.shape[1]

    def pullback(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, cin).T @ g.reshape(-1, cout)
        gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _record(xd @ wd + bias.data, (x, weight, bias), pullback)


# ---------------------------------------------------------------------------
# normalization and similarity


def normalize_tokens(x: Tensor, scale: float = 1.0) -> Tensor:
    """Scale each channel vector (last axis) to unit L2 norm times ``scale``.

    Used at the model entrance so attention scores reflect direction rather
    than raw magnitude.  Zero vectors map to zero.
    """
    xd = x.data
    n = np.linalg.norm(xd, axis=-1, keepdims=True)
    denom = n + _NORM_GUARD
    out = scale * xd / denom

    def pullback(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return (scale * (g / denom - xd * (dot / (np.maximum(n, _NORM_GUARD) * denom * denom))),)

    return _record(out, (x,), pullback)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    d = x.shape[-1]
    _require(
        gain.shape == (d,) and bias.shape == (d,),
        f"layer_norm parameters must have shape ({d},), got {gain.shape} and {bias.shape}",
    )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    gd = gain.data

    def pullback(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gd
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgain, dbias

    return _record(xhat * gd + bias.data, (x, gain, bias), pullback)


def _cosine_parts(a: Array, b: Array):
    s = float(a @ b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    denom = na * nb + COSINE_EPS
    return s, na, nb, denom


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Zero-versus-zero is defined as 0.  At a (near-)zero vector the similarity
    is not differentiable; the pullback returns zero gradients there.
    """
    _require(
        a.ndim == 1 and b.ndim == 1 and a.shape == b.shape and a.size >= 1,
        f"cosine needs two equal-length vectors, got {a.shape} and {b.shape}",
    )
    ad, bd = a.data, b.data
    s, na, nb, denom = _cosine_parts(ad, bd)
    c = min(1.0, max(-1.0, s / denom))
    degenerate = na < _NORM_GUARD or nb < _NORM_GUARD

    def pullback(g):
        if degenerate:
            z = np.zeros_like(ad)
            return z, z.copy()
        gv = float(g)
        ga = gv * (bd / denom - (s * nb / (na * denom * denom)) * ad)
        gb = gv * (ad / denom - (s * na / (nb * denom * denom)) * bd)
        return ga, gb

    return _record(np.asarray(c), (a, b), pullback)


def cosine_map(f: Tensor, v: Tensor) -> Tensor:
    """Per-pixel cosine similarity between feature vectors and one prototype."""
    _require(
        f.ndim == 3 and v.ndim == 1 and f.shape[2] == v.shape[0],
        f"cosine_map needs [h,w,d] features and [d] vector, got {f.shape} and {v.shape}",
    )
    fd, vd = f.data, v.data
    s = fd @ vd                                   # [h,w]
    nf = np.linalg.norm(fd, axis=2)               # [h,w]
    nv = float(np.linalg.norm(vd))
    denom = nf * nv + COSINE_EPS
    out = np.clip(s / denom, -1.0, 1.0)
    live = nf >= _NORM_GUARD

    def pullback(g):
        if nv < _NORM_GUARD:
            return np.zeros_like(fd), np.zeros_like(vd)
        gl = np.where(live, g, 0.0)
        coeff = gl / denom                        # [h,w]
        nf_safe = np.maximum(nf, _NORM_GUARD)
        gf = coeff[:, :, None] * vd - ((gl * s * nv) / (nf_safe * denom * denom))[:, :, None] * fd
        gf = np.where(live[:, :, None], gf, 0.0)
        gv = np.einsum("hw,hwd->d", coeff, fd) - (np.sum(gl * s * nf / (denom * denom)) / nv) * vd
        return gf, gv

    return _record(out, (f, v), pullback)


def masked_softmax_rows(scores: Tensor, additive_mask: Optional[Tensor] = None) -> Tensor:
    """Row-wise softmax after adding an optional {0, -inf} mask.

    Stabilized by max-subtraction.  A row whose mask is entirely -inf falls
    back to the unmasked softmax of its raw scores, keeping every output row
    stochastic.
    """
    _require(scores.ndim == 2, f"masked_softmax_rows needs a matrix, got shape {scores.shape}")
    sd = scores.data
    if additive_mask is not None:
        md = additive_mask.data
        _require(
            md.shape == sd.shape,
            f"mask shape {md.shape} does not match scores shape {sd.shape}",
        )
        ok = (md == 0.0) | np.isneginf(md)
        if not ok.all():
            raise InvalidValueError("additive mask entries must be 0 or -inf")
        fallback = np.isneginf(md).all(axis=1)
        total = sd + md
        if fallback.any():
            total = np.where(fallback[:, None], sd, total)
    else:
        total = sd

    shifted = total - total.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def pullback(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        gs = y * (g - dot)
        if additive_mask is None:
            return (gs,)
        return gs, None

    inputs = (scores,) if additive_mask is None else (scores, additive_mask)
    return _record(y, inputs, pullback)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function.

    Perturbs one coordinate at a time; the function is evaluated 2*size
    times.  NaN in the output signals a non-differentiable point to the
    caller rather than raising.
    """
    if eps <= 0:
        raise InvalidValueError(f"finite_diff_grad needs eps > 0, got {eps}")

    def evaluate(arr: Array) -> float:
        res = f(Tensor(arr))
        if isinstance(res, Tensor):
            return res.item()
        return float(res)

    flat = x.data.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += eps
        down = flat.copy()
        down[i] -= eps
        grad[i] = (evaluate(up.reshape(x.shape)) - evaluate(down.reshape(x.shape))) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max-norm relative difference used by all gradient checks."""
    ad = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if ad.shape != bd.shape:
        raise ShapeMismatchError(f"relative_error shapes differ: {ad.shape} vs {bd.shape}")
    num = float(np.max(np.abs(ad - bd))) if ad.size else 0.0
    den = max(float(np.max(np.abs(ad))) if ad.size else 0.0,
              float(np.max(np.abs(bd))) if bd.size else 0.0,
              floor)
    return num / den
