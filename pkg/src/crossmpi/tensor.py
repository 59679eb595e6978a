"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian closure on the
output tensor; ``backward`` replays the resulting graph once in reverse
topological order. Tensors from unrelated graphs share no mutable state, so
independent computations can run on separate threads.

Broadcasting is limited to leading singleton axes: shapes are aligned on the
right and a dimension may only differ where the smaller operand carries a
leading 1 (or is missing the axis entirely, as with a bias vector).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check encounters a non-finite function value."""


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    ``tracked`` marks gradient participation; ``grad`` is materialized by
    ``backward`` and always has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_vjp", "_op")

    def __init__(self, data, tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), tracked=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked}, op={self._op})"

    # operator sugar; constants are wrapped untracked
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, tracked=False)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.tracked for p in parents):
        out.tracked = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _check_broadcast(op: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Validate leading-singleton broadcast and return the result shape."""
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    out = []
    for a, b in zip(pa, pb):
        if a == b:
            out.append(a)
        elif a == 1 or b == 1:
            out.append(max(a, b))
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
    # singleton broadcast axes must form a leading prefix of each operand
    for padded, orig in ((pa, sa), (pb, sb)):
        seen_real = False
        for axis in range(n):
            if padded[axis] == out[axis] and out[axis] != 1:
                seen_real = True
            elif padded[axis] == 1 and out[axis] != 1 and seen_real:
                raise ShapeError(
                    f"{op}: broadcast of {sa} with {sb} uses a non-leading singleton axis"
                )
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.shape, b.shape)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a.shape, b.shape)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a.shape, b.shape)
    need_a, need_b = a.tracked, b.tracked
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if need_a else None,
            _unbroadcast(g * a.data, b.shape) if need_b else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    return _result("sqrt", root, (a,), lambda g: (g / (2.0 * root),))


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """Pointwise magnitude sqrt(re^2 + im^2) with zero subgradient at 0."""
    if re.shape != im.shape:
        raise ShapeError(f"complex_abs: incompatible shapes {re.shape} and {im.shape}")
    mag = np.hypot(re.data, im.data)
    safe = np.where(mag == 0.0, 1.0, mag)

    def vjp(g):
        return (g * re.data / safe, g * im.data / safe)

    return _result("complex_abs", mag, (re, im), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Differentiable clamp: pass-through subgradient strictly inside [lo, hi].

    Attack projections clip raw arrays outside the graph; this op exists for
    defenses and incidental plumbing.
    """
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _result("clamp", out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# matmul and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    else:
        raise ShapeError(f"matmul: expects 2D or batched 3D operands, got {a.shape} and {b.shape}")

    need_a, need_b = a.tracked, b.tracked

    def vjp(g):
        return (
            g @ np.swapaxes(b.data, -1, -2) if need_a else None,
            np.swapaxes(a.data, -1, -2) @ g if need_b else None,
        )

    return _result("matmul", a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b over the last axis of x (one tape record for speed)."""
    if (
        x.data.ndim < 2
        or w.data.ndim != 2
        or x.shape[-1] != w.shape[0]
        or b.shape != (w.shape[1],)
    ):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    need_x, need_w, need_b = x.tracked, w.tracked, b.tracked
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    out_shape = x.shape[:-1] + (w.shape[1],)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        return (
            (g2 @ w.data.T).reshape(x.shape) if need_x else None,
            x2.T @ g2 if need_w else None,
            g2.sum(axis=0) if need_b else None,
        )

    out = x2 @ w.data
    out += b.data
    return _result("linear", out.reshape(out_shape), (x, w, b), vjp)


def sum_all(a: Tensor) -> Tensor:
    return _result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _result("sum_axis", a.data.sum(axis=axis), (a,), vjp)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _result("mean_axis", a.data.mean(axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _result("concat", data, parts, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}] out of range for {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result("narrow", a.data[idx], (a,), vjp)


def split_heads(qkv: Tensor, part: int, d: int, nh: int) -> Tensor:
    """Slice q/k/v out of a fused (B, T, 3d) projection as (B*nh, T, d/nh)."""
    if qkv.data.ndim != 3 or qkv.shape[2] != 3 * d or d % nh:
        raise ShapeError(f"split_heads: bad input {qkv.shape} for d={d}, nh={nh}")
    b, t, _ = qkv.shape
    dh = d // nh
    piece = qkv.data[:, :, part * d : (part + 1) * d]
    out = np.ascontiguousarray(piece.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)).reshape(b * nh, t, dh)

    def vjp(g):
        full = np.zeros_like(qkv.data)
        full[:, :, part * d : (part + 1) * d] = (
            g.reshape(b, nh, t, dh).transpose(0, 2, 1, 3).reshape(b, t, d)
        )
        return (full,)

    return _result("split_heads", out, (qkv,), vjp)


def merge_heads(x: Tensor, nh: int) -> Tensor:
    """Inverse of split_heads: (B*nh, T, dh) -> (B, T, nh*dh)."""
    if x.data.ndim != 3 or x.shape[0] % nh:
        raise ShapeError(f"merge_heads: bad input {x.shape} for nh={nh}")
    bnh, t, dh = x.shape
    b = bnh // nh
    out = np.ascontiguousarray(x.data.reshape(b, nh, t, dh).transpose(0, 2, 1, 3)).reshape(b, t, nh * dh)

    def vjp(g):
        return (np.ascontiguousarray(g.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)).reshape(bnh, t, dh),)

    return _result("merge_heads", out, (x,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result("embedding", table.data[ids].copy(), (table,), vjp)


def gather_rows(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick a[i, ids[i]] for each row of a 2D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expects 2D input, got {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        da = np.zeros_like(a.data)
        da[rows, ids] = g
        return (da,)

    return _result("gather_rows", a.data[rows, ids].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(a: Tensor) -> Tensor:
    return _result("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


_GELU_SIG = 1.702


def gelu(a: Tensor) -> Tensor:
    """Sigmoid-form GELU x * sigma(1.702 x); smooth, so finite differences agree."""
    x = a.data
    s = np.multiply(x, -_GELU_SIG)
    np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)

    def vjp(g):
        d = 1.0 - s
        d *= _GELU_SIG * x
        d += 1.0
        d *= s
        d *= g
        return (d,)

    return _result("gelu", x * s, (a,), vjp)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-shift stabilization.

    ``mask`` is an optional constant additive bias (e.g. causal -1e9 wedge),
    folded in before normalization to save a tape node.
    """
    s = a.data + mask if mask is not None else a.data.copy()
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def vjp(g):
        t = g * s
        dot = t.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=t)
        t *= s
        return (t,)

    return _result("softmax", s, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", y, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xhat = a.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    need_x, need_g, need_b = a.tracked, gain.tracked, bias.tracked

    def vjp(g):
        gx = g * gain.data
        dx = None
        if need_x:
            dot = np.einsum("...i,...i->...", gx, xhat)[..., None] / d
            dx = gx
            dx -= gx.mean(axis=-1, keepdims=True)
            dx -= xhat * dot
            dx *= inv
        red = tuple(range(g.ndim - 1))
        return (
            dx,
            (g * xhat).sum(axis=red) if need_g else None,
            g.sum(axis=red) if need_b else None,
        )

    return _result("layer_norm", out, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# image primitives


def conv2d(a: Tensor, kernel: np.ndarray) -> Tensor:
    """Same-size 2D convolution of (H, W, C) with a small kernel, zero padding.

    The kernel is a constant (never differentiated); channels share it.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if a.data.ndim != 3:
        raise ShapeError(f"conv2d: expects (H, W, C) input, got {a.shape}")
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {k.shape}")

    def correlate(x, kern):
        h, w, _ = x.shape
        ph, pw = kern.shape[0] // 2, kern.shape[1] // 2
        padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
        out = np.zeros_like(x)
        for di in range(kern.shape[0]):
            for dj in range(kern.shape[1]):
                out += kern[di, dj] * padded[di : di + h, dj : dj + w]
        return out

    flipped = k[::-1, ::-1]
    return _result("conv2d", correlate(a.data, k), (a,), lambda g: (correlate(g, flipped),))


def grid_sample(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Bilinear sampling of an (H, W, C) image at constant real coordinates.

    Out-of-image reads are zero; the sampling grid itself is constant, so the
    operation is linear in the image and its gradient is the scatter adjoint.
    """
    if a.data.ndim != 3:
        raise ShapeError(f"grid_sample: expects (H, W, C) input, got {a.shape}")
    h, w, c = a.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise ShapeError(f"grid_sample: row grid {rows.shape} != col grid {cols.shape}")

    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    corners = []
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri = r0 + dr
        ci = c0 + dc
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        corners.append((np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1), wgt * valid))

    data = np.zeros(rows.shape + (c,), dtype=np.float64)
    for ri, ci, wgt in corners:
        data += a.data[ri, ci] * wgt[..., None]

    def vjp(g):
        da = np.zeros_like(a.data)
        for ri, ci, wgt in corners:
            np.add.at(da, (ri, ci), g * wgt[..., None])
        return (da,)

    return _result("grid_sample", data, (a,), vjp)


# ---------------------------------------------------------------------------
# 2D discrete Fourier transform


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft_axis0(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along axis 0 of a complex array."""
    n = a.shape[0]
    if n == 1:
        return a.copy()
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    out = a[rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape((n // size, size) + out.shape[1:])
        even = blocks[:, :half]
        odd = blocks[:, half:] * tw.reshape((1, half) + (1,) * (out.ndim - 1))
        out = np.concatenate([even + odd, even - odd], axis=1).reshape(out.shape)
        size *= 2
    return out


def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def _dft2_complex(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT of a complex (H, W) array."""
    h, w = x.shape
    if _is_pow2(h) and _is_pow2(w):
        y = _fft_axis0(x.astype(np.complex128))
        y = _fft_axis0(y.T).T
        return y
    return _dft_matrix(h) @ x.astype(np.complex128) @ _dft_matrix(w)


def dft2(a: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized forward 2D DFT of an (H, W) tensor -> (real, imag).

    The transform is linear; each output's gradient is the corresponding real
    or imaginary part of the forward transform applied to its cotangent
    (the conjugate-transposed DFT collapses to this for symmetric kernels).
    """
    if a.data.ndim != 2:
        raise ShapeError(f"dft2: expects (H, W) input, got {a.shape}")
    spec = _dft2_complex(a.data)

    def vjp_re(g):
        return (np.real(_dft2_complex(g)),)

    def vjp_im(g):
        return (np.imag(_dft2_complex(g)),)

    re = _result("dft2_re", np.ascontiguousarray(spec.real), (a,), vjp_re)
    im = _result("dft2_im", np.ascontiguousarray(spec.imag), (a,), vjp_im)
    return re, im


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every tracked leaf reached from root.

    Returns a map from leaf tensor to this call's gradient contribution;
    leaf ``grad`` attributes are incremented (training loops accumulate
    across a batch and zero them explicitly).
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.tracked:
        raise ValueError("backward: root does not participate in the gradient tape")

    order = _topo_order(root)
    cotangent: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = cotangent.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.tracked:
                leaves[node] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            if key in cotangent:
                cotangent[key] = cotangent[key] + pg
            else:
                cotangent[key] = pg
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float) -> float:
    """Max relative error between tape gradient and central finite differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    Non-finite function values are reported via GradCheckError.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(point.data, dtype=np.float64)

    p = Tensor(base.copy(), tracked=True)
    out = f(p)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradCheckError("grad_check: non-finite function value at the base point")
    analytic = backward(out).get(p)
    if analytic is None:
        analytic = np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise GradCheckError(f"grad_check: non-finite function value at coordinate {i}")
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
