"""Minimal reverse-mode autodiff over dense numpy tensors.

Every differentiable operation the codec needs is a module-level function
that takes and returns :class:`Tensor`.  When a :class:`Tape` is active,
applications are recorded as a Wengert list; ``backward`` replays it in
reverse exactly once per entry.  Tensors created outside a tape (or under
``no_grad``) are plain values and never accumulate gradient.

All data is float64.  Image-like tensors use (N, C, H, W) order.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError", "GraphError", "Tensor", "Tape", "no_grad", "recording",
    "tensor", "parameter", "backward", "grad_check",
    "add", "sub", "mul", "div", "scalar_mul", "matmul",
    "conv2d", "conv_transpose2d", "concat", "channel_slice",
    "leaky_relu", "sigmoid", "exp", "log", "square", "absolute",
    "smooth_l1", "powf", "clamp_min", "summation", "mean",
    "reshape", "transpose", "layer_norm", "softmax",
    "uniform_noise", "round_half_away", "l2_norm",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy the primitive's shape rule."""


class GraphError(RuntimeError):
    """Illegal use of the tape (backward without recording, round under grad, ...)."""


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None
_GRAD_SUSPENDED = 0


class Tape:
    """Ordered record of primitive applications for one training context.

    Entries are appended in execution order, so inputs always precede the
    entry that consumes them; ``backward`` walks the list once in reverse.
    """

    def __init__(self):
        self._entries = []  # (output, inputs tuple, backward fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GraphError("a tape is already active; one tape per training context")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: "Tensor"):
        """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

        ``loss`` must be a scalar recorded on this tape.  Repeated calls
        accumulate into existing ``grad`` buffers.
        """
        if loss._tape is not self:
            raise GraphError("loss was not recorded on this tape (inference mode?)")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._entries:
            raise GraphError("tape is empty")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if inp._tape is self:  # intermediate: route to its producer
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                else:  # leaf parameter/input
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g


class no_grad:
    """Context manager suspending tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_SUSPENDED
        _GRAD_SUSPENDED += 1
        return self

    def __exit__(self, *exc):
        global _GRAD_SUSPENDED
        _GRAD_SUSPENDED -= 1
        return False


def _recording() -> bool:
    return _ACTIVE_TAPE is not None and _GRAD_SUSPENDED == 0


def recording() -> bool:
    """True while a tape is active and not suspended by no_grad."""
    return _recording()


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------

class Tensor:
    """Dense float64 array with optional gradient-tape participation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None  # set when produced by a recorded op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value copy with no tape attachment; safe to share."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss (see ``Tape.backward``)."""
    if loss._tape is None:
        raise GraphError("loss has no tape; was it computed under no_grad?")
    loss._tape.backward(loss)


def _apply(out_data, inputs, backward_fn) -> Tensor:
    """Wrap a primitive result, recording it when a tape is live."""
    out = Tensor(out_data)
    if _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE._record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting; gradients are unbroadcast)
# --------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _apply(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _apply(a.data / b.data, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply(a.data * c, (a,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# Matrix multiply (2-D, or batched 3-D with an optional unbatched operand)
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise ShapeError(f"matmul supports 2-D/3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if a.data.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.data.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _apply(np.matmul(a.data, b.data), (a, b), bwd)


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (N, C, kh, kw, oh, ow) patches from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _col2im(cols: np.ndarray, xp_shape, stride: int):
    """Adjoint of ``_im2col``: scatter-add patches back into a padded buffer."""
    kh, kw, oh, ow = cols.shape[2:]
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    oh, ow = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(wd, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    y = np.einsum("ncijhw,ocij->nohw", cols, w.data, optimize=True)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")
        y += b.data[None, :, None, None]

    def bwd(g):
        gw = np.einsum("nohw,ncijhw->ocij", g, cols, optimize=True)
        gcols = np.einsum("nohw,ocij->ncijhw", g, w.data, optimize=True)
        gxp = _col2im(gcols, xp.shape, stride)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _apply(y, inputs, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, NCHW input, (C_in, C_out, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {ci}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError("conv_transpose2d requires 0 <= output_padding < stride")
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d output would be empty for input {x.shape}")
    # Row/col extent of the scatter buffer: the full stride-upsampled support,
    # grown so the output crop window [padding, padding+oh) stays in bounds.
    full_h = max((h - 1) * stride + kh, padding + oh)
    full_w = max((wd - 1) * stride + kw, padding + ow)
    tmp = np.zeros((n, o, full_h, full_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            tmp[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += \
                np.einsum("nchw,co->nohw", x.data, w.data[:, :, i, j], optimize=True)
    y = tmp[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv_transpose2d bias must have shape ({o},), got {b.shape}")
        y = y + b.data[None, :, None, None]

    def bwd(g):
        gfull = np.zeros((n, o, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = gfull[:, :, i:i + stride * h:stride, j:j + stride * wd:stride]
                gx += np.einsum("nohw,co->nchw", patch, w.data[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("nchw,nohw->co", x.data, patch, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _apply(y, inputs, bwd)


# --------------------------------------------------------------------------
# Shape ops
# --------------------------------------------------------------------------

def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop) of an NC... tensor."""
    if x.data.ndim < 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"channel_slice [{start}:{stop}] invalid for shape {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _apply(x.data[:, start:stop].copy(), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    return _apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {x.shape}")
    inv = np.argsort(axes)
    return _apply(np.transpose(x.data, axes), (x,),
                  lambda g: (np.transpose(g, inv),))


# --------------------------------------------------------------------------
# Pointwise nonlinearities
# --------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data >= 0
    return _apply(np.where(mask, x.data, slope * x.data), (x,),
                  lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    # Numerically stable in both tails.
    s = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return _apply(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _apply(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return _apply(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _apply(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x: Tensor) -> Tensor:
    return _apply(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber at unit transition: 0.5*x^2 for |x|<1, |x|-0.5 otherwise."""
    a = np.abs(x.data)
    inner = a < 1.0
    y = np.where(inner, 0.5 * x.data * x.data, a - 0.5)
    return _apply(y, (x,),
                  lambda g: (g * np.where(inner, x.data, np.sign(x.data)),))


def powf(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for strictly positive x."""
    p = float(p)
    if np.any(x.data <= 0):
        raise ValueError("powf requires strictly positive base")
    y = x.data ** p
    return _apply(y, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    floor = float(floor)
    mask = x.data > floor
    return _apply(np.maximum(x.data, floor), (x,),
                  lambda g: (np.where(mask, g, 0.0),))


# --------------------------------------------------------------------------
# Reductions and normalizations
# --------------------------------------------------------------------------

def summation(x: Tensor) -> Tensor:
    return _apply(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _apply(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements (scalar output)."""
    nrm = float(np.sqrt((x.data * x.data).sum()))

    def bwd(g):
        if nrm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / nrm,)

    return _apply(np.asarray(nrm), (x,), bwd)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis (axis 1) per remaining position.

    Affine gain/bias, when wanted, are applied by the caller with
    broadcast ``mul``/``add``; a constant channel vector maps to zeros.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"layer_norm needs a channel axis, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _apply(xhat, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _apply(s, (x,), bwd)


# --------------------------------------------------------------------------
# Quantization-related primitives
# --------------------------------------------------------------------------

def uniform_noise(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Additive U(-0.5, 0.5) noise; identity gradient (pass-through of x).

    Draws consume ``rng`` in C order of the elements, so a fixed seed gives
    a reproducible perturbation.  The output stays strictly within 0.5 of
    the input.
    """
    u = rng.uniform(-0.5, 0.5, size=x.shape)
    u[u == -0.5] = 0.0  # uniform() includes its low endpoint
    return _apply(x.data + u, (x,), lambda g: (g,))


def round_half_away(x: Tensor) -> Tensor:
    """Round to nearest integer, ties away from zero.  Eval-only.

    Rejected under an active tape when the input is gradient-tracked:
    quantization is never differentiated through; training relaxes it
    with uniform noise instead.
    """
    if _recording() and x.requires_grad:
        raise GraphError("round is not differentiable; use uniform_noise in training")
    return Tensor(np.copysign(np.floor(np.abs(x.data) + 0.5), x.data))


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------

def grad_check(f, inputs, h: float = 1e-5, max_entries: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` builds a scalar loss from ``inputs`` (a list of Tensors) and must
    be deterministic.  Error per entry is |analytic - numeric| / max(1, |numeric|).
    ``max_entries`` caps the number of probed entries per input (chosen by a
    seeded subsample) to keep large parameter tensors affordable.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # reshape(-1) below must be a view
        t.requires_grad = True
        t.grad = None
    tape = Tape()
    with tape:
        loss = f(*inputs)
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    sampler = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(sampler.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                hi = float(f(*inputs).data)
            flat[i] = orig - h
            with no_grad():
                lo = float(f(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            if not math.isfinite(numeric):
                raise ValueError(f"non-finite numeric gradient at entry {i}")
            err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
