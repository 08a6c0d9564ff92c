"""Small dense-tensor engine with tape-based reverse-mode gradients.

Everything is float64 and numpy backed.  Operations record onto the active
:class:`Tape` only when one of their inputs is a :class:`Param` or a tensor
that was itself produced on the tape, so inference runs with no tape at all.

Image tensors are ``(C, H, W)``; convolutions also accept a leading batch
axis ``(N, C, H, W)`` and return the same rank they were given.
"""
from __future__ import annotations

import math
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"GLT1"


class ShapeError(ValueError):
    pass


class GradientError(ArithmeticError):
    """Non-finite values met while computing or checking gradients."""


class Tensor:
    """Immutable float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Param:
    """Trainable value plus accumulated gradient of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str = ""):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = np.zeros(self.value.shape)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.value.shape)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; :meth:`backward` accumulates into ``Param.grad``
    and then clears the record.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def needs(self, inputs) -> bool:
        return any(isinstance(t, Param) or id(t) in self._tracked for t in inputs)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.entries.append((out, inputs, vjp))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise GradientError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for out, inputs, vjp in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                if isinstance(inp, Param):
                    inp.grad = inp.grad + gi
                elif id(inp) in self._tracked:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
        self.clear()

    def clear(self) -> None:
        self.entries.clear()
        self._tracked.clear()


def _val(t) -> np.ndarray:
    if isinstance(t, Param):
        return t.value.data
    if isinstance(t, Tensor):
        return t.data
    raise TypeError(f"expected Tensor or Param, got {type(t).__name__}")


def _emit(out: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and tape.needs(inputs):
        tape.record(result, inputs, vjp)
    return result


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (raw numpy, 4-D)
# ---------------------------------------------------------------------------

def _as4d(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _windows(x4: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x4
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_raw(x4, k, stride, pad):
    win = _windows(x4, k.shape[2], k.shape[3], stride, pad)
    return np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_adjoint_raw(y4, k, stride, pad, out_hw):
    """Adjoint of :func:`_conv_raw` with respect to its input."""
    n, _, ho, wo = y4.shape
    _, c, kh, kw = k.shape
    h, w = out_hw
    cols = np.tensordot(y4, k, axes=([1], [0]))  # n, ho, wo, c, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # n, c, kh, kw, ho, wo
    hp = max((ho - 1) * stride + kh, h + 2 * pad)
    wp = max((wo - 1) * stride + kw, w + 2 * pad)
    xp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def _conv_kernel_grad(x4, g4, kh, kw, stride, pad):
    win = _windows(x4, kh, kw, stride, pad)
    return np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride + k - 2 * padding + output_padding


def _check_conv_args(x4, k, stride, padding, op, channel_axis):
    if k.ndim != 4:
        raise ShapeError(f"{op}: kernel must be 4-D, got shape {k.shape}")
    if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
        raise ShapeError(f"{op}: kernel spatial size must be odd, got {k.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{op}: need stride >= 1 and padding >= 0")
    if x4.shape[1] != k.shape[channel_axis]:
        raise ShapeError(f"{op}: input shape {x4.shape[1:]} does not match kernel shape {k.shape}")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel[C_out, C_in, kH, kW]``."""
    xv, squeeze = _as4d(_val(x), "conv2d")
    k = _val(kernel)
    _check_conv_args(xv, k, stride, padding, "conv2d", 1)
    h, w = xv.shape[2:]
    if conv_output_size(h, k.shape[2], stride, padding) < 1 or conv_output_size(w, k.shape[3], stride, padding) < 1:
        raise ShapeError(f"conv2d: input shape {xv.shape[1:]} too small for kernel shape {k.shape}")
    out = _conv_raw(xv, k, stride, padding)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = _conv_adjoint_raw(g4, k, stride, padding, (h, w))
        gk = _conv_kernel_grad(xv, g4, k.shape[2], k.shape[3], stride, padding)
        return (gx[0] if squeeze else gx), gk

    return _emit(out[0] if squeeze else out, (x, kernel), vjp)


def conv2d_transpose(x, kernel, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``kernel`` has the same layout as the forward convolution it undoes, so it
    maps ``kernel.shape[0]`` channels to ``kernel.shape[1]`` channels.
    """
    xv, squeeze = _as4d(_val(x), "conv2d_transpose")
    k = _val(kernel)
    _check_conv_args(xv, k, stride, padding, "conv2d_transpose", 0)
    if not 0 <= output_padding < stride:
        raise ShapeError("conv2d_transpose: output_padding must be smaller than stride")
    h = conv_transpose_output_size(xv.shape[2], k.shape[2], stride, padding, output_padding)
    w = conv_transpose_output_size(xv.shape[3], k.shape[3], stride, padding, output_padding)
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d_transpose: input shape {xv.shape[1:]} too small for kernel shape {k.shape}")
    out = _conv_adjoint_raw(xv, k, stride, padding, (h, w))

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = _conv_raw(g4, k, stride, padding)
        gk = _conv_kernel_grad(g4, xv, k.shape[2], k.shape[3], stride, padding)
        return (gx[0] if squeeze else gx), gk

    return _emit(out[0] if squeeze else out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add_bias(x, bias) -> Tensor:
    """Add a per-channel bias to a (C,H,W) / (N,C,H,W) map or a (..., F) vector."""
    xv, b = _val(x), _val(bias)
    if b.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-D, got {b.shape}")
    if xv.ndim in (3, 4):
        axis = xv.ndim - 3
        if xv.shape[axis] != b.shape[0]:
            raise ShapeError(f"add_bias: {xv.shape} vs bias {b.shape}")
        out = xv + b.reshape(-1, 1, 1)
        red = tuple(i for i in range(xv.ndim) if i != axis)
    else:
        if xv.shape[-1] != b.shape[0]:
            raise ShapeError(f"add_bias: {xv.shape} vs bias {b.shape}")
        out = xv + b
        red = tuple(range(xv.ndim - 1))
    return _emit(out, (x, bias), lambda g: (g, g.sum(axis=red)))


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "add")
    return _emit(av + bv, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "sub")
    return _emit(av - bv, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_same(av, bv, "mul")
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, factor: float) -> Tensor:
    return _emit(_val(a) * factor, (a,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    xv = _val(x)
    mask = xv > 0
    return _emit(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    xv = _val(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    out = np.tanh(_val(x))
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def total(x) -> Tensor:
    xv = _val(x)
    return _emit(np.array(xv.sum()), (x,), lambda g: (np.full(xv.shape, float(g)),))


def mean(x) -> Tensor:
    xv = _val(x)
    n = xv.size
    return _emit(np.array(xv.mean()), (x,), lambda g: (np.full(xv.shape, float(g) / n),))


def mse_loss(pred, target) -> Tensor:
    """Mean of squared residuals."""
    p, t = _val(pred), _val(target)
    _check_same(p, t, "mse_loss")
    r = p - t
    n = r.size
    return _emit(np.array((r * r).mean()), (pred, target), lambda g: (2 * float(g) * r / n, -2 * float(g) * r / n))


def masked_mse(pred, target, mask: np.ndarray) -> Tensor:
    """Squared error averaged over the pixels where ``mask`` is set.

    ``target`` and ``mask`` are constants.  An empty mask contributes zero.
    """
    p, t = _val(pred), np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    m = np.asarray(mask, dtype=float)
    _check_same(p, t, "masked_mse")
    _check_same(p, m, "masked_mse")
    denom = max(float(m.sum()), 1.0)
    r = (p - t) * m
    return _emit(np.array((r * r).sum() / denom), (pred,), lambda g: (2 * float(g) * r / denom,))


def global_avg_pool(x) -> Tensor:
    """Average each channel plane: (C,H,W) -> (C,), (N,C,H,W) -> (N,C)."""
    xv = _val(x)
    if xv.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected 3-D or 4-D input, got {xv.shape}")
    hw = xv.shape[-1] * xv.shape[-2]
    out = xv.mean(axis=(-2, -1))
    return _emit(out, (x,), lambda g: (np.broadcast_to(g[..., None, None] / hw, xv.shape).copy(),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (D,) or (N, D) and weight (F, D)."""
    xv, w = _val(x), _val(weight)
    if w.ndim != 2 or xv.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} does not match weight {w.shape}")
    out = xv @ w.T
    if bias is not None:
        out = out + _val(bias)

    def vjp(g):
        gx = g @ w
        gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, vjp)


def take(x, index) -> Tensor:
    """Basic-index slice of ``x`` (gradient scatters back)."""
    xv = _val(x)
    out = xv[index]

    def vjp(g):
        gx = np.zeros(xv.shape)
        gx[index] = g
        return (gx,)

    return _emit(out, (x,), vjp)


def stack_sum(terms: Sequence) -> Tensor:
    result = terms[0]
    for t in terms[1:]:
        result = add(result, t)
    return result


# ---------------------------------------------------------------------------
# optimisation and verification
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Param], lr: float) -> None:
    """``value <- value - lr * grad``, then zero the gradients."""
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p in params:
        if lr:
            p.value = Tensor(p.value.data - lr * p.grad)
        p.zero_grad()


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Param],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` must rebuild its scalar output from the current parameter values on
    every call.  With ``max_coords`` set, that many coordinates per parameter
    are sampled (seeded) instead of checking all of them.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        base = p.value
        flat = base.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        try:
            for i in idx:
                values = []
                for sign in (1.0, -1.0):
                    trial = flat.copy()
                    trial[i] += sign * epsilon
                    p.value = Tensor(trial.reshape(base.shape))
                    v = f().item()
                    if not math.isfinite(v):
                        raise GradientError(f"f is not finite at {p.name}[{i}]")
                    values.append(v)
                numeric = (values[0] - values[1]) / (2 * epsilon)
                err = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        finally:
            p.value = base
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor | Param]) -> None:
    """Write ``GLT1`` + per param: u32 name length, name, u32 rank, u32 dims, f64 values (all little-endian)."""
    chunks = [CHECKPOINT_MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, (Tensor, Param)) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4
    out: dict[str, np.ndarray] = {}

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take_bytes(4))
        name = take_bytes(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take_bytes(4))
        dims = struct.unpack(f"<{rank}I", take_bytes(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take_bytes(8 * count), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(dims)
    return out
