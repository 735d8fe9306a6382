"""Small dense-tensor engine with hand-written reverse-mode gradients.

Every primitive records a closure that maps the output gradient to input
gradients. :func:`backward` walks the recorded graph in reverse topological
order. Arrays are plain numpy; the dtype of the inputs is preserved so the
same code runs in float64 for gradient checks and float32 for training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "RngStream",
    "ShapeError",
    "NonFiniteGradientError",
    "no_grad",
    "grad_enabled",
    "record",
    "backward",
    "conv2d",
    "elementwise",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "absolute",
    "square",
    "clamp01_violation",
    "reshape",
    "concat",
    "channel_slice",
    "take_mask",
    "sum_all",
    "mean",
    "bce_with_logits",
    "moment_penalty",
    "adam_step",
    "Adam",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf when an optimizer step was requested."""


_GRAD_ENABLED = True
# when a list, piecewise-linear primitives append their branch pattern (see finite_difference_check)
_BRANCH_LOG: list | None = None


def _log_branch(*masks: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(b"".join(np.packbits(m).tobytes() for m in masks))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __float__ = item

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar, all routed through recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable tensor carrying its gradient and Adam moment state."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Nothing is recorded when gradients are disabled or no parent needs one.
    """
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate ``grad`` (default: ones) from ``output`` to every leaf.

    Leaf gradients accumulate into ``.grad``; intermediate gradients are
    transient.
    """
    if output._backward is None:
        raise RuntimeError(
            "backward() called on a tensor without a recorded forward pass"
        )
    if grad is None:
        grad = np.ones_like(output.data)
    grad = np.asarray(grad, dtype=output.dtype)
    if grad.shape != output.shape:
        raise ShapeError(f"output gradient shape {grad.shape} != {output.shape}")

    pending: dict[int, np.ndarray] = {id(output): grad}
    for node in reversed(_topo_order(output)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv2d_backward(x, kernel, cols, grad_out):
    """Gradients of a 3x3 zero-padded convolution; ``cols`` is None on 1x1 input."""
    n, c, h, w = x.shape
    c_out = kernel.shape[0]
    if cols is None:
        g = grad_out[:, :, 0, 0]
        center = kernel[:, :, 1, 1]
        d_kernel = np.zeros_like(kernel)
        d_kernel[:, :, 1, 1] = g.T @ x[:, :, 0, 0]
        d_x = (g @ center)[:, :, None, None]
        return d_x, d_kernel, g.sum(axis=0)
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
    d_kernel = (g.T @ cols).reshape(kernel.shape)
    d_bias = g.sum(axis=0)
    d_cols = (g @ kernel.reshape(c_out, c * 9)).reshape(n, h, w, c, 3, 3)
    d_xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            d_xp[:, :, dy : dy + h, dx : dx + w] += d_cols[..., dy, dx].transpose(0, 3, 1, 2)
    return d_xp[:, :, 1:-1, 1:-1], d_kernel, d_bias


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 convolution with zero padding 1, stride 1.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, 3, 3]``; ``bias`` is ``[C_out]``.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [C_out,C_in,3,3], got {kernel.shape}")
    n, c, h, w = xd.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ShapeError(f"conv2d kernel expects {kernel.shape[1]} input channels, input has {c}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be [{c_out}], got {bias.shape}")
    if h < 1 or w < 1:
        raise ShapeError("conv2d needs non-empty spatial extent")
    kd = kernel.data

    if h == 1 and w == 1:
        # only the centre tap sees non-padding input
        cols = None
        out = (xd[:, :, 0, 0] @ kd[:, :, 1, 1].T + bias.data)[:, :, None, None]
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _im2col(xp, h, w)
        out = cols @ kd.reshape(c_out, c * 9).T + bias.data
        out = out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def _bw(g):
        g4 = g[None] if unbatched else g
        d_x, d_k, d_b = _conv2d_backward(xd, kd, cols, g4)
        return (d_x[0] if unbatched else d_x), d_k, d_b

    return record(out[0] if unbatched else out, (x, kernel, bias), _bw, "conv2d")


# --------------------------------------------------------------------------
# pointwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ {a.shape} vs {b.shape}")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at 0
    _log_branch(mask)
    return record(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.dtype.type(factor)
    return record(x.data * f, (x,), lambda g: (g * f,), "scale")


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    _log_branch(sign > 0, sign < 0)
    return record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return record(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def clamp01_violation(x) -> Tensor:
    """Distance of each cell from the interval [0, 1]."""
    x = _as_tensor(x)
    xd = x.data
    hi = xd > 1
    lo = xd < 0
    _log_branch(hi, lo)
    out = np.where(hi, xd - 1, 0) + np.where(lo, -xd, 0)
    slope = hi.astype(xd.dtype) - lo.astype(xd.dtype)
    return record(out.astype(xd.dtype), (x,), lambda g: (g * slope,), "clamp01_violation")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "scale": scale,
    "abs": absolute,
    "clamp01_violation": clamp01_violation,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch a pointwise primitive by name (``scale`` takes a tensor and a scalar)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# structural


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([p.data for p in parts], axis=axis), parts, _bw, "concat")


def channel_slice(x, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice along ``axis`` (the channel axis of a batched tensor by default)."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src_shape, dtype = x.shape, x.dtype

    def _bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record(np.ascontiguousarray(x.data[index]), (x,), _bw, "slice")


def take_mask(x, mask: np.ndarray) -> Tensor:
    """Select the cells where ``mask`` is true over the trailing axes.

    ``x`` has shape ``[..., *mask.shape]``; the result is ``[..., mask.sum()]``.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    lead = x.ndim - mask.ndim
    if x.shape[lead:] != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor tail {x.shape[lead:]}")
    src_shape, dtype = x.shape, x.dtype

    def _bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[(Ellipsis, mask)] = g
        return (full,)

    return record(x.data[(Ellipsis, mask)], (x,), _bw, "take_mask")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return record(
        np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum"
    )


def mean(x, axis: int | tuple[int, ...] | None = None) -> Tensor:
    """Mean over ``axis`` (all axes when None)."""
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    axes = tuple(range(x.ndim)) if axis is None else np.atleast_1d(axis)
    axes = tuple(int(a) % x.ndim for a in axes) if x.ndim else ()
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes), dtype=dtype)

    def _bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, shape).astype(dtype),)

    return record(out, (x,), _bw, "mean")


# --------------------------------------------------------------------------
# fused loss primitives


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))


def bce_with_logits(logits, target: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Per-cell weighted binary cross-entropy of ``sigmoid(logits)`` against soft targets.

    loss = -(pos_weight * t * log(s) + (1 - t) * log(1 - s)), computed in
    softplus form so saturated logits stay finite.
    """
    logits = _as_tensor(logits)
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    w = logits.dtype.type(pos_weight)
    out = w * t * _softplus(-z) + (1 - t) * _softplus(z)
    s = _sigmoid(z)

    def _bw(g):
        return (g * (w * t * (s - 1) + (1 - t) * s),)

    return record(out, (logits,), _bw, "bce_with_logits")


def moment_penalty(z) -> Tensor:
    """Row-wise ``mean(z)**2 + (std(z) - 1)**2`` for ``z`` of shape ``[N, d]``.

    Population standard deviation; the std gradient is taken as 0 at std == 0.
    """
    z = _as_tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"moment_penalty expects [N, d], got {z.shape}")
    zd = z.data
    d = zd.shape[1]
    m = zd.mean(axis=1, keepdims=True)
    centred = zd - m
    s = np.sqrt((centred * centred).mean(axis=1, keepdims=True))
    out = (m * m + (s - 1) ** 2)[:, 0]
    safe = np.where(s > 0, s, 1)
    ds = np.where(s > 0, centred / (d * safe), 0)

    def _bw(g):
        g = g[:, None]
        return (g * (2 * m / d + 2 * (s - 1) * ds),)

    return record(out, (z,), _bw, "moment_penalty")


# --------------------------------------------------------------------------
# optimizer


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place, then zero the gradients.

    All gradients are validated before any parameter is touched.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"parameter #{i} {p.shape} has a non-finite gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * (g * g)
        m_hat = p.m / (1 - beta1**p.step)
        v_hat = p.v / (1 - beta2**p.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        p.zero_grad()


@dataclass
class Adam:
    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# --------------------------------------------------------------------------
# randomness


def _derive_seed(seed: int, keys: Sequence[int]) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *[int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class RngStream:
    """Counter-based random stream.

    Draw call number ``counter`` uses a Philox generator keyed by
    ``(seed, counter)``, so ``(seed, counter)`` fully determines every draw
    independent of platform and of what other streams did.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.counter], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._generator().standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, shape=None) -> np.ndarray | float:
        return self._generator().random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def generator(self) -> np.random.Generator:
        """A numpy Generator for a burst of draws; consumes one counter step."""
        return self._generator()

    def substream(self, *keys: int) -> "RngStream":
        """Independent child stream identified by integer ``keys``."""
        return RngStream(_derive_seed(self.seed, keys))


# --------------------------------------------------------------------------
# finite differences


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(scale, floor)``; ``scale`` defaults to ``max(|a|, |n|)`` per element."""
    if scale is None:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    else:
        denom = max(scale, floor)
    return np.abs(analytic - numeric) / denom


def _evaluate_logged(fn: Callable[[], Tensor]) -> tuple[float, list]:
    global _BRANCH_LOG
    prev, _BRANCH_LOG = _BRANCH_LOG, []
    try:
        value = float(fn().data)
        return value, _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


def central_difference(fn: Callable[[], Tensor], array: np.ndarray, idx: int, step: float, min_step: float = 1e-7) -> float:
    """Central difference of ``fn`` in coordinate ``idx`` of ``array``.

    If relu/abs/clamp take different branches at ``+step`` and ``-step`` the
    interval straddles a kink; the step is divided by 10 until both sides
    agree (or ``min_step`` is reached).
    """
    flat = array.reshape(-1) if array.flags.c_contiguous else None
    if flat is None:
        raise ValueError("finite differences need a C-contiguous array")
    orig = flat[idx]
    h = step
    try:
        while True:
            flat[idx] = orig + h
            up, up_branches = _evaluate_logged(fn)
            flat[idx] = orig - h
            down, down_branches = _evaluate_logged(fn)
            if up_branches == down_branches or h / 10 < min_step:
                return (up - down) / (2 * h)
            h /= 10
    finally:
        flat[idx] = orig


def finite_difference_check(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` rebuilds a scalar loss from the current values of ``wrt``. When
    ``max_coords`` is given, that many coordinates per tensor are sampled.
    The error of each coordinate is ``|a - n|`` over the largest gradient
    magnitude of that tensor (floored at 1e-8).
    """
    for t in wrt:
        t.zero_grad() if isinstance(t, Parameter) else setattr(t, "grad", None)
    loss = fn()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        size = t.data.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        with no_grad():
            numeric = np.array([central_difference(fn, t.data, int(i), step) for i in coords])
        picked = analytic.reshape(-1)[coords]
        err = relative_error(picked, numeric, scale=max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
