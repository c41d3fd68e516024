"""Dense float tensors with a taped reverse-mode autodiff engine.

Implements exactly the operation set the denoising networks need:
2-d cross-correlation, batch normalization, pointwise activations,
concatenation, and scalar reductions. Operations record onto the
innermost active :class:`GraphTape`; a tape is rebuilt for every
training step (define-by-run) and cleared afterwards to release the
intermediate activations.

Storage is 32-bit by default; :func:`set_default_dtype` switches the
whole engine to 64-bit for high-precision verification runs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an operation are inconsistent."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or encountered."""


_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


def default_dtype():
    """Dtype newly created tensors are cast to."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used by the 64-bit verification mode)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """N-dimensional array of reals with optional gradient tracking.

    ``data`` is a row-major numpy array. ``grad`` stays ``None`` until a
    backward pass deposits into it; tensors with ``requires_grad=False``
    never receive a gradient array.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut off from any recorded graph."""
        return Tensor(self.data)

    def clear_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar over the module-level ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


class _Node:
    __slots__ = ("output", "inputs", "needs", "backward_fn", "tape")

    def __init__(self, output, inputs, needs, backward_fn, tape):
        self.output = output
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn
        self.tape = tape


_TAPE_STACK: list["GraphTape"] = []
_GRAD_ENABLED = True


class GraphTape:
    """Ordered record of operations; execution order is topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GraphTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop all nodes, releasing intermediate values they keep alive."""
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Run forwards without recording (diagnostics, inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Treat ``params`` as constants inside the block.

    Gradient bookkeeping snapshots requires_grad at record time, so ops
    recorded here will never deposit gradients into the frozen tensors,
    even after the flag is restored.
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None or not _GRAD_ENABLED:
        return out
    needs = tuple(t.requires_grad for t in inputs)
    if not any(needs):
        return out
    out.requires_grad = True
    node = _Node(out, tuple(inputs), needs, backward_fn, tape)
    out._node = node
    tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ancestor with requires_grad.

    Repeated calls without clearing grads keep accumulating.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() expects a single-element tensor")
    node = loss._node
    if node is None:
        raise ContractError("backward() target was not recorded on an active tape")
    tape = node.tape

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    owned: set[int] = set()

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        cur = grads.get(key)
        if cur is None:
            grads[key] = g
        elif key in owned:
            cur += g
        else:
            grads[key] = cur + g
            owned.add(key)
        leaves[key] = t

    for node in reversed(tape.nodes):
        key = id(node.output)
        g = grads.pop(key, None)
        if g is None:
            continue
        owned.discard(key)
        leaves.pop(key, None)
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        in_grads = node.backward_fn(g)
        for t, need, gi in zip(node.inputs, node.needs, in_grads):
            if need and gi is not None:
                accumulate(t, gi)

    for key, g in grads.items():
        t = leaves[key]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Elementwise operations and reductions
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + x.data.dtype.type(c))
    return _record(out, (x,), lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    cc = x.data.dtype.type(c)
    out = Tensor(x.data * cc)
    return _record(out, (x,), lambda g: (g * cc,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(xd * xd)
    return _record(out, (x,), lambda g: (g * (2.0 * xd),))


def abs_val(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.abs(xd))
    # sign(0) == 0: subgradient at the kink is defined as 0
    return _record(out, (x,), lambda g: (g * np.sign(xd),))


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ContractError("mean_all of an empty tensor")
    xd = x.data
    out = Tensor(np.asarray(xd.mean(), dtype=xd.dtype))
    n = xd.size

    def bw(g):
        return (np.broadcast_to(g / n, xd.shape).astype(g.dtype, copy=True),)

    return _record(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.maximum(xd, 0))
    mask = xd > 0

    def bw(g):
        return (np.where(mask, g, 0),)

    return _record(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    s = xd.dtype.type(slope)
    out = Tensor(np.where(xd > 0, xd, xd * s))
    mask = xd > 0

    def bw(g):
        return (np.where(mask, g, g * s),)

    return _record(out, (x,), bw)


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)); used only by the original-GAN loss variant."""
    xd = x.data
    out = Tensor(np.where(xd > 0, -np.log1p(np.exp(-xd)), xd - np.log1p(np.exp(xd))))
    sig_neg = 1.0 / (1.0 + np.exp(np.clip(xd, -60, 60)))  # sigmoid(-x)

    def bw(g):
        return (g * sig_neg,)

    return _record(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty tensor list")
    first = tensors[0].data.shape
    ndim = len(first)
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != ndim or any(s[i] != first[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat: shape {s} incompatible with {first} off axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bw(g):
        parts = []
        for i in range(len(extents)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(parts)

    return _record(out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent of a strided cross-correlation."""
    if extent + 2 * padding < kernel:
        raise DimensionError(
            f"conv: extent {extent} with padding {padding} is smaller than kernel {kernel}"
        )
    return (extent + 2 * padding - kernel) // stride + 1


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _window_cols(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """im2col: (N,C,H,W) -> (N*Ho*Wo, C*kh*kw) for stride-subsampled windows."""
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    n, c, ho, wo = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n = x.shape[0]
    cout = w.shape[0]
    xp = _pad_hw(x, padding, padding)
    cols, ho, wo = _window_cols(xp, w.shape[2], w.shape[3], stride)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _corr2d_weight_grad(x, g, kh, kw, stride, padding):
    n, cout = g.shape[0], g.shape[1]
    xp = _pad_hw(x, padding, padding)
    cols, ho, wo = _window_cols(xp, kh, kw, stride)
    gmat = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
    return (gmat @ cols).reshape(cout, x.shape[1], kh, kw)


def _corr2d_input_grad(g, w, stride, padding, h, w_in):
    """Gradient w.r.t. the convolution input: full correlation with the rotated kernel
    on the stride-dilated output gradient, then crop back to the unpadded extent."""
    n, cout, ho, wo = g.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    if stride > 1:
        gd = np.zeros((n, cout, hd, wd), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gfull = _pad_hw(gd, kh - 1, kw - 1)
    cols, hf, wf = _window_cols(gfull, kh, kw, 1)
    wrot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
    gx = (cols @ wrot.T).reshape(n, hf, wf, cin).transpose(0, 3, 1, 2)
    # rows/cols past the last visited window get zero gradient
    hp, wp = h + 2 * padding, w_in + 2 * padding
    if hf < hp or wf < wp:
        full = np.zeros((n, cin, hp, wp), dtype=gx.dtype)
        full[:, :, :hf, :wf] = gx
        gx = full
    return np.ascontiguousarray(gx[:, :, padding : padding + h, padding : padding + w_in])


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Strided 2-d cross-correlation with zero padding (no kernel flip)."""
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride}, padding {padding} invalid")
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and weight, got {xd.shape} and {wd.shape}"
        )
    n, cin, h, w_in = xd.shape
    cout, cw, kh, kw = wd.shape
    if cin != cw:
        raise DimensionError(
            f"conv2d: input channel axis {cin} != weight channel axis {cw}"
        )
    conv_output_extent(h, kh, stride, padding)
    conv_output_extent(w_in, kw, stride, padding)
    out_data = _corr2d(xd, wd, stride, padding)
    if bias is not None:
        bd = bias.data
        if bd.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bd.shape} != ({cout},)")
        out_data = out_data + bd[None, :, None, None]
    out = Tensor(out_data)

    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def bw(g):
        gx = _corr2d_input_grad(g, wd, stride, padding, h, w_in) if need_x else None
        gw = _corr2d_weight_grad(xd, g, kh, kw, stride, padding) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if need_b else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, bw)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    momentum: float = 0.9,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    Train mode normalizes with batch statistics and folds them into the
    running buffers as ``running = momentum*running + (1-momentum)*batch``
    (population variance). Eval mode normalizes with the running buffers.
    """
    if epsilon <= 0:
        raise ContractError(f"batch_norm: epsilon must be > 0, got {epsilon}")
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"batch_norm: expected 4-d input, got {xd.shape}")
    c = xd.shape[1]
    for name, t in (
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        if t.data.shape != (c,):
            raise DimensionError(f"batch_norm: {name} shape {t.data.shape} != ({c},)")

    if train:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        rm, rv = running_mean.data, running_var.data
        rm[...] = momentum * rm + (1.0 - momentum) * mu
        rv[...] = momentum * rv + (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data

    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    need_x = x.requires_grad
    gw = gamma.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if not need_x:
            gx = None
        elif train:
            coeff = (gw * inv)[None, :, None, None] / m
            gx = coeff * (m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
        else:
            gx = g * (gw * inv)[None, :, None, None]
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float) -> float:
    """Max relative disagreement between taped gradients and central differences.

    The analytic side runs under the ambient dtype; the finite-difference
    probes re-evaluate ``f`` with 64-bit inputs so that the oracle is more
    accurate than the implementation it checks.
    """
    if h <= 0:
        raise ContractError(f"gradcheck: step h must be > 0, got {h}")
    with GraphTape() as tape:
        probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
        y = f(probe)
        if not isinstance(y, Tensor) or y.data.size != 1:
            raise ContractError("gradcheck: f must produce a scalar tensor")
        backward(y)
    tape.clear()
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(probe.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise NumericError(f"gradcheck: non-finite analytic gradient at coordinate {bad}")

    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            d = (fp - fm) / (2.0 * h)
            if not np.isfinite(d):
                raise NumericError(f"gradcheck: non-finite difference at coordinate {i}")
            numeric[i] = d

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
