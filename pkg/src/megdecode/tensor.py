"""Dense real tensors with reverse-mode automatic differentiation.

Forward arithmetic is plain numpy. When a Tape is active, every operation
whose inputs require gradients appends a closure to the tape; backward()
replays the tape in reverse and accumulates d(loss)/d(leaf) into .grad.
The tape is built per forward pass and thrown away afterwards, so inference
(no active tape) records nothing and allocates nothing extra.

Default precision is 64-bit so finite-difference checks are meaningful;
training code may run in 32-bit for throughput.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np

from .errors import GradientError, NumericError, ShapeError

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    """The innermost open Tape, or None outside any `with Tape():` block."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Tensors refer to their tape only weakly and backward() consumes the
    entries, so intermediate arrays are freed by reference counting as soon
    as the tape is dropped or replayed. A consumed tape cannot be replayed;
    rerun the forward pass instead.
    """

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GradientError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))
        out._tape = weakref.ref(self)
        out._op_output = True

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into .grad for every leaf that requires it.

        Entries were appended in forward order, so the reversed list is a valid
        topological order. Leaves that appear on the tape but not on any path
        to the loss receive explicit zeros.
        """
        if self._consumed:
            raise GradientError("tape already consumed by a previous backward; rerun the forward pass")
        if loss._tape is None or loss._tape() is not self:
            raise GradientError("loss was not produced on this tape")
        grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for out, inputs, backward_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward_fn(g)
            for t, ig in zip(inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t._op_output:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    t.grad = ig if t.grad is None else t.grad + ig
        for _, inputs, _ in self._entries:
            for t in inputs:
                if t.requires_grad and not t._op_output and t.grad is None:
                    t.grad = np.zeros_like(t.data)
        self._entries.clear()
        self._consumed = True


class Tensor:
    """A dense n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_op_output")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars are accepted on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, like=None):
    """Wrap x as a constant Tensor; scalars take the dtype of `like` if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, inputs, backward_fn):
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    # reduce a broadcast gradient back to `shape`
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward_fn)


def sub(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(data, (a, b), backward_fn)


def mul(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    data = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward_fn)


def div(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    data = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(data, (a, b), backward_fn)


def neg(a):
    a = as_tensor(a)

    def backward_fn(g):
        return (-g,)

    return _result(-a.data, (a,), backward_fn)


def scale(a, c):
    """Multiply by a python constant; c is not differentiated."""
    a = as_tensor(a)
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward_fn)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward_fn(g):
        return (g * y,)

    return _result(y, (a,), backward_fn)


def log(a):
    a = as_tensor(a)

    def backward_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward_fn)


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def backward_fn(g):
        return (g / (2.0 * y),)

    return _result(y, (a,), backward_fn)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), backward_fn)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    y[~pos] = ez / (1.0 + ez)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), backward_fn)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward_fn)


def elu(a, alpha=1.0):
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    pos = x > 0
    y = np.where(pos, x, neg_part)

    def backward_fn(g):
        return (g * np.where(pos, 1.0, neg_part + alpha),)

    return _result(y, (a,), backward_fn)


_UNARY = {"tanh": tanh, "relu": relu, "elu": elu, "exp": exp, "log": log,
          "sqrt": sqrt, "sigmoid": sigmoid, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, *operands):
    """Apply a named elementwise op under the strict public shape rule.

    Binary operands must have equal shapes, or one of them must be a scalar
    (rank-0 tensor or python number). scale-by-constant takes (tensor, number).
    """
    if kind in _UNARY:
        if len(operands) != 1:
            raise ShapeError(f"{kind} takes one operand, got {len(operands)}")
        return _UNARY[kind](operands[0])
    if kind == "scale":
        if len(operands) != 2 or isinstance(operands[1], Tensor):
            raise ShapeError("scale takes (tensor, python constant)")
        return scale(operands[0], operands[1])
    if kind in _BINARY:
        if len(operands) != 2:
            raise ShapeError(f"{kind} takes two operands, got {len(operands)}")
        a, b = operands
        sa = a.shape if isinstance(a, Tensor) else ()
        sb = b.shape if isinstance(b, Tensor) else ()
        if sa != sb and sa != () and sb != ():
            raise ShapeError(f"elementwise {kind}: shapes {sa} and {sb} differ and neither is scalar")
        return _BINARY[kind](a, b)
    raise ShapeError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product.

    Both operands must be rank >= 2. Leading batch dimensions must be equal,
    except that a rank-2 operand broadcasts against any batch (the usual
    shared-weight case).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return ga, gb

    return _result(data, (a, b), backward_fn)


def softmax(a, axis=-1):
    """Numerically stable softmax along one axis."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape and reduction ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(old),)

    return _result(data, (a,), backward_fn)


def transpose(a, axes=None):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inv),)

    return _result(data, (a,), backward_fn)


def take(a, idx):
    """Basic slicing/integer indexing; gradients scatter back into zeros."""
    a = as_tensor(a)
    data = np.ascontiguousarray(a.data[idx])

    def backward_fn(g):
        z = np.zeros_like(a.data)
        z[idx] += g.reshape(z[idx].shape)
        return (z,)

    return _result(data, (a,), backward_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat rank mismatch: {ref} vs {t.shape}")
        for d in range(t.ndim):
            if d != ax and t.shape[d] != ref[d]:
                raise ShapeError(f"concat non-axis dimension mismatch: {ref} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _result(data, tuple(tensors), backward_fn)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack shape mismatch: {tensors[0].shape} vs {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tuple(tensors), backward_fn)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=ax, keepdims=keepdims)
    in_shape = a.shape

    def backward_fn(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _result(data, (a,), backward_fn)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    data = a.data.mean(axis=ax, keepdims=keepdims)
    in_shape = a.shape
    count = a.size if ax is None else int(np.prod([in_shape[i] for i in ax]))

    def backward_fn(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return _result(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution primitives (NHWC layout, stride 1)


def _same_pad(k):
    # keras convention: left/top gets the smaller half for even kernels
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _pad_hw(x, ph, pw):
    return np.pad(x, ((0, 0), (ph[0], ph[1]), (pw[0], pw[1]), (0, 0)))


def _patches(x, kh, kw):
    # (B, H', W', kh, kw, C) view, no copy
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return v.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x, w, bias=None, padding="valid"):
    """2-d cross-correlation: x (B,H,W,C), w (kh,kw,C,F) -> (B,H',W',F)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x rank 4 and w rank 4, got {x.shape}, {w.shape}")
    kh, kw, cin, nf = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {cin}")
    if padding == "same":
        ph, pw = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ShapeError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    xp = _pad_hw(x.data, ph, pw)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"conv2d kernel ({kh},{kw}) larger than input {x.shape[1:3]} with {padding} padding")
    pat = _patches(xp, kh, kw)
    data = np.einsum("bijuvc,uvcf->bijf", pat, w.data, optimize=True)
    inputs = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (nf,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({nf},)")
        data = data + bias.data
        inputs = (x, w, bias)

    def backward_fn(g):
        gw = np.einsum("bijuvc,bijf->uvcf", pat, g, optimize=True)
        gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2)
        gxp = np.einsum("bijuvf,uvfc->bijc", _patches(gp, kh, kw), wflip, optimize=True)
        gx = gxp[:, ph[0]:gxp.shape[1] - ph[1] or None, pw[0]:gxp.shape[2] - pw[1] or None]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _result(data, inputs, backward_fn)


def depthwise_conv2d(x, w, padding="valid"):
    """Per-channel convolution: x (B,H,W,C), w (kh,kw,C,M) -> (B,H',W',C*M).

    Output channels are grouped by input channel (channel c's M maps are
    adjacent), matching the usual depthwise layout.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects rank-4 x and w, got {x.shape}, {w.shape}")
    kh, kw, cin, mult = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape[3]}, kernel {cin}")
    if padding == "same":
        ph, pw = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ShapeError(f"depthwise padding must be 'same' or 'valid', got {padding!r}")
    xp = _pad_hw(x.data, ph, pw)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"depthwise kernel ({kh},{kw}) larger than input {x.shape[1:3]}")
    pat = _patches(xp, kh, kw)
    core = np.einsum("bijuvc,uvcm->bijcm", pat, w.data, optimize=True)
    b, ho, wo = core.shape[:3]
    data = core.reshape(b, ho, wo, cin * mult)

    def backward_fn(g):
        gc = g.reshape(b, ho, wo, cin, mult)
        gw = np.einsum("bijuvc,bijcm->uvcm", pat, gc, optimize=True)
        gp = np.pad(gc, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0), (0, 0)))
        v = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
        # v: (B, H, W, C, M, kh, kw)
        gxp = np.einsum("bijcmuv,uvcm->bijc", v, w.data[::-1, ::-1], optimize=True)
        gx = gxp[:, ph[0]:gxp.shape[1] - ph[1] or None, pw[0]:gxp.shape[2] - pw[1] or None]
        return np.ascontiguousarray(gx), gw

    return _result(data, (x, w), backward_fn)


def avg_pool2d(x, pool):
    """Non-overlapping average pooling; trailing remainders are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects rank-4 input, got {x.shape}")
    ph, pw = pool
    b, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool {pool} larger than input {x.shape[1:3]}")
    t = take(x, (slice(None), slice(0, ho * ph), slice(0, wo * pw), slice(None)))
    t = reshape(t, (b, ho, ph, wo, pw, c))
    return tmean(t, axis=(2, 4))


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, onehot):
    """Mean cross-entropy of softmax(logits) against one-hot rows.

    logits (B,K) tensor; onehot (B,K) constant array. The gradient is the
    classic (softmax - onehot) / B.
    """
    logits = as_tensor(logits)
    y = np.asarray(onehot, dtype=logits.data.dtype)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"cross-entropy expects matching (B,K) shapes, got {logits.shape} and {y.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - (z * y).sum(axis=1)
    data = np.asarray(losses.mean(), dtype=z.dtype)
    bsz = z.shape[0]

    def backward_fn(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        return (g * (p - y) / bsz,)

    return _result(data, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward driver and finite-difference check


def backward(loss):
    """Run reverse-mode accumulation from a rank-0 loss tensor."""
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor loss")
    if loss.ndim != 0:
        raise GradientError(f"loss must be rank-0, got shape {loss.shape}")
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        raise GradientError("loss was not produced on an active tape (or the tape was dropped)")
    tape.backward(loss)


def grad_check(f, inputs, eps=1e-6, max_coords=8, seed=0):
    """Max relative error between tape gradients and central differences.

    f maps the given Tensors to a rank-0 Tensor and must be deterministic.
    Up to max_coords coordinates per input are perturbed (all of them when the
    input is that small). Inputs must be float64 for the comparison to mean
    anything. Relative error uses max(1, |numeric|) in the denominator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    with Tape():
        out = f(*inputs)
        if out.ndim != 0:
            raise GradientError("grad_check target must return a rank-0 Tensor")
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = range(n)
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*inputs).item()
            flat[i] = orig - eps
            fm = f(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite-difference evaluation")
            num = (fp - fm) / (2.0 * eps)
            err = abs(an_flat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
