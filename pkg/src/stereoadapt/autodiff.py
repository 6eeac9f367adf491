"""Dense rank-4 tensor arithmetic with reverse-mode automatic differentiation.

Every value in the pipeline (images, feature maps, cost volumes, disparity
maps, losses) is a `Tensor`: a float64 numpy array of shape (n, c, h, w)
plus the bookkeeping needed to replay the computation backwards. The graph
is define-by-run: each operation returns a fresh node holding references to
its inputs and a closure that scatters the output adjoint back onto them.
Calling `backward` on a scalar node walks the graph once in reverse
topological order and leaves d(root)/d(leaf) in each leaf's `.grad`.

Gradients are accumulated, so shared subexpressions (diamonds in the DAG)
come out right without any special casing. All arithmetic is float64 and
single-threaded numpy, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "zeros", "ones", "full", "scalar", "randn",
    "add", "sub", "mul", "div", "neg", "absolute", "exp", "log", "sqrt",
    "clamp", "relu", "leaky_relu", "sigmoid", "activation",
    "expand", "reduce_sum", "reduce_mean", "concat_channels",
    "slice_channels", "crop2d", "hshift", "replicate_pad1", "reshape4",
    "conv2d", "softmax_disparity", "backward",
    "GradCheckReport", "grad_check", "Adam",
]


class Tensor:
    """A rank-4 array that doubles as a node in the autodiff graph.

    Leaves are built directly from data; interior nodes are produced by the
    operations in this module and carry `parents` plus a `_backward` closure.
    `grad` is allocated lazily on first accumulation. A graph must stay on
    the thread that built it until `backward` has run; the `data` arrays
    themselves are safe to share read-only.
    """

    __slots__ = ("data", "grad", "parents", "op", "_backward")

    def __init__(self, data, parents=(), op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be rank 4 (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        """A leaf copy sharing this tensor's values but cut off from the graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # arithmetic operators delegate to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64))


def full(shape, value) -> Tensor:
    return Tensor(np.full(shape, float(value), dtype=np.float64))


def scalar(value) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value), dtype=np.float64))


def randn(rng: np.random.Generator, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _accum(node: Tensor, delta: np.ndarray):
    if node.grad is None:
        if getattr(delta, "shape", None) == node.data.shape:
            node.grad = np.array(delta, dtype=np.float64)
            return
        node.grad = np.zeros_like(node.data)
    node.grad += delta


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}; "
            "binary elementwise ops need equal shapes (use expand() to broadcast)"
        )


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = Tensor(a.data + b.data, (a, b), "add")

        def bw():
            _accum(a, out.grad)
            _accum(b, out.grad)
    else:
        out = Tensor(a.data + float(b), (a,), "add")

        def bw():
            _accum(a, out.grad)

    out._backward = bw
    return out


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = Tensor(a.data - b.data, (a, b), "sub")

        def bw():
            _accum(a, out.grad)
            _accum(b, -out.grad)
    else:
        out = Tensor(a.data - float(b), (a,), "sub")

        def bw():
            _accum(a, out.grad)

    out._backward = bw
    return out


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = Tensor(a.data * b.data, (a, b), "mul")

        def bw():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)
    else:
        k = float(b)
        out = Tensor(a.data * k, (a,), "mul")

        def bw():
            _accum(a, out.grad * k)

    out._backward = bw
    return out


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "div")
        if np.any(b.data == 0.0):
            raise ZeroDivisionError("div: divisor tensor contains zero")
        out = Tensor(a.data / b.data, (a, b), "div")

        def bw():
            _accum(a, out.grad / b.data)
            _accum(b, -out.grad * a.data / (b.data * b.data))
    else:
        k = float(b)
        if k == 0.0:
            raise ZeroDivisionError("div: scalar divisor is zero")
        out = Tensor(a.data / k, (a,), "div")

        def bw():
            _accum(a, out.grad / k)

    out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,), "neg")

    def bw():
        _accum(a, -out.grad)

    out._backward = bw
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), (a,), "abs")
    sign = np.sign(a.data)

    def bw():
        _accum(a, out.grad * sign)

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,), "exp")

    def bw():
        _accum(a, out.grad * out.data)

    out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: requires strictly positive input")
    out = Tensor(np.log(a.data), (a,), "log")

    def bw():
        _accum(a, out.grad / a.data)

    out._backward = bw
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: requires non-negative input")
    out = Tensor(np.sqrt(a.data), (a,), "sqrt")

    def bw():
        _accum(a, out.grad * 0.5 / out.data)

    out._backward = bw
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through where the input was in range."""
    out = Tensor(np.clip(a.data, lo, hi), (a,), "clamp")
    mask = (a.data >= lo) & (a.data <= hi)

    def bw():
        _accum(a, out.grad * mask)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# activations

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,), "relu")
    mask = a.data > 0.0

    def bw():
        _accum(a, out.grad * mask)

    out._backward = bw
    return out


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(a.data > 0.0, 1.0, slope)
    out = Tensor(a.data * factor, (a,), "leaky_relu")

    def bw():
        _accum(a, out.grad * factor)

    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid exp overflow on large magnitudes
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s, (a,), "sigmoid")

    def bw():
        _accum(a, out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# shape / layout primitives

def expand(a: Tensor, shape) -> Tensor:
    """Broadcast singleton axes of `a` up to `shape` (differentiable)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError(f"expand: target shape must be rank 4, got {shape}")
    axes = []
    for i, (have, want) in enumerate(zip(a.data.shape, shape)):
        if have == want:
            continue
        if have == 1:
            axes.append(i)
        else:
            raise ValueError(f"expand: cannot expand axis {i} from {have} to {want}")
    out = Tensor(np.broadcast_to(a.data, shape).copy(), (a,), "expand")
    axes = tuple(axes)

    def bw():
        _accum(a, out.grad.sum(axis=axes, keepdims=True))

    out._backward = bw
    return out


def _normalize_axes(axes) -> tuple:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(int(ax) % 4 for ax in axes))
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return axes


def reduce_sum(a: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes)
    extent = 1
    for ax in axes:
        extent *= a.data.shape[ax]
    if extent == 0:
        raise ValueError("reduce: empty reduction extent")
    out = Tensor(a.data.sum(axis=axes, keepdims=True), (a,), "sum")

    def bw():
        _accum(a, np.broadcast_to(out.grad, a.data.shape))

    out._backward = bw
    return out


def reduce_mean(a: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes)
    extent = 1
    for ax in axes:
        extent *= a.data.shape[ax]
    if extent == 0:
        raise ValueError("reduce: empty reduction extent")
    out = Tensor(a.data.mean(axis=axes, keepdims=True), (a,), "mean")
    inv = 1.0 / extent

    def bw():
        _accum(a, np.broadcast_to(out.grad * inv, a.data.shape))

    out._backward = bw
    return out


def reduce_sum_all(a: Tensor) -> Tensor:
    return reduce_sum(a, (0, 1, 2, 3))


def reduce_mean_all(a: Tensor) -> Tensor:
    return reduce_mean(a, (0, 1, 2, 3))


def concat_channels(xs) -> Tensor:
    """Stack tensors along the channel axis; adjoint splits the gradient back."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels: empty input list")
    n, _, h, w = xs[0].data.shape
    for x in xs[1:]:
        xn, _, xh, xw = x.data.shape
        if (xn, xh, xw) != (n, h, w):
            raise ValueError(
                f"concat_channels: spatial/batch mismatch {x.data.shape} vs {xs[0].data.shape}"
            )
    out = Tensor(np.concatenate([x.data for x in xs], axis=1), tuple(xs), "concat")
    offsets = np.cumsum([0] + [x.data.shape[1] for x in xs])

    def bw():
        for x, c0, c1 in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, out.grad[:, c0:c1])

    out._backward = bw
    return out


def slice_channels(a: Tensor, c0: int, c1: int) -> Tensor:
    c = a.data.shape[1]
    if not (0 <= c0 < c1 <= c):
        raise ValueError(f"slice_channels: bad range [{c0}, {c1}) for {c} channels")
    out = Tensor(a.data[:, c0:c1].copy(), (a,), "slice_c")

    def bw():
        g = np.zeros_like(a.data)
        g[:, c0:c1] = out.grad
        _accum(a, g)

    out._backward = bw
    return out


def crop2d(a: Tensor, top=0, bottom=0, left=0, right=0) -> Tensor:
    """Trim rows/columns from the spatial borders; adjoint zero-embeds."""
    n, c, h, w = a.data.shape
    if h - top - bottom < 1 or w - left - right < 1:
        raise ValueError(f"crop2d: crop ({top},{bottom},{left},{right}) empties shape {a.shape}")
    out = Tensor(a.data[:, :, top:h - bottom, left:w - right].copy(), (a,), "crop")

    def bw():
        g = np.zeros_like(a.data)
        g[:, :, top:h - bottom, left:w - right] = out.grad
        _accum(a, g)

    out._backward = bw
    return out


def hshift(a: Tensor, shift: int) -> Tensor:
    """Shift along x so out[..., x] = in[..., x - shift], zero-filled at the edge."""
    shift = int(shift)
    w = a.data.shape[3]
    data = np.zeros_like(a.data)
    if abs(shift) < w:
        if shift >= 0:
            data[..., shift:] = a.data[..., :w - shift]
        else:
            data[..., :w + shift] = a.data[..., -shift:]
    out = Tensor(data, (a,), "hshift")

    def bw():
        g = np.zeros_like(a.data)
        if abs(shift) < w:
            if shift >= 0:
                g[..., :w - shift] = out.grad[..., shift:]
            else:
                g[..., -shift:] = out.grad[..., :w + shift]
        _accum(a, g)

    out._backward = bw
    return out


def replicate_pad1(a: Tensor) -> Tensor:
    """Pad h and w by one pixel, replicating the border values."""
    out = Tensor(np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge"), (a,), "rpad")

    def bw():
        gp = out.grad
        g = gp[:, :, 1:-1, 1:-1].copy()
        g[:, :, 0, :] += gp[:, :, 0, 1:-1]
        g[:, :, -1, :] += gp[:, :, -1, 1:-1]
        g[:, :, :, 0] += gp[:, :, 1:-1, 0]
        g[:, :, :, -1] += gp[:, :, 1:-1, -1]
        g[:, :, 0, 0] += gp[:, :, 0, 0]
        g[:, :, 0, -1] += gp[:, :, 0, -1]
        g[:, :, -1, 0] += gp[:, :, -1, 0]
        g[:, :, -1, -1] += gp[:, :, -1, -1]
        _accum(a, g)

    out._backward = bw
    return out


def reshape4(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape4: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape), (a,), "reshape")

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution with zero padding.

    `weight` has shape (c_out, c_in, k, k) with k odd; `bias`, if given, is a
    (1, c_out, 1, 1) tensor added per output channel. The forward pass lowers
    the input to column form once and runs a single matmul; the backward pass
    reuses the columns for the weight gradient and scatters the column
    gradient back with a k*k strided accumulation.
    """
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh != kw or kh % 2 != 1:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ValueError(f"conv2d: bad stride/pad ({stride}, {pad})")
    if bias is not None and bias.data.shape != (1, cout, 1, 1):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != (1, {cout}, 1, 1)")

    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh} does not fit input {h}x{w} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, cin, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = view.reshape(n, cin * kh * kw, oh * ow)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    res = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    if bias is not None:
        res = res + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(res, parents, "conv2d")

    def bw():
        g = out.grad
        gflat = g.reshape(n, cout, oh * ow)
        gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(weight.data.shape)
        _accum(weight, gw)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1))
        gcols = np.matmul(w2.T, gflat).reshape(n, cin, kh, kw, oh, ow)
        gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += gcols[:, :, ki, kj]
        _accum(x, gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# softmax over the disparity (channel) axis

def softmax_disparity(volume: Tensor, sign: int = 1) -> Tensor:
    """Per-pixel softmax over axis 1 of `sign * volume`.

    With sign +1 larger entries mean stronger preference (matching scores);
    sign -1 flips costs into preferences. The max is subtracted before
    exponentiation so adding a constant across the axis leaves the output
    unchanged up to rounding.
    """
    if sign not in (1, -1):
        raise ValueError(f"softmax_disparity: sign must be +1 or -1, got {sign}")
    z = sign * volume.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, (volume,), "softmax_d")

    def bw():
        g = out.grad
        dot = (g * p).sum(axis=1, keepdims=True)
        _accum(volume, sign * p * (g - dot))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Tensor):
    """Run reverse-mode accumulation from a scalar root.

    Visits each reachable node exactly once in reverse topological order, so
    a node's adjoint is complete before it is propagated to its parents.
    """
    if root.data.shape != (1, 1, 1, 1):
        raise ValueError(f"backward: root must be scalar (1,1,1,1), got {root.shape}")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones((1, 1, 1, 1))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple  # (input position, flat coordinate)
    autodiff_value: float
    numeric_value: float

    def __str__(self):
        return (f"max_rel_err={self.max_rel_err:.3e} at input {self.worst_index[0]} "
                f"coord {self.worst_index[1]} (ad={self.autodiff_value:.6e}, "
                f"fd={self.numeric_value:.6e})")


def grad_check(f, inputs, step: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of a scalar function against central differences.

    `f` maps one leaf Tensor per entry of `inputs` (numpy arrays) to a scalar
    Tensor. Every coordinate of every input is perturbed by +/-step and the
    relative error uses denominator max(|ad|, |fd|, 1e-8) to dodge 0/0.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy()) for a in arrays]
    out = f(*leaves)
    backward(out)
    ad = [l.grad.copy() if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def eval_at(idx, flat, value):
        args = []
        for k, a in enumerate(arrays):
            if k == idx:
                mod = a.copy()
                mod.reshape(-1)[flat] = value
                args.append(Tensor(mod))
            else:
                args.append(Tensor(a.copy()))
        return f(*args).item()

    max_rel = -1.0
    worst = (0, 0)
    worst_ad = worst_fd = 0.0
    for i, a in enumerate(arrays):
        flat_view = a.reshape(-1)
        ad_flat = ad[i].reshape(-1)
        for j in range(flat_view.size):
            x0 = flat_view[j]
            fp = eval_at(i, j, x0 + step)
            fm = eval_at(i, j, x0 - step)
            fd = (fp - fm) / (2.0 * step)
            a_val = ad_flat[j]
            rel = abs(a_val - fd) / max(abs(a_val), abs(fd), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
                worst_ad, worst_fd = a_val, fd
    return GradCheckReport(max_rel, worst, worst_ad, worst_fd)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict.

    First/second moment estimates live in the optimizer keyed by parameter
    name, so the same instance must be stepped with a consistently named
    parameter set. Parameters with no accumulated gradient are treated as
    having zero gradient.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if name not in self.m:
                raise KeyError(f"Adam: unknown parameter {name!r}")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != self.m[name].shape:
                raise ValueError(
                    f"Adam: gradient shape {g.shape} != state shape {self.m[name].shape} for {name!r}"
                )
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    @staticmethod
    def zero_grads(params):
        for p in params.values():
            p.grad = None
