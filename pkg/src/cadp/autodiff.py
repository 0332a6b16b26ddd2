"""Reverse-mode automatic differentiation over dense numpy tensors.

The op set is exactly what the CNN/MLP architectures and the adaptation
losses need: matmul, add, scale, 3x3 same conv, 2x2 maxpool, global average
pool, leaky-relu/relu/sigmoid, softmax/log-softmax, elementwise mul, log,
sum, mean, dropout, gaussian noise, batchnorm, instance norm, reshape,
concat.  Graphs are built eagerly (define-by-run); `Graph` exposes the
topological ordering and drives the backward sweep.  A central-difference
oracle (`finite_difference_gradient`, `gradient_check`) provides the
independent verification path for every analytic gradient.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, OracleInvalidError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

# All logarithms in the package go through _safe_log; values below this floor
# are clamped so simplex boundaries never produce NaN/Inf.
LOG_FLOOR = 1e-8

_ids = threading.local()


def _next_id() -> int:
    counter = getattr(_ids, "counter", None)
    if counter is None:
        counter = itertools.count()
        _ids.counter = counter
    return next(counter)


def _check_finite(data: np.ndarray, op: str, node: int) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values in output", op=op, node=node)


class Tensor:
    """Dense n-d value with an optional gradient slot.

    Tensors produced by ops remember their parents and a backward rule;
    leaves are constructed directly. `requires_grad` propagates through ops.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.node_id = _next_id()
        _check_finite(self.data, "leaf", self.node_id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant view of this tensor: same values, no graph connection."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "leaf"
        out.parents = ()
        out._backward = None
        out.node_id = _next_id()
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        Graph(self).backward()

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype}{flag})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    """Wrap an op output. Constant subgraphs collapse to leaves so that
    evaluation-only forwards retain no graph."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.node_id = _next_id()
    _check_finite(data, op, out.node_id)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def grad_array(t: Tensor) -> np.ndarray:
    """Gradient of `t`, with exact zeros for tensors the loss never touched."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


class Graph:
    """Topologically ordered view of the computation ending at `root`.

    Node order is parents-before-children; the backward sweep visits each
    node exactly once in reverse.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._topo(root)

    @staticmethod
    def _topo(root: Tensor) -> list[Tensor]:
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        root = self.root
        if root.size != 1:
            raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(root: Tensor) -> None:
    Graph(root).backward()


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw, "add")


def scale(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    """Affine map a*x + b with scalar coefficients."""
    a = float(a)
    data = a * x.data + np.asarray(b, dtype=x.data.dtype)

    def bw(g):
        _accum(x, a * g)

    return _make(data.astype(x.data.dtype, copy=False), (x,), bw, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("elementwise-mul", f"cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw, "elementwise-mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(data, (a, b), bw, "matmul")


def safe_log_array(v: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(v, LOG_FLOOR))


def log(x: Tensor) -> Tensor:
    """Floored natural log: ln(max(x, LOG_FLOOR)). Gradient is zero below the floor."""
    clipped = np.maximum(x.data, LOG_FLOOR)
    data = np.log(clipped)
    above = x.data > LOG_FLOOR

    def bw(g):
        _accum(x, np.where(above, g / clipped, 0.0).astype(x.data.dtype))

    return _make(data, (x,), bw, "log")


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.size

    def bw(g):
        _accum(x, np.broadcast_to(g * inv, x.data.shape).astype(x.data.dtype))

    return _make(data, (x,), bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(data, (x,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, alpha * x.data).astype(x.data.dtype)

    def bw(g):
        _accum(x, np.where(pos, g, alpha * g).astype(x.data.dtype))

    return _make(data, (x,), bw, "leaky-relu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, 0.0).astype(x.data.dtype)

    def bw(g):
        _accum(x, np.where(pos, g, 0.0).astype(x.data.dtype))

    return _make(data, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign for stability at large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        _accum(x, (g * out * (1.0 - out)).astype(d.dtype))

    return _make(out, (x,), bw, "sigmoid")


def _softmax_data(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = _softmax_data(x.data)

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, (p * (g - dot)).astype(x.data.dtype))

    return _make(p, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def bw(g):
        p = np.exp(data)
        _accum(x, (g - p * g.sum(axis=-1, keepdims=True)).astype(x.data.dtype))

    return _make(data, (x,), bw, "log-softmax")


# ---------------------------------------------------------------------------
# spatial ops (NHWC layout throughout)
# ---------------------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N*H*W, 9*C) patches for a 3x3 same-padded convolution."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win: (N, H, W, C, 3, 3) -> (N, H, W, 3, 3, C) so patch layout matches w(3,3,Cin,Cout)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero 'same' padding. x: (N,H,W,Cin), w: (3,3,Cin,Cout)."""
    if x.ndim != 4:
        raise ShapeError("conv2d-3x3-same", f"expected NHWC input, got {x.shape}")
    if w.ndim != 4 or w.shape[0] != 3 or w.shape[1] != 3 or w.shape[2] != x.shape[3]:
        raise ShapeError("conv2d-3x3-same", f"kernel {w.shape} does not fit input {x.shape}")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    cols = _im2col3(x.data)
    data = (cols @ w.data.reshape(9 * cin, cout)).reshape(n, h, wd, cout)

    def bw(g):
        gmat = g.reshape(n * h * wd, cout)
        if w.requires_grad:
            # recompute cols rather than retaining them in the graph
            dw = _im2col3(x.data).T @ gmat
            _accum(w, dw.reshape(3, 3, cin, cout))
        if x.requires_grad:
            # gradient w.r.t. input is a 3x3 same conv of g with the
            # spatially flipped, in/out-transposed kernel
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2)  # (3,3,Cout,Cin)
            gcols = _im2col3(g)
            _accum(x, (gcols @ wflip.reshape(9 * cout, cin)).reshape(n, h, wd, cin))

    return _make(data, (x, w), bw, "conv2d-3x3-same")


def maxpool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError("maxpool-2x2-stride2", f"need NHWC with even H,W, got {x.shape}")
    n, h, w, c = x.shape
    v = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    data = v.max(axis=(2, 4))

    def bw(g):
        # ties: first occurrence in row-major (di, dj) order takes the gradient
        cand = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        hit = cand == data[..., None]
        first = hit & (np.cumsum(hit, axis=-1) == 1)
        dv = (first * g[..., None]).reshape(n, h // 2, w // 2, c, 2, 2)
        _accum(x, dv.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c))

    return _make(data, (x,), bw, "maxpool-2x2-stride2")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global-avg-pool", f"expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    data = x.data.mean(axis=(1, 2))
    inv = 1.0 / (h * w)

    def bw(g):
        _accum(x, np.broadcast_to(g[:, None, None, :] * inv, x.data.shape).astype(x.data.dtype))

    return _make(data, (x,), bw, "global-avg-pool")


# ---------------------------------------------------------------------------
# stochastic / normalization ops
# ---------------------------------------------------------------------------


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scale by 1/(1-p) at train time, identity at eval."""
    if mode == "eval" or p <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    factor = 1.0 / (1.0 - p)
    data = x.data * keep * np.asarray(factor, dtype=x.data.dtype)

    def bw(g):
        _accum(x, (g * keep * np.asarray(factor, dtype=x.data.dtype)).astype(x.data.dtype))

    return _make(data, (x,), bw, "dropout")


def gaussian_noise(x: Tensor, sigma: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Additive N(0, sigma^2) noise in train mode, identity at eval."""
    if mode == "eval" or sigma == 0.0:
        return x
    if rng is None:
        raise UsageError("gaussian-noise in train mode requires an rng")
    noise = rng.standard_normal(x.shape, dtype=np.float64).astype(x.data.dtype)
    data = x.data + sigma * noise

    def bw(g):
        _accum(x, g)

    return _make(data.astype(x.data.dtype, copy=False), (x,), bw, "gaussian-noise")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.99,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N,) or (N,H,W) for the channel-last axis.

    Train mode normalizes by batch statistics (population variance) and, when
    `update_stats`, folds them into the running estimates. Eval mode uses the
    running estimates.
    """
    if x.ndim not in (2, 4):
        raise ShapeError("batchnorm", f"expected (N,F) or (N,H,W,C), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 1, 2)
    ch = x.shape[-1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError("batchnorm", f"gamma/beta {gamma.shape}/{beta.shape} vs channels {ch}")

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = (gamma.data * xhat + beta.data).astype(x.data.dtype)
    m = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes).astype(gamma.data.dtype))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes).astype(beta.data.dtype))
        if x.requires_grad:
            gx = g * gamma.data
            if mode == "train":
                s1 = gx.sum(axis=axes)
                s2 = (gx * xhat).sum(axis=axes)
                dx = inv_std / m * (m * gx - s1 - xhat * s2)
            else:
                dx = gx * inv_std
            _accum(x, dx.astype(x.data.dtype))

    return _make(data, (x, gamma, beta), bw, "batchnorm")


def instance_norm(x: Tensor, std_floor: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardization of NHWC batches.

    Channels whose spatial std falls at/below the floor are treated as
    constant and map to zeros.
    """
    if x.ndim != 4:
        raise ShapeError("instance-norm", f"expected NHWC input, got {x.shape}")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    sd = x.data.std(axis=(1, 2), keepdims=True)
    live = sd > std_floor
    s = np.maximum(sd, std_floor)
    centered = x.data - mu
    data = (centered / s).astype(x.data.dtype)
    m = x.shape[1] * x.shape[2]

    def bw(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        # where the std is floored, s is constant w.r.t. x
        proj = (g * data).mean(axis=(1, 2), keepdims=True)
        dx = (g - gm - np.where(live, data * proj, 0.0)) / s
        _accum(x, dx.astype(x.data.dtype))
        del m

    return _make(data, (x,), bw, "instance-norm")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_error: float = 0.0
    tolerance: float = 0.0
    passed: bool = False

    def worst(self) -> str:
        if not self.per_param:
            return "<no parameters>"
        name = max(self.per_param, key=self.per_param.get)
        return f"{name}={self.per_param[name]:.3e}"


def _loss_value(loss_fn: Callable[[], "Tensor | float"]) -> float:
    v = loss_fn()
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    named = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((f"p{i}", p))
    return named


def finite_difference_gradient(
    loss_fn: Callable[[], "Tensor | float"],
    params: "Mapping[str, Tensor] | Iterable[Tensor | tuple[str, Tensor]]",
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, perturbing each coordinate in place.

    `loss_fn` must be deterministic; it is evaluated twice up front and an
    `OracleInvalidError` is raised if the two values differ bitwise.
    """
    if h <= 0:
        raise UsageError("finite differences require h > 0")
    named = _named(params)
    base1 = _loss_value(loss_fn)
    base2 = _loss_value(loss_fn)
    if base1 != base2:
        raise OracleInvalidError(
            f"loss_fn is not deterministic: {base1!r} != {base2!r}; fix the seed"
        )
    grads: dict[str, np.ndarray] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            fp = _loss_value(loss_fn)
            flat[i] = orig - step
            fm = _loss_value(loss_fn)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads[name] = g.reshape(p.data.shape)
    return grads


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Run backward and the finite-difference oracle; compare per parameter.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    named = _named(params)
    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise UsageError("gradient_check loss_fn must return a Tensor")
    Graph(loss).backward()
    analytic = {name: grad_array(p).astype(np.float64) for name, p in named}
    numeric = finite_difference_gradient(loss_fn, named, h=h)

    report = GradCheckReport(tolerance=tolerance)
    worst = 0.0
    for name, _ in named:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        report.per_param[name] = err
        worst = max(worst, err)
    report.max_rel_error = worst
    report.passed = worst <= tolerance
    return report
