"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Forward ops record a computation graph only when some input requires
gradients; ``backward`` replays the graph once in reverse topological
order. Everything is 64-bit, single-threaded, and deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

PARAM_GROUPS = ("eps_s", "eps_t", "phi_s", "phi_t", "theta_s", "theta_t")


class ShapeMismatch(ValueError):
    def __init__(self, op: str, a, b):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op


class GradError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # -- graph construction --------------------------------------------------
    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 op: str, backward: Callable[[np.ndarray], None]) -> "Tensor":
        requires = any(p.requires_grad or p._backward is not None for p in parents)
        out = Tensor(data, requires_grad=requires)
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeMismatch("add", self.shape, other.shape)

        def back(g):
            self._accum(g)
            other._accum(g)
        return Tensor._from_op(data, (self, other), "add", back)

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            self._accum(-g)
        return Tensor._from_op(-self.data, (self,), "neg", back)

    def __sub__(self, other):
        other = as_tensor(other)
        try:
            data = self.data - other.data
        except ValueError:
            raise ShapeMismatch("sub", self.shape, other.shape)

        def back(g):
            self._accum(g)
            other._accum(-g)
        return Tensor._from_op(data, (self, other), "sub", back)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeMismatch("mul", self.shape, other.shape)

        def back(g):
            self._accum(g * other.data)
            other._accum(g * self.data)
        return Tensor._from_op(data, (self, other), "mul", back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        try:
            data = self.data / other.data
        except ValueError:
            raise ShapeMismatch("div", self.shape, other.shape)

        def back(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / (other.data ** 2))
        return Tensor._from_op(data, (self, other), "div", back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        p = float(p)

        def back(g):
            self._accum(g * p * self.data ** (p - 1.0))
        return Tensor._from_op(self.data ** p, (self,), "pow", back)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeMismatch("matmul", self.shape, other.shape)
        data = self.data @ other.data

        def back(g):
            self._accum(g @ other.data.T)
            other._accum(self.data.T @ g)
        return Tensor._from_op(data, (self, other), "matmul", back)

    # -- unary / reductions --------------------------------------------------
    def exp(self):
        data = np.exp(self.data)

        def back(g):
            self._accum(g * data)
        return Tensor._from_op(data, (self,), "exp", back)

    def log(self):
        def back(g):
            self._accum(g / self.data)
        return Tensor._from_op(np.log(self.data), (self,), "log", back)

    def sqrt(self):
        data = np.sqrt(self.data)

        def back(g):
            self._accum(g * 0.5 / data)
        return Tensor._from_op(data, (self,), "sqrt", back)

    def relu(self):
        mask = self.data > 0.0

        def back(g):
            self._accum(g * mask)
        return Tensor._from_op(self.data * mask, (self,), "relu", back)

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def back(g):
            g = np.asarray(g, dtype=np.float64)
            if axis is not None and not keepdims:
                ax = (axis,) if isinstance(axis, int) else tuple(axis)
                ax = tuple(a % len(in_shape) for a in ax)
                shp = tuple(1 if i in ax else n for i, n in enumerate(in_shape))
                g = g.reshape(shp)
            self._accum(np.broadcast_to(g, in_shape))
        return Tensor._from_op(data, (self,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else (
            np.prod([self.shape[a % self.ndim] for a in ((axis,) if isinstance(axis, int) else axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape

        def back(g):
            self._accum(np.asarray(g).reshape(in_shape))
        return Tensor._from_op(self.data.reshape(shape), (self,), "reshape", back)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeMismatch("transpose", self.shape, self.shape)

        def back(g):
            self._accum(np.asarray(g).T)
        return Tensor._from_op(self.data.T.copy(), (self,), "transpose", back)

    # -- backprop ------------------------------------------------------------
    def backward(self) -> None:
        """Seed a scalar loss with gradient 1 and sweep the graph once."""
        if self.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise GradError("loss is detached from the computation graph")
        topo: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- structured layer primitives ---------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCKK kernels (zero padding)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    if padding > 0:
        x = pad2d(x, padding)
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if ck != c or kh != kw:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    k = kh
    if k > h or k > wd:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :, :] = x.data[:, :, i:i + stride * oh:stride,
                                            j:j + stride * ow:stride]
    out = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # n,oh,ow,o
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        g = np.asarray(g, dtype=np.float64)
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # o,c,k,k
        w._accum(dw)
        dcols = np.einsum("nopq,ocij->ncijpq", g, w.data)
        dx = np.zeros((n, c, h, wd), dtype=np.float64)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, i, j, :, :]
        x._accum(dx)
    return Tensor._from_op(out, (x, w), "conv2d", back)


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two trailing spatial dims of an NCHW tensor."""
    data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def back(g):
        x._accum(np.asarray(g)[:, :, p:-p, p:-p])
    return Tensor._from_op(data, (x,), "pad2d", back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               update_stats: bool = True) -> Tensor:
    """Batch normalization over (N,) or (N,H,W) slices per feature/channel.

    Train mode normalizes by batch statistics (biased variance) and, when
    ``update_stats`` is set, folds them into the running buffers with the
    given momentum; eval mode normalizes by the running buffers.
    """
    if x.ndim == 2:
        axes: Tuple[int, ...] = (0,)
        shape = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
    else:
        raise ShapeMismatch("batch_norm", x.shape, gamma.shape)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: train mode needs batch size >= 2")
        mu = x.mean(axis=axes, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
        if update_stats:
            running_mean[...] = momentum * running_mean + (1 - momentum) * mu.data.reshape(-1)
            running_var[...] = momentum * running_var + (1 - momentum) * var.data.reshape(-1)
        xn = (x - mu) / (var + eps).sqrt()
    else:
        xn = ((x - Tensor(running_mean.reshape(shape)))
              / Tensor(np.sqrt(running_var.reshape(shape) + eps)))
    return xn * gamma.reshape(shape) + beta.reshape(shape)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch("maxpool2x2", x.shape, (n, c, h, w))
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        g = np.asarray(g, dtype=np.float64)
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(dx.reshape(n, c, h, w))
    return Tensor._from_op(np.ascontiguousarray(out), (x,), "maxpool2x2", back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, max-shifted for stability."""
    shift = x - Tensor(x.data.max(axis=-1, keepdims=True))
    return shift - shift.exp().sum(axis=-1, keepdims=True).log()


def softmax(x: Tensor) -> Tensor:
    return log_softmax(x).exp()


# -- parameter bookkeeping ----------------------------------------------------

@dataclass
class ParameterSet:
    """Named trainable tensors partitioned into the six schedule groups."""

    entries: Dict[str, Tensor] = field(default_factory=dict)
    groups: Dict[str, List[str]] = field(default_factory=dict)

    def add(self, group: str, name: str, t: Tensor) -> None:
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown group {group!r}")
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.entries[name] = t
        self.groups.setdefault(group, []).append(name)

    def subset(self, group_ids: Iterable[str]) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for gid in group_ids:
            if gid not in PARAM_GROUPS:
                raise ValueError(f"unknown group {gid!r}")
            for name in self.groups.get(gid, ()):
                out[name] = self.entries[name]
        return out

    def validate_partition(self) -> None:
        seen: Dict[str, str] = {}
        for gid, names in self.groups.items():
            for name in names:
                if name in seen:
                    raise ValueError(f"parameter {name!r} in groups {seen[name]} and {gid}")
                seen[name] = gid
        missing = set(self.entries) - set(seen)
        if missing:
            raise ValueError(f"parameters without a group: {sorted(missing)}")

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.entries.items()}


# -- optimizers ---------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, learning_rate: float):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, t in params.items():
            if t.grad is None:
                raise GradError(f"missing gradient for parameter {name!r}")
            t.data = t.data - self.learning_rate * t.grad
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")


class Adam:
    kind = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, t in params.items():
            if t.grad is None:
                raise GradError(f"missing gradient for parameter {name!r}")
            g = t.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(t.data)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            ts = self._t[name]
            m[...] = self.beta1 * m + (1 - self.beta1) * g
            v[...] = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** ts)
            vhat = v / (1 - self.beta2 ** ts)
            t.data = t.data - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")


def make_optimizer(kind: str, learning_rate: float):
    if kind == "sgd":
        return SGD(learning_rate)
    if kind == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optimizer_step(params: ParameterSet, group_ids: Iterable[str], optimizer) -> None:
    """Apply one optimizer update to exactly the named groups."""
    optimizer.step(params.subset(group_ids))


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    ``loss_fn`` must rebuild its forward pass on every call and be
    deterministic (dropout disabled).
    """
    for t in params.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    errors: Dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        errors[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    return GradCheckReport(errors=errors, tolerance=tolerance)
