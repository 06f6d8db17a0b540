"""Dense float64 tensors with reverse-mode autodiff and an AdamW optimizer.

Every model and loss computation in the package is expressed with the ops in
this module. The graph is recorded eagerly while ``grad_enabled()`` is true and
walked in reverse topological order by :meth:`Tensor.backward`. Only leaf
tensors created with ``requires_grad=True`` keep a ``.grad`` field; interior
gradients live in a scratch dict for the duration of one backward pass.

Broadcasting between two tensors is limited to leading dimensions: the
lower-rank operand must equal the trailing dims of the other. Constant numpy
operands broadcast freely since they never receive gradients.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_GRAD_ENABLED = True


class NumericalInputError(ValueError):
    """Raised when an op receives NaN or infinite input it cannot handle."""


class DeterminismError(RuntimeError):
    """Raised when a function meant to be pure returns different values on replay."""


class PoisonedStepError(FloatingPointError):
    """Raised when an optimizer step sees non-finite gradients."""


@contextlib.contextmanager
def no_grad():
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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- graph -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_leading_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    # leading unit axes of the smaller operand also broadcast
    while small and small[0] == 1 and len(small) == len(big):
        small, big = small[1:], big[1:]
    if len(small) == 0:
        return
    if big[len(big) - len(small):] != small:
        raise ValueError(f"only leading-dimension broadcast is supported: {a} vs {b}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_leading_broadcast(a.shape, b.shape)
        sa, sb = a.shape, b.shape

        def backward(g):
            return _reduce_to(g, sa), _reduce_to(g, sb)

        return _make(a.data + b.data, (a, b), backward)
    sa = a.shape
    return _make(a.data + np.asarray(b, dtype=DTYPE), (a,), lambda g: (_reduce_to(g, sa),))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        _check_leading_broadcast(a.shape, b.shape)
        ad, bd = a.data, b.data

        def backward(g):
            return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

        return _make(ad * bd, (a, b), backward)
    c = np.asarray(b, dtype=DTYPE)
    sa = a.shape
    return _make(a.data * c, (a,), lambda g: (_reduce_to(g * c, sa),))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    return mean(a, axis)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    _check_leading_broadcast(a.shape, tuple(shape))
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_reduce_to(g, old),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif ad.ndim == 1 or bd.ndim == 1:
            if ad.ndim == 1 and bd.ndim == 1:
                ga, gb = g * bd, g * ad
            elif ad.ndim == 1:
                ga, gb = bd @ g, np.outer(ad, g)
            else:
                ga, gb = np.outer(g, bd), ad.T @ g
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            ga, gb = _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("embedding id out of range")
    vocab_shape = weight.shape

    def backward(g):
        out = np.zeros(vocab_shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, vocab_shape[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), backward)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalInputError(f"{what} received non-finite input")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    _require_finite(x, "softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    _require_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis))

    def backward(g):
        return (np.expand_dims(g / n, axis) * xd,)

    return _make(n, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(-1, keepdims=True)) + eps
    out = xd / n

    def backward(g):
        return ((g - out * (g * out).sum(-1, keepdims=True)) / n,)

    return _make(out, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity along the last axis."""
    ad, bd = a.data, b.data
    _check_leading_broadcast(ad.shape, bd.shape)
    na = np.sqrt((ad * ad).sum(-1, keepdims=True)) + eps
    nb = np.sqrt((bd * bd).sum(-1, keepdims=True)) + eps
    dot = (ad * bd).sum(-1, keepdims=True)
    cos = dot / (na * nb)

    def backward(g):
        g = g[..., None]
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)

    return _make(cos[..., 0], (a, b), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], parameters: Iterable[Tensor],
               perturbation: float = 1e-6) -> float:
    """Max relative error between autodiff and central-difference gradients.

    The error for each entry is ``|autodiff - numeric| / max(1, |numeric|)``.
    ``fn`` must rebuild the graph on every call and return a scalar tensor.
    """
    if not 1e-7 <= perturbation <= 1e-3:
        raise ValueError("perturbation must lie in [1e-7, 1e-3]")
    params = list(parameters)
    first = fn().item()
    second = fn().item()
    if first != second:
        raise DeterminismError(f"two forward passes disagree: {first!r} != {second!r}")

    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + perturbation
                up = fn().item()
                flat[i] = orig - perturbation
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2.0 * perturbation)
                err = abs(aflat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **hyper)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimizerState) -> tuple[list[np.ndarray], OptimizerState]:
    """One AdamW update with decoupled weight decay; inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise PoisonedStepError("non-finite gradient; step refused")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p - state.lr * state.weight_decay * p - state.lr * update)
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                               weight_decay=state.weight_decay, step=step, m=new_m, v=new_v)
    return new_params, new_state


class AdamW:
    """In-place convenience wrapper around :func:`adamw_step` for leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 no_decay: Callable[[Tensor], bool] | None = None):
        self.params = list(params)
        self.state = OptimizerState.for_params([p.data for p in self.params], lr=lr,
                                               beta1=betas[0], beta2=betas[1], eps=eps,
                                               weight_decay=weight_decay)
        self._no_decay = no_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def step(self) -> None:
        grads = self.grads()
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise PoisonedStepError("non-finite gradient; step refused")
        if self._no_decay is None:
            new, self.state = adamw_step([p.data for p in self.params], grads, self.state)
        else:
            new = self._split_step(grads)
        for p, d in zip(self.params, new):
            p.data = d

    def _split_step(self, grads):
        # Bias/gain parameters skip weight decay; run them as a second group that
        # shares the step counter.
        decay_idx = [i for i, p in enumerate(self.params) if not self._no_decay(p)]
        plain_idx = [i for i, p in enumerate(self.params) if self._no_decay(p)]
        s = self.state
        out: list[np.ndarray | None] = [None] * len(self.params)
        new_state = None
        for idx, wd in ((decay_idx, s.weight_decay), (plain_idx, 0.0)):
            sub = OptimizerState(lr=s.lr, beta1=s.beta1, beta2=s.beta2, eps=s.eps,
                                 weight_decay=wd, step=s.step,
                                 m=[s.m[i] for i in idx], v=[s.v[i] for i in idx])
            ps, new_sub = adamw_step([self.params[i].data for i in idx],
                                     [grads[i] for i in idx], sub)
            for j, i in enumerate(idx):
                out[i] = ps[j]
                s.m[i] = new_sub.m[j]
                s.v[i] = new_sub.v[j]
            new_state = new_sub
        s.step = new_state.step
        return out


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))
