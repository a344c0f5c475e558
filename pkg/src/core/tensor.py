"""
Tensor engine
Dense floating-point tensors with a define-by-run reverse-mode tape.

Usage pattern::

    with Tape() as tape:
        x = Tensor(values, requires_grad=True)
        loss = (x * x).sum()
    grads = backward(tape, loss)
    grads[x]   # same shape as x

Operations evaluated while no tape is active compute values only.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ShapeError
from .rng import GRAD_CHECK, make_rng

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8
GELU_COEFF = 0.044715
GELU_SCALE = float(np.sqrt(2.0 / np.pi))

# Tape and precision stacks are per thread.
_state = threading.local()


def _dtype_stack() -> List[np.dtype]:
    if not hasattr(_state, "dtypes"):
        _state.dtypes = [np.dtype(np.float32)]
    return _state.dtypes


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


ArrayLike = Union[np.ndarray, float, int, Sequence]


def current_dtype() -> np.dtype:
    return _dtype_stack()[-1]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors in `dtype` inside the block (float32 otherwise)."""
    _dtype_stack().append(np.dtype(dtype))
    try:
        yield
    finally:
        _dtype_stack().pop()


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A value plus the gradient bookkeeping flag."""

    __slots__ = ("data", "requires_grad")

    # ndarray operators defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=current_dtype())
        self.requires_grad = bool(requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no gradient path back to `x`."""
    return Tensor(as_tensor(x).data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    """One recorded primitive. Leaves have no forward/backward functions."""

    op: str
    parents: Tuple[int, ...]
    value: Tensor
    forward: Optional[Callable[..., np.ndarray]] = None
    backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def is_leaf(self) -> bool:
        return self.forward is None


@dataclass(eq=False)
class Tape:
    """Ordered record of primitives; parents always precede their children."""

    nodes: List[Node] = field(default_factory=list)
    finalized: bool = False
    _index: Dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        if self.finalized:
            raise RuntimeError("tape already finalized; create a new Tape per pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().remove(self)
        self.finalized = True

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, tensor: Tensor) -> Optional[int]:
        return self._index.get(id(tensor))

    def _intern(self, tensor: Tensor) -> int:
        idx = self._index.get(id(tensor))
        if idx is None:
            op = "leaf" if tensor.requires_grad else "const"
            idx = self._append(Node(op=op, parents=(), value=tensor))
        return idx

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        self._index[id(node.value)] = idx
        return idx

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               forward: Callable[..., np.ndarray],
               backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> None:
        parents = tuple(self._intern(t) for t in inputs)
        self._append(Node(op=op, parents=parents, value=output, forward=forward, backward=backward))

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from the recorded leaves and constants."""
        values: List[np.ndarray] = []
        for node in self.nodes:
            if node.is_leaf:
                values.append(node.value.data)
            else:
                out = node.forward(*(values[p] for p in node.parents))
                values.append(np.asarray(out, dtype=node.value.data.dtype))
        return values


class GradientMap:
    """Gradients keyed by leaf tensor identity."""

    def __init__(self, entries: Dict[int, Tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._entries[id(tensor)][1]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def get(self, tensor: Tensor, default=None):
        entry = self._entries.get(id(tensor))
        return default if entry is None else entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        return iter(self._entries.values())


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse sweep seeded with 1.0 at `loss`; one entry per gradient leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.finalized:
        raise RuntimeError("backward requires a finalized tape (leave the `with Tape()` block first)")
    start = tape.index_of(loss)

    leaf_grads: Dict[int, np.ndarray] = {}
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf":
            leaf_grads[i] = np.zeros_like(node.value.data)

    if start is not None:
        pending: Dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
        for i in range(start, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            node = tape.nodes[i]
            if node.is_leaf:
                if node.op == "leaf":
                    leaf_grads[i] = leaf_grads[i] + g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not tape.nodes[parent].value.requires_grad:
                    continue
                pending[parent] = pending[parent] + pg if parent in pending else pg

    entries = {id(tape.nodes[i].value): (tape.nodes[i].value, g) for i, g in leaf_grads.items()}
    return GradientMap(entries)


def _emit(op: str, inputs: Sequence[Tensor], forward: Callable[..., np.ndarray],
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    out = Tensor(forward(*(t.data for t in inputs)),
                 requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, forward, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), np.add,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), np.subtract,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", (a, b), np.multiply,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("div", (a, b), np.divide,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), np.negative, lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _emit("pow", (a,), lambda x: np.power(x, p),
                 lambda g: (g * p * np.power(a.data, p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_ref: List[np.ndarray] = []

    def forward(x):
        y = np.exp(x)
        out_ref[:] = [y]
        return y

    return _emit("exp", (a,), forward, lambda g: (g * out_ref[0],))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", (a,), np.log, lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sqrt", (a,), np.sqrt, lambda g: (g * 0.5 / np.sqrt(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _emit("tanh", (a,), np.tanh, lambda g: (g * (1.0 - np.tanh(a.data) ** 2),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    a = as_tensor(a)

    def forward(x):
        return 0.5 * x * (1.0 + np.tanh(GELU_SCALE * (x + GELU_COEFF * x ** 3)))

    def backward_fn(g):
        x = a.data
        t = np.tanh(GELU_SCALE * (x + GELU_COEFF * x ** 3))
        dt = (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit("gelu", (a,), forward, backward_fn)


def clip(a, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient flows where low <= a <= high."""
    a = as_tensor(a)
    return _emit("clip", (a,), lambda x: np.clip(x, low, high),
                 lambda g: (g * ((a.data >= low) & (a.data <= high)),))


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", (a,), lambda x: np.reshape(x, shape),
                 lambda g: (np.reshape(g, a.shape),))


def transpose(a, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), lambda x: np.transpose(x, axes),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def forward(*xs):
        return np.concatenate(xs, axis=axis)

    return _emit("concat", tensors, forward,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("getitem", (a,), lambda x: x[index], backward_fn)


# ---------------------------------------------------------------------------
# Reductions and linear algebra
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _emit("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return _emit("mean", (a,), lambda x: np.mean(x, axis=axis, keepdims=keepdims),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), np.matmul, backward_fn)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum."""
    x = as_tensor(x)
    out_ref: List[np.ndarray] = []

    def forward(v):
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        out_ref[:] = [y]
        return y

    def backward_fn(g):
        y = out_ref[0]
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", (x,), forward, backward_fn)


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (denominator n), then gain·x̂ + bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {n}")
    cache: Dict[str, np.ndarray] = {}

    def forward(v, w, c):
        mu = v.mean(axis=-1, keepdims=True)
        centered = v - mu
        inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        xhat = centered * inv
        cache["xhat"], cache["inv"] = xhat, inv
        return xhat * w + c

    def backward_fn(g):
        xhat, inv = cache["xhat"], cache["inv"]
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit("layer_norm", (x, gain, bias), forward, backward_fn)


def cosine_similarity(u, v) -> Tensor:
    """u·v / (‖u‖‖v‖ + 1e-8) along the last axis; both-zero inputs give 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1:] != v.shape[-1:]:
        raise ShapeError(f"cosine_similarity width mismatch: {u.shape} vs {v.shape}")

    def forward(a, b):
        dot = (a * b).sum(axis=-1)
        return dot / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + COSINE_EPS)

    def backward_fn(g):
        a, b = u.data, v.data
        dot = (a * b).sum(axis=-1, keepdims=True)
        na = np.linalg.norm(a, axis=-1, keepdims=True)
        nb = np.linalg.norm(b, axis=-1, keepdims=True)
        denom = na * nb + COSINE_EPS
        unit_a = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
        unit_b = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
        ge = np.expand_dims(g, -1)
        ga = ge * (b / denom - dot * nb * unit_a / (denom * denom))
        gb = ge * (a / denom - dot * na * unit_b / (denom * denom))
        return _unbroadcast(ga, u.shape), _unbroadcast(gb, v.shape)

    return _emit("cosine_similarity", (u, v), forward, backward_fn)


def cross_entropy_logits(logits, labels) -> Tensor:
    """−log softmax(logits)[label]; a (B,K) batch returns the mean over rows."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ShapeError(f"label out of range for {k} classes: {labels.tolist()}")
    single = logits.ndim == 1
    rows = logits.data.reshape(-1, k).shape[0]
    if labels.shape[0] != rows:
        raise ShapeError(f"{labels.shape[0]} labels for {rows} logit rows")
    picks = np.arange(rows)

    def forward(z):
        z2 = z.reshape(-1, k)
        shifted = z2 - z2.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1))
        losses = log_norm - shifted[picks, labels]
        return np.asarray(losses[0] if single else losses.mean())

    def backward_fn(g):
        z2 = logits.data.reshape(-1, k)
        e = np.exp(z2 - z2.max(axis=-1, keepdims=True))
        probs = e / e.sum(axis=-1, keepdims=True)
        probs[picks, labels] -= 1.0
        return ((g * probs / rows).reshape(logits.shape),)

    return _emit("cross_entropy", (logits,), forward, backward_fn)


# ---------------------------------------------------------------------------
# Verification and optimization
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], leaves: Iterable[Tensor], fd_step: float = 1e-3,
               samples: int = 100, seed: int = 0, dtype=np.float64) -> float:
    """
    Compare the tape gradient of scalar `f(*leaves)` against central differences.

    Leaves with requires_grad=False are excluded. Returns the maximum over
    sampled coordinates of |analytic − central| / max(|analytic|, |central|, 1e-6).
    """
    rng = make_rng(seed, GRAD_CHECK)
    with precision(dtype):
        xs = [Tensor(np.array(leaf.data, dtype=dtype), requires_grad=leaf.requires_grad) for leaf in leaves]
        with Tape() as tape:
            loss = f(*xs)
        grads = backward(tape, loss)

        worst = 0.0
        for x in xs:
            if not x.requires_grad:
                continue
            analytic = grads[x]
            flat = x.data.reshape(-1)
            coords = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            for c in coords:
                original = flat[c]
                flat[c] = original + fd_step
                f_plus = float(f(*xs).data)
                flat[c] = original - fd_step
                f_minus = float(f(*xs).data)
                flat[c] = original
                central = (f_plus - f_minus) / (2.0 * fd_step)
                a = float(analytic.reshape(-1)[c])
                err = abs(a - central) / max(abs(a), abs(central), 1e-6)
                worst = max(worst, err)
    logger.debug(f"grad_check max relative error {worst:.3e}")
    return worst


@dataclass
class AdamState:
    """Adam moments per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: GradientMap, state: AdamState) -> Dict[str, Tensor]:
    """One bias-corrected Adam update; returns fresh parameter tensors."""
    gradients: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        gradients[name] = g

    state.step += 1
    t = state.step
    updated: Dict[str, Tensor] = {}
    for name, p in params.items():
        g = gradients[name]
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[name] = Tensor(new.astype(p.data.dtype), requires_grad=p.requires_grad)
    return updated
