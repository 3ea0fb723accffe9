"""
Dense tensor engine with tape-based reverse-mode differentiation.

Every primitive records itself on the active ComputationTape when at least one
input requires a gradient. `backward` replays the tape in reverse exactly once
and then resets it. Storage is float32 by default; reductions accumulate in
float64. Gradient checks switch the engine to float64 with `precision()`.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engines.errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Number = Union[int, float]

_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Temporarily switch the storage dtype (float64 for gradient checks)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """
    Dense row-major array with an optional gradient.

    Args:
        data: Anything numpy can turn into an array
        requires_grad: Whether backward should produce a gradient for this tensor
        name: Optional label used in diagnostics and checkpoints
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._generation: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not a scalar", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", Number]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(value: Union[Tensor, np.ndarray, Sequence, Number]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# =============================================================================
# Tape
# =============================================================================

@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class ComputationTape:
    """Ordered record of the primitives run since the last reset."""
    nodes: List[TapeNode] = field(default_factory=list)
    generation: int = 0
    enabled: bool = True

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = ComputationTape()


def get_tape() -> ComputationTape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (evaluation passes)."""
    previous = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = previous


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray,
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    out = np.asarray(out, dtype=_DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    track = _TAPE.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        result._generation = _TAPE.generation
        _TAPE.record(TapeNode(op, tuple(inputs), result, backward_fn))
    return result


# =============================================================================
# Primitives
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product: (m, k) @ (k, n) -> (m, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", "expected (m,k) @ (k,n)", a.shape + b.shape)
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), av @ bv, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. `b` is either a's shape or a 1-D bias over a's last axis."""
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]:
        lead = tuple(range(a.data.ndim - 1))

        def backward(g):
            return g, g.sum(axis=lead)
    else:
        raise ShapeError("add", "operands must match or be (.., n) + (n,)", a.shape + b.shape)
    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", "operands must have equal shape", a.shape + b.shape)

    def backward(g):
        return g, -g

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", "operands must have equal shape", a.shape + b.shape)
    av, bv = a.data, b.data

    def backward(g):
        return g * bv, g * av

    return _emit("mul", (a, b), av * bv, backward)


def scale(a: Tensor, c: Number) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _emit("scale", (a,), a.data * c, backward)


def shift(a: Tensor, c: Number) -> Tensor:
    def backward(g):
        return (g,)

    return _emit("shift", (a,), a.data + float(c), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", (a,), np.where(mask, a.data, 0.0), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (a,), y, backward)


def log(a: Tensor) -> Tensor:
    av = a.data

    def backward(g):
        return (g / av,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", (a,), out, backward)


def clamp(a: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clip to [low, high]; gradient passes only strictly inside the interval."""
    av = a.data
    inside = np.ones(av.shape, dtype=bool)
    if low is not None:
        inside &= av > low
    if high is not None:
        inside &= av < high

    def backward(g):
        return (g * inside,)

    return _emit("clamp", (a,), np.clip(av, low, high), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError("reshape", f"cannot reshape {a.size} elements", a.shape + shape)
    original = a.shape

    def backward(g):
        return (g.reshape(original),)

    return _emit("reshape", (a,), a.data.reshape(shape), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("transpose", "axes must permute every dimension", a.shape + axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _emit("transpose", (a,), a.data.transpose(axes), backward)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over all elements or one axis, accumulated in float64."""
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError("reduce_mean", f"axis {axis} out of range", a.shape)
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, dtype=np.float64)
    original = a.shape

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, original).copy(),)

    return _emit("reduce_mean", (a,), out, backward)


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate on backward."""
    if a.data.ndim != 2:
        raise ShapeError("take_rows", "expected a 2-D tensor", a.shape)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError("take_rows", "row index out of range", (a.shape[0], int(index.max())))
    rows = a.shape

    def backward(g):
        grad = np.zeros(rows, dtype=g.dtype)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("take_rows", (a,), a.data[index], backward)


def mean_squared_error(a: Tensor, b: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean of (a-b)^2; `axis=1` gives one value per row of 2-D operands."""
    if a.shape != b.shape:
        raise ShapeError("mean_squared_error", "operands must have equal shape", a.shape + b.shape)
    if axis is not None and (a.data.ndim != 2 or axis != 1):
        raise ShapeError("mean_squared_error", "only axis=1 over 2-D operands is supported", a.shape)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    count = diff.size if axis is None else diff.shape[1]
    out = (diff * diff).mean(axis=axis)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None:
            g = g[:, None]
        ga = 2.0 * diff * g / count
        return ga, -ga

    return _emit("mean_squared_error", (a, b), out, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """
    Cross-entropy of softmax(logits) against integer labels.

    Args:
        logits: (N, K) tensor
        labels: N class ids in [0, K)
        reduction: "mean" for a scalar, "none" for one loss per row

    Returns:
        Scalar tensor or (N,) tensor
    """
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "logits must be (N, K)", logits.shape)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError("softmax_cross_entropy", "one label per row required", (n, labels.shape[0]))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("softmax_cross_entropy", "label outside [0, K)", (k, int(labels.max())))
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction '{reduction}'")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    probs = np.exp(logp)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        if reduction == "mean":
            return (grad * (g / n),)
        return (grad * g[:, None],)

    out = losses.mean() if reduction == "mean" else losses
    return _emit("softmax_cross_entropy", (logits,), out, backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of (N, C, H, W) input with (F, C, k, k) filters.

    Returns:
        (N, F, Ho, Wo) with Ho = (H + 2*padding - k) // stride + 1
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", "expected (N,C,H,W) input and (F,C,k,k) filters", x.shape + w.shape)
    n, c, h, width = x.shape
    f, _, k, _ = w.shape
    if h + 2 * padding < k or width + 2 * padding < k:
        raise ShapeError("conv2d", "kernel larger than padded input", (h, width, k))
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(f, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    padded_shape = padded.shape

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gpad = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, padding:padding + h, padding:padding + width]
        return gx, gw

    return _emit("conv2d", (x, w), out, backward)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "shift": shift,
    "relu": relu,
    "tanh": tanh,
    "log": log,
    "clamp": clamp,
    "softmax_cross_entropy": softmax_cross_entropy,
    "mean_squared_error": mean_squared_error,
    "reshape": reshape,
    "transpose": transpose,
    "reduce_mean": reduce_mean,
    "take_rows": take_rows,
    "conv2d": conv2d,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    if op not in PRIMITIVES:
        raise ValueError(f"unknown primitive '{op}'")
    return PRIMITIVES[op](*inputs, **kwargs)


# =============================================================================
# Reverse pass
# =============================================================================

def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Replays the tape in reverse and stores d(loss)/d(leaf) in each leaf's `.grad`.

    Args:
        loss: Scalar tensor produced on the current tape
        params: Tensors to report gradients for. A parameter the loss does not
            depend on receives an exact zero gradient.

    Returns:
        Gradients aligned with `params` (or with every leaf on the tape when None)
    """
    tape = _TAPE
    if not loss.requires_grad:
        raise TapeError("loss does not require grad; no parameter on the tape feeds it")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise TapeError("tape is empty; nothing to differentiate")
    if loss._generation != tape.generation:
        raise TapeError("tape already consumed; rerun the forward pass")

    produced = {id(node.output) for node in tape.nodes}
    leaves: Dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in leaves:
                leaves[id(t)] = t

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                tape.reset()
                raise NonFiniteError(f"{node.op} (backward)")
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads.get(key, np.zeros(leaf.shape)), dtype=leaf.data.dtype)
    tape.reset()

    targets = list(params) if params is not None else list(leaves.values())
    result = []
    for p in targets:
        if id(p) not in leaves:
            p.grad = np.zeros(p.shape, dtype=p.data.dtype)
        result.append(p.grad)
    return result


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar-valued `fn` with respect to `param`."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = fn().item()
            flat[i] = original - step
            minus = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


# =============================================================================
# Optimizer
# =============================================================================

@dataclass
class OptimizerState:
    """SGD hyperparameters plus one velocity buffer per parameter."""
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_norm: Optional[float] = None
    velocities: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.grad_norm is not None and self.grad_norm <= 0:
            raise ValueError(f"gradient norm must be > 0, got {self.grad_norm}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
             state: OptimizerState) -> Tuple[Sequence[Tensor], OptimizerState]:
    """
    Classical momentum with L2 weight decay folded into the gradient:
        v <- momentum * v + grad + wd * param
        param <- param - lr * v

    With `state.grad_norm` set, the gradients are first rescaled jointly to that
    global L2 norm (an all-zero gradient is left as is), so the step length no
    longer depends on the loss scale.
    """
    if len(params) != len(grads):
        raise ShapeError("sgd_step", "one gradient per parameter required", (len(params), len(grads)))
    if not state.velocities:
        state.velocities = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(state.velocities) != len(params):
        raise ShapeError("sgd_step", "velocity count differs from parameter count",
                         (len(state.velocities), len(params)))
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if state.grad_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if norm > 0:
            grads = [g * (state.grad_norm / norm) for g in grads]
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise ShapeError("sgd_step", f"shape mismatch for {p.name or 'parameter'}",
                             p.shape + np.shape(g) + v.shape)
        v *= state.momentum
        v += g + state.weight_decay * p.data
        updated = p.data - state.lr * v
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"sgd_step ({p.name or 'parameter'})")
        p.data[...] = updated
    return params, state


class SGD:
    """Owns a parameter list and its OptimizerState."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4, grad_norm: Optional[float] = None):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                    grad_norm=grad_norm)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        if value <= 0:
            raise ValueError(f"learning rate must be > 0, got {value}")
        self.state.lr = value

    def step(self, loss: Tensor) -> None:
        grads = backward(loss, self.params)
        sgd_step(self.params, grads, self.state)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], bound: float,
                 name: Optional[str] = None) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


def zeros_param(shape: Sequence[int], name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)
