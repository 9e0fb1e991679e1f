"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Deliberately small: only the operations the recurrent encoder, the softmax
heads, and the sequence losses need. A ``Tensor`` wraps a row-major float64
numpy array; operations record their inputs and a backward rule, and
``backward`` (or ``backward_multi`` for several roots) replays the tape in
reverse topological order, accumulating into ``.grad``. Graphs are rebuilt
from scratch on every call; nothing is cached across batches.

Custom operations elsewhere in the package (the LSTM layer, the CTC loss)
construct nodes directly via ``Tensor(data, parents, vjp)``.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class GradCheckError(RuntimeError):
    """The loss under test produced a non-finite value during checking."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Float64 array plus an optional backward rule.

    ``grad`` is ``None`` until backward reaches the node. Data is treated as
    immutable once wrapped; the only sanctioned in-place mutation is the
    optimizer's parameter update.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        if _grad_enabled and vjp is not None and any(p.tracked for p in parents):
            self._parents: tuple = tuple(parents)
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        """True when backward will propagate a gradient into this node."""
        return self._vjp is not None or isinstance(self, Parameter)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        backward_multi([(self, seed)])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """Named leaf tensor updated by the optimizer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, Iterable[Tensor]]] = []
    for root in roots:
        if id(root) in visited:
            continue
        visited.add(id(root))
        stack.append((root, iter(root._parents)))
        while stack:
            node, parents = stack[-1]
            pushed = False
            for p in parents:
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    pushed = True
                    break
            if not pushed:
                order.append(node)
                stack.pop()
    return order


def backward_multi(seeds: Sequence[tuple[Tensor, np.ndarray]]) -> None:
    """Backward pass seeded at several nodes at once.

    A node consumed by more than one seeded subgraph receives the sum of all
    incoming contributions before its own rule runs, so parameters shared by
    several losses accumulate the total gradient.
    """
    roots = []
    for node, g in seeds:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != node.shape:
            raise ShapeError(f"seed gradient {g.shape} for node of shape {node.shape}")
        node.grad = g.copy() if node.grad is None else node.grad + g
        roots.append(node)
    for node in reversed(_topo_order(roots)):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.tracked:
                continue
            if g.shape != parent.shape:
                raise ShapeError(
                    f"backward rule produced {g.shape} for parent of shape {parent.shape}"
                )
            # vjp outputs may alias shared buffers; never mutate them in place.
            parent.grad = g.copy() if parent.grad is None else parent.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} with {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a trailing 1-D operand broadcasts as a bias row."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:

        def vjp(g):
            return g, g

        return Tensor(a.data + b.data, (a, b), vjp)
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))

        def vjp(g):
            return g, g.sum(axis=axes)

        return Tensor(a.data + b.data, (a, b), vjp)
    raise ShapeError(f"add of {a.shape} with {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul of {a.shape} with {b.shape}")

    def vjp(g):
        return g * b.data, g * a.data

    return Tensor(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return Tensor(a.data * c, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_np(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat of {a.shape} with {b.shape}")
    k = a.shape[-1]

    def vjp(g):
        return g[..., :k], g[..., k:]

    return Tensor(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


def dropout_apply(x: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted dropout with a precomputed binary mask (mask is not a graph input)."""
    x = _wrap(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout mask {mask.shape} for input {x.shape}")
    scaled = mask / keep_prob

    def vjp(g):
        return (g * scaled,)

    return Tensor(x.data * scaled, (x,), vjp)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log softmax of a 2-D tensor; rows exp-sum to one within 1e-12."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects 2-D input, got {a.shape}")
    out = _log_softmax_np(a.data)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return Tensor(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).astype(np.float64),)

    return Tensor(a.data.sum(), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).astype(np.float64),)

    return Tensor(a.data.mean(), (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # both branches are evaluated on the full array (np.where), so the stray
    # exp overflow in the branch that is thrown away must be silenced
    with np.errstate(over="ignore"):
        ex = np.exp(x)
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), ex / (1.0 + ex))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` must rebuild its graph on every call and depend on ``params`` only.
    Error per coordinate is |analytic - numeric| / max(1, |analytic|); the
    maximum over all coordinates of all parameters is returned.
    """
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.item()):
        raise GradCheckError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = f().item()
            flat[i] = saved - h
            down = f().item()
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite loss while perturbing {getattr(p, 'name', '?')}")
            numeric = (up - down) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst


# Parameter container format, version 1. All integers little-endian.
#   magic   4 bytes  b"TNS1"
#   version u32
#   count   u32
# then per record:
#   name_len u16, name utf-8,
#   ndim     u8,  dims u32 * ndim,
#   data     float64 little-endian, row-major
_MAGIC = b"TNS1"
_VERSION = 1


def save_parameters(path, params: Sequence[Parameter]) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in container")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for p in params:
            encoded = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_parameters(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad container magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported container version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            if name in out:
                raise ValueError(f"duplicate parameter record {name!r}")
            out[name] = np.asarray(data, dtype=np.float64).copy()
        return out


def assign_parameters(params: Sequence[Parameter], loaded: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in loaded:
            raise KeyError(f"container is missing parameter {p.name!r}")
        value = loaded[p.name]
        if value.shape != p.data.shape:
            raise ShapeError(f"{p.name}: container shape {value.shape}, expected {p.data.shape}")
        p.data = np.asarray(value, dtype=np.float64).copy()
