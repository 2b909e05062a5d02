"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a 2-D (occasionally higher-D) row-major float64 array. There
is no implicit broadcasting: elementwise ops require identical shapes, and
the only mixed form allowed is tensor-with-python-scalar. Column-broadcast
patterns are spelled out as named ops (`add_col`, `tile_col`).

Graph recording is a distributed tape: each op output remembers its parent
tensors and a closure that routes the output gradient to them. `tape_id` is
a global creation counter, so descending id order is a valid topological
order for replay. Tape construction is single-threaded per forward/backward
pass; tensors without tape attachments are immutable values and safe to
share across threads.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    NumericalError,
    ShapeError,
)

_ids = itertools.count()
_grad_enabled = True

# sigmoid outputs are clamped into this open interval so gates and halting
# probabilities are strictly inside (0, 1) even for extreme logits
_SIG_LO = 1e-300
_SIG_HI = 1.0 - 1e-16


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional slot in the reverse-mode tape."""

    __slots__ = ("data", "grad", "tape_id", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape_id = next(_ids)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are treated as untracked constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[Tensor], None] | None,
) -> Tensor:
    """Wrap an op result; record parents only when a gradient can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_id = next(_ids)
    out._parents = ()
    out._backward = None
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked and backward is not None:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _as_pair(a, b, op: str) -> tuple[Tensor, Tensor | float]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b, "add")
    if isinstance(a, Tensor) and isinstance(b, Tensor):

        def bw(out: Tensor) -> None:
            _acc(a, out.grad)
            _acc(b, out.grad)

        return _make(a.data + b.data, (a, b), bw)
    t, s = (a, b) if isinstance(a, Tensor) else (b, a)

    def bw_s(out: Tensor) -> None:
        _acc(t, out.grad)

    return _make(t.data + float(s), (t,), bw_s)


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b, "sub")
    if isinstance(a, Tensor) and isinstance(b, Tensor):

        def bw(out: Tensor) -> None:
            _acc(a, out.grad)
            _acc(b, -out.grad)

        return _make(a.data - b.data, (a, b), bw)
    if isinstance(a, Tensor):

        def bw_l(out: Tensor) -> None:
            _acc(a, out.grad)

        return _make(a.data - float(b), (a,), bw_l)

    def bw_r(out: Tensor) -> None:
        _acc(b, -out.grad)

    return _make(float(a) - b.data, (b,), bw_r)


def mul(a, b) -> Tensor:
    """Hadamard product, or scaling by a python float."""
    a, b = _as_pair(a, b, "mul")
    if isinstance(a, Tensor) and isinstance(b, Tensor):

        def bw(out: Tensor) -> None:
            _acc(a, out.grad * b.data)
            _acc(b, out.grad * a.data)

        return _make(a.data * b.data, (a, b), bw)
    t, s = (a, b) if isinstance(a, Tensor) else (b, a)
    sv = float(s)

    def bw_s(out: Tensor) -> None:
        _acc(t, out.grad * sv)

    return _make(t.data * sv, (t,), bw_s)


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")

    def bw(out: Tensor) -> None:
        _acc(a, out.grad @ b.data.T)
        _acc(b, a.data.T @ out.grad)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {a.shape}")

    def bw(out: Tensor) -> None:
        _acc(a, out.grad.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat: empty part list")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out: Tensor) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, out.grad[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def col(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as a column vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"col: needs a 2-D tensor, got {a.shape}")

    def bw(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[:, j : j + 1] = out.grad
        _acc(a, g)

    return _make(a.data[:, j : j + 1].copy(), (a,), bw)


def row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor as a (1, cols) tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"row: needs a 2-D tensor, got {a.shape}")

    def bw(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[i : i + 1, :] = out.grad
        _acc(a, g)

    return _make(a.data[i : i + 1, :].copy(), (a,), bw)


def add_col(mat: Tensor, column: Tensor) -> Tensor:
    """Add a (d, 1) column vector to every column of a (d, n) matrix."""
    if mat.shape[0] != column.shape[0] or column.shape[1] != 1:
        raise ShapeError(f"add_col: got {mat.shape} and {column.shape}")

    def bw(out: Tensor) -> None:
        _acc(mat, out.grad)
        _acc(column, out.grad.sum(axis=1, keepdims=True))

    return _make(mat.data + column.data, (mat, column), bw)


def tile_col(column: Tensor, n: int) -> Tensor:
    """Repeat a (d, 1) column vector into a (d, n) matrix."""
    if column.data.ndim != 2 or column.shape[1] != 1:
        raise ShapeError(f"tile_col: needs a column vector, got {column.shape}")

    def bw(out: Tensor) -> None:
        _acc(column, out.grad.sum(axis=1, keepdims=True))

    return _make(np.repeat(column.data, n, axis=1), (column,), bw)


def _reduce(a: Tensor, axis: int | None, mean: bool) -> Tensor:
    if axis is None:
        n = a.data.size
        val = a.data.sum()
        if mean:
            val /= n

        def bw_all(out: Tensor) -> None:
            g = float(out.grad.reshape(-1)[0])
            if mean:
                g /= n
            _acc(a, np.full_like(a.data, g))

        return _make(np.array([[val]]), (a,), bw_all)
    n = a.data.shape[axis]
    val = a.data.sum(axis=axis, keepdims=True)
    if mean:
        val = val / n

    def bw_ax(out: Tensor) -> None:
        g = np.repeat(out.grad, n, axis=axis)
        if mean:
            g = g / n
        _acc(a, g)

    return _make(val, (a,), bw_ax)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along `axis`; outputs are positive and sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out: Tensor) -> None:
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(a, y * (g - dot))

    return _make(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, _SIG_LO, _SIG_HI, out=y)

    def bw(out: Tensor) -> None:
        _acc(a, out.grad * y * (1.0 - y))

    return _make(y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(out: Tensor) -> None:
        _acc(a, out.grad * (1.0 - y * y))

    return _make(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise NumericalError("exp overflowed; rescale the input")

    def bw(out: Tensor) -> None:
        _acc(a, out.grad * y)

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericalError("log of a non-positive value")
    y = np.log(a.data)

    def bw(out: Tensor) -> None:
        _acc(a, out.grad / a.data)

    return _make(y, (a,), bw)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over all elements, computed with max shifting."""
    m = a.data.max()
    e = np.exp(a.data - m)
    s = e.sum()
    val = m + math.log(s)
    w = e / s

    def bw(out: Tensor) -> None:
        _acc(a, float(out.grad.reshape(-1)[0]) * w)

    return _make(np.array([[val]]), (a,), bw)


def _col_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=0, keepdims=True))


def cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """1 - cos(u, v) for two column vectors, in [0, 2]."""
    if u.shape != v.shape or u.shape[1] != 1:
        raise ShapeError(f"cosine_distance: needs matching column vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu <= 1e-12 or nv <= 1e-12:
        raise DegenerateInputError("cosine_distance: zero-norm input")
    uh = u.data / nu
    vh = v.data / nv
    c = float((uh * vh).sum())
    val = min(max(1.0 - c, 0.0), 2.0)

    def bw(out: Tensor) -> None:
        g = float(out.grad.reshape(-1)[0])
        _acc(u, -g * (vh - c * uh) / nu)
        _acc(v, -g * (uh - c * vh) / nv)

    return _make(np.array([[val]]), (u, v), bw)


def cosine_cost(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine distances between columns of a (d, n) and b (d, m)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cosine_cost: got {a.shape} and {b.shape}")
    na = _col_norms(a.data)
    nb = _col_norms(b.data)
    if na.min() <= 1e-12 or nb.min() <= 1e-12:
        raise DegenerateInputError("cosine_cost: zero-norm column")
    ua = a.data / na
    ub = b.data / nb
    sims = ua.T @ ub
    cost = np.clip(1.0 - sims, 0.0, 2.0)

    def bw(out: Tensor) -> None:
        g = out.grad
        _acc(a, -(ub @ g.T - ua * (g * sims).sum(axis=1)) / na)
        _acc(b, -(ua @ g - ub * (g * sims).sum(axis=0)) / nb)

    return _make(cost, (a, b), bw)


def gw_pair_cost(intra_a: Tensor, intra_b: Tensor, plan: np.ndarray) -> Tensor:
    """Structure-mismatch term sum_{iji'j'} T_ij T_i'j' |A_ii' - B_jj'|.

    `plan` is a fixed coupling (envelope convention): gradient flows into the
    two intra-graph cost matrices only.
    """
    n, m = plan.shape
    if intra_a.shape != (n, n) or intra_b.shape != (m, m):
        raise ShapeError(
            f"gw_pair_cost: plan {plan.shape} needs ({n},{n}) and ({m},{m}) costs, "
            f"got {intra_a.shape} and {intra_b.shape}"
        )
    diff = intra_a.data[:, None, :, None] - intra_b.data[None, :, None, :]
    val = float(np.einsum("ijkl,ij,kl->", np.abs(diff), plan, plan))

    def bw(out: Tensor) -> None:
        g = float(out.grad.reshape(-1)[0])
        sgn = np.sign(diff)
        _acc(intra_a, g * np.einsum("ijkl,ij,kl->ik", sgn, plan, plan))
        _acc(intra_b, -g * np.einsum("ijkl,ij,kl->jl", sgn, plan, plan))

    return _make(np.array([[val]]), (intra_a, intra_b), bw)


class ParamStore:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def add_linear(self, name: str, out_dim: int, in_dim: int, rng: np.random.Generator,
                   bias: bool = True) -> None:
        """Affine weights drawn uniformly from +-1/sqrt(fan_in)."""
        bound = 1.0 / math.sqrt(in_dim)
        self.add(f"{name}.w", rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        if bias:
            self.add(f"{name}.b", rng.uniform(-bound, bound, size=(out_dim, 1)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def n_coords(self) -> int:
        return sum(t.data.size for _, t in self.items())


def backward(loss: Tensor, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into `.grad` (call `params.zero_grad()` to reset
    between accumulation windows). Parameters not reachable from the loss
    get a zero gradient. Returns a name -> gradient view map when `params`
    is given.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    # collect the reachable subgraph; creation order is a topological order
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    loss.grad = np.ones_like(loss.data)
    for t in sorted(nodes, key=lambda t: t.tape_id, reverse=True):
        if t._backward is not None and t.grad is not None:
            t._backward()
    if params is None:
        return {}
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[name] = p.grad
    return out


class GradCheckReport:
    """Worst-coordinate comparison of analytic and central-difference grads."""

    def __init__(self) -> None:
        self.max_abs_err = 0.0
        self.max_rel_err = 0.0
        self.worst_param = ""
        self.worst_index = -1
        self.n_checked = 0

    def record(self, name: str, idx: int, analytic: float, numeric: float,
               rel_floor: float) -> None:
        self.n_checked += 1
        abs_err = abs(analytic - numeric)
        rel_err = abs_err / max(abs(analytic), abs(numeric), rel_floor)
        if abs_err > self.max_abs_err:
            self.max_abs_err = abs_err
        if rel_err > self.max_rel_err:
            self.max_rel_err = rel_err
            self.worst_param = name
            self.worst_index = idx

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"GradCheckReport(max_abs={self.max_abs_err:.3e}, "
            f"max_rel={self.max_rel_err:.3e}, worst={self.worst_param}[{self.worst_index}], "
            f"checked={self.n_checked})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    rel_floor: float = 1e-6,
    coords: Iterable[tuple[str, int]] | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of a deterministic scalar `f()` against
    central finite differences, coordinate by coordinate.

    `coords` restricts the sweep to selected (param name, flat index) pairs;
    by default every coordinate of every parameter is perturbed. `rel_floor`
    keeps the relative error meaningful when both gradients are near zero.
    """
    params.zero_grad()
    loss = f()
    analytic = {n: g.copy() for n, g in backward(loss, params).items()}
    if coords is None:
        coords = [(n, i) for n, p in params.items() for i in range(p.data.size)]
    report = GradCheckReport()
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up = f().item()
        flat[idx] = orig - step
        down = f().item()
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        report.record(name, idx, float(analytic[name].reshape(-1)[idx]), numeric, rel_floor)
    return report
