"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes eagerly in numpy. When an operand is attached to a
:class:`Graph`, the application is recorded so that :func:`backward` can later
push adjoints from a scalar output to any watched tensor (inputs, parameters,
or interior values such as attention matrices).

Broadcasting is deliberately restricted: scalar-times-tensor (``scale``) and
row-vector bias/gain (``add_rowvec`` / ``mul_rowvec``) are the only implicit
expansions. Everything else requires explicit ``reshape``; this keeps each
backward rule short enough to audit by hand.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "ShapeMismatchError",
    "GraphStateError",
    "DomainError",
    "ZeroNormError",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "add_rowvec",
    "mul_rowvec",
    "transpose",
    "reshape",
    "concat_rows",
    "slice_rows",
    "stack",
    "prepend_row",
    "add_mat",
    "normalize_rows",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "mean_axis",
    "sum_axis",
    "clamp_min0",
    "log",
    "exp",
    "cosine_similarity",
    "backward",
    "finite_difference_grad",
]

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, shape_a, shape_b=None, detail: str = ""):
        msg = f"{op}: incompatible shape {tuple(shape_a)}"
        if shape_b is not None:
            msg = f"{op}: incompatible shapes {tuple(shape_a)} vs {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None


class GraphStateError(RuntimeError):
    """Raised on invalid graph usage (reuse after backward, foreign output...)."""


class DomainError(ValueError):
    """Raised when an input leaves the domain a primitive is defined on."""


class ZeroNormError(ValueError):
    """Raised when a cosine similarity is requested for a zero-norm vector."""


class Tensor:
    """A dense float64 array, optionally recorded on a :class:`Graph`.

    Tensors without a graph are immutable constants and safe to share.
    """

    __slots__ = ("data", "graph", "op", "inputs", "aux", "watched", "grad", "_idx")

    def __init__(self, data, graph=None, op=None, inputs=(), aux=None):
        arr = np.asarray(data, dtype=np.float64)
        if graph is None and op is None:
            # user-provided constant: private copy, frozen
            arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.aux = aux
        self.watched = False
        self.grad = None
        self._idx = -1
        if graph is not None:
            graph._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def watch(self) -> "Tensor":
        """Retain this tensor's adjoint during backward."""
        self.watched = True
        return self

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        kind = self.op or ("leaf" if self.graph is not None else "const")
        return f"Tensor(shape={self.shape}, {kind})"


class Graph:
    """Recording tape for one forward evaluation.

    Nodes are stored in application order, which is a topological order by
    construction. A graph supports exactly one backward pass; recording onto
    a consumed graph is an error.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def _record(self, t: Tensor):
        if self.consumed:
            raise GraphStateError("graph already consumed by backward; re-record the forward pass")
        t._idx = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, data) -> Tensor:
        """Register a watched differentiation target holding a copy of `data`."""
        t = Tensor(np.array(data, dtype=np.float64), graph=self, op=None)
        t.watched = True
        return t


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _graph_of(*ts) -> Graph | None:
    g = None
    for t in ts:
        if isinstance(t, Tensor) and t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphStateError("operands recorded on different graphs")
    return g


def _make(op: str, out: np.ndarray, inputs, aux=None) -> Tensor:
    # inputs keep their positions (None for raw-array operands) so backward
    # can pair each vjp output with the right operand
    g = _graph_of(*inputs)
    kept = tuple(i if isinstance(i, Tensor) else None for i in inputs)
    return Tensor(out, graph=g, op=op, inputs=kept, aux=aux)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product: 2D@2D, batched 3D@3D, or 3D@2D (shared right factor)."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim == 2 and bv.ndim == 2:
        ok = av.shape[1] == bv.shape[0]
    elif av.ndim == 3 and bv.ndim == 3:
        ok = av.shape[0] == bv.shape[0] and av.shape[2] == bv.shape[1]
    elif av.ndim == 3 and bv.ndim == 2:
        ok = av.shape[2] == bv.shape[0]
    else:
        ok = False
    if not ok:
        raise ShapeMismatchError("matmul", av.shape, bv.shape)
    if av.ndim == 3 and bv.ndim == 2 and av.flags.c_contiguous:
        # stacked rows reduce to one 2D product
        n, s, k = av.shape
        out = (av.reshape(n * s, k) @ bv).reshape(n, s, bv.shape[1])
    else:
        out = av @ bv
    return _make("matmul", out, (a, b), aux=(av, bv))


def _vjp_matmul(node, g, needs):
    av, bv = node.aux
    ga = gb = None
    if av.ndim == 2 and bv.ndim == 2:
        if needs[0]:
            ga = g @ bv.T
        if needs[1]:
            gb = av.T @ g
    elif av.ndim == 3 and bv.ndim == 3:
        if needs[0]:
            ga = g @ bv.transpose(0, 2, 1)
        if needs[1]:
            gb = av.transpose(0, 2, 1) @ g
    else:  # 3D @ 2D: batch and row axes concatenate
        n, s, k = av.shape
        g2 = np.ascontiguousarray(g).reshape(n * s, -1)
        if needs[0]:
            ga = (g2 @ bv.T).reshape(av.shape)
        if needs[1]:
            gb = np.ascontiguousarray(av).reshape(n * s, k).T @ g2
    return (ga, gb)


def _same_shape(op, a, b):
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeMismatchError(op, av.shape, bv.shape)
    return av, bv


def add(a, b) -> Tensor:
    av, bv = _same_shape("add", a, b)
    return _make("add", av + bv, (a, b))


def sub(a, b) -> Tensor:
    av, bv = _same_shape("sub", a, b)
    return _make("sub", av - bv, (a, b))


def hadamard(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    av, bv = _same_shape("hadamard", a, b)
    return _make("hadamard", av * bv, (a, b), aux=(av, bv))


def scale(a, c: float) -> Tensor:
    """Scalar multiple `c * a` (the one allowed scalar broadcast)."""
    av = _as_array(a)
    c = float(c)
    return _make("scale", av * c, (a,), aux=c)


def add_rowvec(a, v) -> Tensor:
    """Add a length-n vector to every row of `a` (last axis, row-wise bias)."""
    av, vv = _as_array(a), _as_array(v)
    if vv.ndim != 1 or av.ndim < 1 or av.shape[-1] != vv.shape[0]:
        raise ShapeMismatchError("add_rowvec", av.shape, vv.shape)
    return _make("add_rowvec", av + vv, (a, v))


def mul_rowvec(a, v) -> Tensor:
    """Multiply every row of `a` by a length-n vector (row-wise gain)."""
    av, vv = _as_array(a), _as_array(v)
    if vv.ndim != 1 or av.ndim < 1 or av.shape[-1] != vv.shape[0]:
        raise ShapeMismatchError("mul_rowvec", av.shape, vv.shape)
    return _make("mul_rowvec", av * vv, (a, v), aux=(av, vv))


def transpose(a, axes=None) -> Tensor:
    av = _as_array(a)
    if axes is None:
        axes = tuple(range(av.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(av.ndim)):
        raise ShapeMismatchError("transpose", av.shape, detail=f"invalid axes {axes}")
    return _make("transpose", av.transpose(axes), (a,), aux=axes)


def reshape(a, shape) -> Tensor:
    av = _as_array(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != av.size:
        raise ShapeMismatchError("reshape", av.shape, shape, detail="element count differs")
    return _make("reshape", av.reshape(shape), (a,), aux=av.shape)


def concat_rows(a, b) -> Tensor:
    """Stack two 2D blocks vertically (same column count)."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeMismatchError("concat_rows", av.shape, bv.shape)
    return _make("concat_rows", np.concatenate([av, bv], axis=0), (a, b), aux=av.shape[0])


def slice_rows(a, start: int, stop: int) -> Tensor:
    av = _as_array(a)
    if av.ndim < 1 or not (0 <= start < stop <= av.shape[0]):
        raise ShapeMismatchError("slice_rows", av.shape, detail=f"rows [{start}:{stop}]")
    return _make("slice_rows", av[start:stop].copy(), (a,), aux=(start, stop, av.shape))


def stack(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("stack", (), detail="empty input list")
    arrs = [_as_array(t) for t in tensors]
    s0 = arrs[0].shape
    for arr in arrs[1:]:
        if arr.shape != s0:
            raise ShapeMismatchError("stack", s0, arr.shape)
    out = np.stack(arrs, axis=0)
    return _make("stack", out, tensors)


def prepend_row(a, v) -> Tensor:
    """Prepend a shared length-d row to every (s, d) slice of a rank-3 stack."""
    av, vv = _as_array(a), _as_array(v)
    if av.ndim != 3 or vv.ndim != 1 or av.shape[2] != vv.shape[0]:
        raise ShapeMismatchError("prepend_row", av.shape, vv.shape)
    n, s, d = av.shape
    out = np.empty((n, s + 1, d))
    out[:, 0, :] = vv
    out[:, 1:, :] = av
    return _make("prepend_row", out, (a, v))


def _vjp_prepend_row(node, g, needs):
    ga = g[:, 1:, :] if needs[0] else None
    gv = g[:, 0, :].sum(axis=0) if needs[1] else None
    return (ga, gv)


def add_mat(a, m) -> Tensor:
    """Add a shared (s, d) matrix to every slice of a rank-3 stack."""
    av, mv = _as_array(a), _as_array(m)
    if av.ndim != 3 or mv.ndim != 2 or av.shape[1:] != mv.shape:
        raise ShapeMismatchError("add_mat", av.shape, mv.shape)
    return _make("add_mat", av + mv, (a, m))


def _vjp_add_mat(node, g, needs):
    return (g, g.sum(axis=0) if needs[1] else None)


def normalize_rows(a) -> Tensor:
    """Scale each row of a 2D array to unit Euclidean norm."""
    av = _as_array(a)
    if av.ndim != 2:
        raise ShapeMismatchError("normalize_rows", av.shape)
    norms = np.linalg.norm(av, axis=1, keepdims=True)
    if norms.min() == 0.0:
        raise ZeroNormError("normalize_rows: zero-norm row")
    out = av / norms
    return _make("normalize_rows", out, (a,), aux=(out, norms))


def _vjp_normalize_rows(node, g, needs):
    out, norms = node.aux
    dot = (g * out).sum(axis=1, keepdims=True)
    return ((g - out * dot) / norms,)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    av = _as_array(a)
    out = av - av.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return _make("softmax_rows", out, (a,), aux=out)


def layer_norm(a) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    av = _as_array(a)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    out = xc * inv
    return _make("layer_norm", out, (a,), aux=(out, inv))


def gelu(a) -> Tensor:
    av = _as_array(a)
    phi = erf(av * _INV_SQRT2)
    phi += 1.0
    phi *= 0.5
    return _make("gelu", av * phi, (a,), aux=(av, phi))


def mean_axis(a, axis=None) -> Tensor:
    av = _as_array(a)
    return _make("mean_axis", av.mean(axis=axis), (a,), aux=(axis, av.shape))


def sum_axis(a, axis=None) -> Tensor:
    av = _as_array(a)
    return _make("sum_axis", av.sum(axis=axis), (a,), aux=(axis, av.shape))


def clamp_min0(a) -> Tensor:
    """[x]_+ : negatives clamped to zero; subgradient 0 at exactly 0."""
    av = _as_array(a)
    return _make("clamp_min0", np.maximum(av, 0.0), (a,), aux=av > 0.0)


def log(a) -> Tensor:
    av = _as_array(a)
    if av.size and av.min() <= 0.0:
        raise DomainError(f"log: requires strictly positive input, got min {av.min()}")
    return _make("log", np.log(av), (a,), aux=av)


def exp(a) -> Tensor:
    av = _as_array(a)
    if av.size and av.max() > 700.0:
        raise DomainError(f"exp: input {av.max()} would overflow float64")
    return _make("exp", np.exp(av), (a,), aux=None)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two 1D vectors; errors on zero norms."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ShapeMismatchError("cosine_similarity", av.shape, bv.shape)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine_similarity: undefined for zero-norm vector")
    c = float(av @ bv) / (na * nb)
    return _make("cosine_similarity", np.float64(c), (a, b), aux=(av, bv, na, nb, c))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _vjp_add(node, g, needs):
    return (g, g)


def _vjp_sub(node, g, needs):
    return (g, -g)


def _vjp_hadamard(node, g, needs):
    av, bv = node.aux
    return (g * bv if needs[0] else None, g * av if needs[1] else None)


def _vjp_scale(node, g, needs):
    return (g * node.aux,)


def _vjp_add_rowvec(node, g, needs):
    gv = None
    if needs[1]:
        gv = g.reshape(-1, g.shape[-1]).sum(axis=0) if g.ndim > 1 else g
    return (g, gv)


def _vjp_mul_rowvec(node, g, needs):
    av, vv = node.aux
    ga = g * vv if needs[0] else None
    gv = None
    if needs[1]:
        gvfull = g * av
        gv = gvfull.reshape(-1, g.shape[-1]).sum(axis=0) if g.ndim > 1 else gvfull
    return (ga, gv)


def _vjp_transpose(node, g, needs):
    inv = np.argsort(node.aux)
    return (g.transpose(inv),)


def _vjp_reshape(node, g, needs):
    return (g.reshape(node.aux),)


def _vjp_concat_rows(node, g, needs):
    k = node.aux
    return (g[:k].copy(), g[k:].copy())


def _vjp_slice_rows(node, g, needs):
    start, stop, shape = node.aux
    out = np.zeros(shape)
    out[start:stop] = g
    return (out,)


def _vjp_stack(node, g, needs):
    return tuple(g[i] for i in range(g.shape[0]))


def _vjp_softmax_rows(node, g, needs):
    y = node.aux
    dot = (g * y).sum(axis=-1, keepdims=True)
    return ((g - dot) * y,)


def _vjp_layer_norm(node, g, needs):
    xhat, inv = node.aux
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return ((g - gm - xhat * gx) * inv,)


def _vjp_gelu(node, g, needs):
    x, phi = node.aux
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (g * (phi + x * pdf),)


def _vjp_mean_axis(node, g, needs):
    axis, shape = node.aux
    if axis is None:
        return (np.full(shape, g / np.prod(shape)),)
    n = shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)


def _vjp_sum_axis(node, g, needs):
    axis, shape = node.aux
    if axis is None:
        return (np.full(shape, g),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _vjp_clamp_min0(node, g, needs):
    return (g * node.aux,)


def _vjp_log(node, g, needs):
    return (g / node.aux,)


def _vjp_exp(node, g, needs):
    return (g * node.data,)


def _vjp_cosine_similarity(node, g, needs):
    av, bv, na, nb, c = node.aux
    ga = g * (bv / (na * nb) - c * av / (na * na)) if needs[0] else None
    gb = g * (av / (na * nb) - c * bv / (nb * nb)) if needs[1] else None
    return (ga, gb)


_VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "hadamard": _vjp_hadamard,
    "scale": _vjp_scale,
    "add_rowvec": _vjp_add_rowvec,
    "mul_rowvec": _vjp_mul_rowvec,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "concat_rows": _vjp_concat_rows,
    "slice_rows": _vjp_slice_rows,
    "stack": _vjp_stack,
    "prepend_row": _vjp_prepend_row,
    "add_mat": _vjp_add_mat,
    "normalize_rows": _vjp_normalize_rows,
    "softmax_rows": _vjp_softmax_rows,
    "layer_norm": _vjp_layer_norm,
    "gelu": _vjp_gelu,
    "mean_axis": _vjp_mean_axis,
    "sum_axis": _vjp_sum_axis,
    "clamp_min0": _vjp_clamp_min0,
    "log": _vjp_log,
    "exp": _vjp_exp,
    "cosine_similarity": _vjp_cosine_similarity,
}


def backward(graph: Graph, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-sweep the tape from a scalar output.

    Returns a map from every watched tensor to its gradient (zeros for
    watched tensors the output does not depend on) and stores the same array
    on ``tensor.grad``. Consumes the graph: a second call raises.
    """
    if output.graph is not graph:
        raise GraphStateError("output was not recorded on this graph")
    if output.data.shape != ():
        raise GraphStateError(f"backward requires a scalar output, got shape {output.data.shape}")
    if graph.consumed:
        raise GraphStateError("graph already consumed by backward; re-record the forward pass")
    graph.consumed = True

    nodes = graph.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[output._idx] = np.ones(())

    for idx in range(output._idx, -1, -1):
        g = adj[idx]
        if g is None:
            continue
        node = nodes[idx]
        if node.op is None:
            continue
        needs = tuple(inp is not None and inp.graph is graph for inp in node.inputs)
        grads = _VJP[node.op](node, g, needs)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or inp is None or inp.graph is not graph:
                continue
            if adj[inp._idx] is None:
                adj[inp._idx] = np.asarray(gi, dtype=np.float64)
            else:
                adj[inp._idx] = adj[inp._idx] + gi

    result: dict[Tensor, np.ndarray] = {}
    for node in nodes:
        if node.watched:
            g = adj[node._idx]
            if g is None:
                g = np.zeros(node.data.shape)
            else:
                g = np.asarray(g, dtype=np.float64).reshape(node.data.shape)
            node.grad = g
            result[node] = g
    return result


# ---------------------------------------------------------------------------
# independent gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5,
                           coords=None) -> np.ndarray:
    """Central-difference gradient estimate of a deterministic scalar function.

    ``coords`` restricts the estimate to a subset of flat indices (the rest of
    the returned array stays zero), which keeps checks on large inputs cheap.
    """
    if step <= 0:
        raise ValueError("finite_difference_grad: step must be positive")
    x0 = np.array(_as_array(x), dtype=np.float64)
    flat = x0.reshape(-1)
    out = np.zeros_like(flat)
    idxs = range(flat.size) if coords is None else coords
    for k in idxs:
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x0))
        flat[k] = orig - step
        fm = float(f(x0))
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * step)
    return out.reshape(x0.shape)
