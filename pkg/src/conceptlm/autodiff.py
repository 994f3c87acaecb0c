"""Dense-array reverse-mode automatic differentiation on numpy.

Every tensor in the model is a DiffArray. Ops record a closure graph; calling
`backward()` on a scalar replays the recorded ops in reverse topological
order, accumulating gradients into leaves. Values are frozen (read-only)
once wrapped so a live graph can never be corrupted by in-place mutation;
leaves are updated between steps through `assign_`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = False
# stop-gradient bookkeeping for finite-difference checks: None, or
# ("capture", list) / ("replay", list, [cursor])
_SG_MODE = None


def set_finite_checks(enabled: bool) -> None:
    """Opportunistic debug mode: raise if any op produces NaN/Inf values."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording; op outputs become constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DiffArray:
    """A dense real array that can participate in reverse-mode differentiation.

    `values` is read-only for the array's lifetime. `grad` is eagerly a zero
    array for leaves created with requires_grad=True (so an untouched leaf
    reads as exactly-zero gradient after backward) and None for op outputs
    until backward reaches them.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn", "_used")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.array(values, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None
        self._used = False

    # -- graph construction -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = "+grad" if self.requires_grad else "const"
        return f"DiffArray(shape={self.values.shape}, {flag})"

    def assign_(self, values: np.ndarray) -> None:
        """Replace a leaf's values (optimizer / checkpoint restore only)."""
        if not self.is_leaf:
            raise ValueError("assign_ is only valid on leaf arrays")
        arr = np.asarray(values, dtype=self.values.dtype)
        if arr.shape != self.values.shape:
            raise ValueError(f"shape mismatch: {arr.shape} vs {self.values.shape}")
        if arr is values:
            arr = arr.copy()
        arr.setflags(write=False)
        self.values = arr

    def cast_(self, dtype) -> None:
        """Re-type a leaf in place (e.g. to a wider float for oracle runs)."""
        if not self.is_leaf:
            raise ValueError("cast_ is only valid on leaf arrays")
        arr = self.values.astype(dtype)
        arr.setflags(write=False)
        self.values = arr
        if self.grad is not None:
            self.grad = np.zeros_like(arr)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar through the graph.

        A graph can be replayed once: op closures are released as they run,
        and a second backward over the same nodes raises.
        """
        if self.values.size != 1:
            raise ValueError("backward requires a scalar output")

        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        for node in order:
            if node._used:
                raise RuntimeError(
                    "graph already consumed by a previous backward; run a new forward"
                )

        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            fn = node._backward_fn
            if fn is None:
                continue  # leaves are reusable across graphs
            node._used = True
            if node.grad is not None:  # None: no gradient reached this node
                fn(node.grad)
            # release the closure and interior grad buffers as soon as they
            # are no longer needed; leaves keep their accumulated grads
            node._backward_fn = None
            node._parents = ()
            if node is not self:
                node.grad = None

    # -- operator sugar --------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_diff(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.values.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _make(values: np.ndarray, parents: Sequence[DiffArray], backward_fn) -> DiffArray:
    """Wrap an op result, recording the closure when gradients are live."""
    if _CHECK_FINITE and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = DiffArray.__new__(DiffArray)
    values.setflags(write=False)
    out.values = values
    out.grad = None
    out._used = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(node: DiffArray, g: np.ndarray) -> None:
    # grads are never mutated in place anywhere, so storing a reference
    # (possibly shared with a sibling parent) is safe
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and linear algebra ------------------------------------------


def add(a, b) -> DiffArray:
    a = _as_diff(a, like=b if isinstance(b, DiffArray) else None)
    b = _as_diff(b, like=a)
    values = a.values + b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(values, (a, b), backward_fn)


def sub(a, b) -> DiffArray:
    a = _as_diff(a, like=b if isinstance(b, DiffArray) else None)
    b = _as_diff(b, like=a)
    values = a.values - b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make(values, (a, b), backward_fn)


def mul(a, b) -> DiffArray:
    a = _as_diff(a, like=b if isinstance(b, DiffArray) else None)
    b = _as_diff(b, like=a)
    values = a.values * b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(values, (a, b), backward_fn)


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError("matmul expects arrays with at least 2 dimensions")
    values = a.values @ b.values

    def backward_fn(g):
        av, bv = a.values, b.values
        if bv.ndim == 2 and av.ndim >= 2:
            # batched x weight: fold batch dims into one pair of GEMMs
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(a, (g2 @ bv.T).reshape(av.shape))
            _accumulate(b, av.reshape(-1, av.shape[-1]).T @ g2)
        else:
            ga = g @ bv.swapaxes(-1, -2)
            gb = av.swapaxes(-1, -2) @ g
            _accumulate(a, _unbroadcast(ga, av.shape))
            _accumulate(b, _unbroadcast(gb, bv.shape))

    return _make(values, (a, b), backward_fn)


def transpose(a: DiffArray, axes: Sequence[int]) -> DiffArray:
    axes = tuple(axes)
    values = a.values.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _make(values, (a,), backward_fn)


def reshape(a: DiffArray, shape: Sequence[int]) -> DiffArray:
    shape = tuple(shape)
    values = a.values.reshape(shape)
    original = a.values.shape

    def backward_fn(g):
        _accumulate(a, g.reshape(original))

    return _make(values, (a,), backward_fn)


def narrow(a: DiffArray, axis: int, start: int, length: int) -> DiffArray:
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis % a.values.ndim
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.values.ndim)
    )
    values = a.values[index].copy()

    def backward_fn(g):
        full = np.zeros_like(a.values)
        full[index] = g
        _accumulate(a, full)

    return _make(values, (a,), backward_fn)


def concat(parts: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    parts = [_as_diff(p) for p in parts]
    values = np.concatenate([p.values for p in parts], axis=axis)
    ax = axis % values.ndim
    extents = [p.values.shape[ax] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, extent in zip(parts, extents):
            index = tuple(
                slice(offset, offset + extent) if i == ax else slice(None)
                for i in range(g.ndim)
            )
            _accumulate(p, g[index])
            offset += extent

    return _make(values, tuple(parts), backward_fn)


# -- nonlinearities and normalization -----------------------------------------


def relu(a: DiffArray) -> DiffArray:
    values = np.maximum(a.values, 0.0)

    def backward_fn(g):
        _accumulate(a, g * (a.values > 0))

    return _make(values, (a,), backward_fn)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: DiffArray) -> DiffArray:
    """GELU, tanh approximation (GPT-2 convention)."""
    x = a.values
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    values = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * local)

    return _make(values, (a,), backward_fn)


def softmax(a: DiffArray) -> DiffArray:
    """Row-wise softmax over the last axis, max-subtracted."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * w).sum(axis=-1, keepdims=True)
        _accumulate(a, w * (g - dot))

    return _make(w, (a,), backward_fn)


def causal_softmax(scores: DiffArray) -> DiffArray:
    """Softmax over the last axis with positions j > i masked to exact zero.

    Expects [..., T, T]; masking happens inside the op so node values stay
    finite, and masked weights are exactly 0.0 so no information can flow
    from future positions even at the bit level.
    """
    n = scores.values.shape[-1]
    if scores.values.shape[-2] != n:
        raise ValueError("causal_softmax expects [..., T, T] scores")
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    w = np.where(mask, np.array(-np.inf, dtype=scores.values.dtype), scores.values)
    w -= w.max(axis=-1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * w).sum(axis=-1, keepdims=True)
        out = g - dot
        out *= w
        _accumulate(scores, out)

    return _make(w, (scores,), backward_fn)


def layer_norm(a: DiffArray, gain: DiffArray, shift: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Layer normalization over the last axis with learnable scale/shift."""
    x = a.values
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    values = normed * gain.values + shift.values
    d = x.shape[-1]

    def backward_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * normed).sum(axis=reduce_axes))
        _accumulate(shift, g.sum(axis=reduce_axes))
        gn = g * gain.values
        term = gn - gn.mean(axis=-1, keepdims=True) - normed * (gn * normed).sum(
            axis=-1, keepdims=True
        ) / d
        _accumulate(a, term * inv)

    return _make(values, (a, gain, shift), backward_fn)


# -- lookups and pooling -------------------------------------------------------


def embedding(table: DiffArray, ids: np.ndarray) -> DiffArray:
    """Row lookup: out[...] = table[ids[...]]; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.values.shape[0]):
        raise ValueError("embedding id out of range")
    values = table.values[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.values.shape[-1]))
        _accumulate(table, gt)

    return _make(values, (table,), backward_fn)


def segment_lookup(table: DiffArray, ids: np.ndarray) -> DiffArray:
    """Per-segment row lookup: table [S,N,e], ids [...,S] -> out [...,S,e]."""
    ids = np.asarray(ids)
    n_seg = table.values.shape[0]
    if ids.shape[-1] != n_seg:
        raise ValueError("ids last axis must equal the number of segments")
    seg = np.broadcast_to(np.arange(n_seg), ids.shape)
    values = table.values[seg, ids]

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, (seg, ids), g)
        _accumulate(table, gt)

    return _make(values, (table,), backward_fn)


def gather_positions(x: DiffArray, index: np.ndarray) -> DiffArray:
    """Gather rows along axis -2 by position; index entries of -1 yield zeros.

    x [..., M, d] and index [T] produce [..., T, d] with
    out[..., t, :] = x[..., index[t], :] (or zeros when index[t] < 0).
    """
    index = np.asarray(index)
    safe = np.where(index >= 0, index, 0)
    values = np.take(x.values, safe, axis=-2)
    if np.any(index < 0):
        values = values.copy()
        values[..., index < 0, :] = 0.0

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        valid = index >= 0
        lead = tuple(slice(None) for _ in range(gx.ndim - 2))
        np.add.at(gx, lead + (index[valid],), g[lead + (valid,)])
        _accumulate(x, gx)

    return _make(values, (x,), backward_fn)


def mean_pool_chunks(x: DiffArray, chunk: int) -> DiffArray:
    """Mean-pool groups of `chunk` adjacent rows along axis -2.

    Backward distributes 1/chunk of the output gradient to each pooled row.
    """
    length = x.values.shape[-2]
    if length % chunk != 0:
        raise ValueError(f"chunk misalignment: length {length} not divisible by {chunk}")
    lead = x.values.shape[:-2]
    d = x.values.shape[-1]
    values = x.values.reshape(lead + (length // chunk, chunk, d)).mean(axis=-2)

    def backward_fn(g):
        expanded = np.repeat(g / chunk, chunk, axis=-2)
        _accumulate(x, expanded)

    return _make(values, (x,), backward_fn)


# -- reductions ----------------------------------------------------------------


def sum_all(a: DiffArray) -> DiffArray:
    values = np.asarray(a.values.sum())

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g, a.values.shape).copy())

    return _make(values, (a,), backward_fn)


def mean_all(a: DiffArray) -> DiffArray:
    n = a.values.size
    values = np.asarray(a.values.mean())

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g / n, a.values.shape).copy())

    return _make(values, (a,), backward_fn)


def cross_entropy(logits: DiffArray, targets: np.ndarray) -> DiffArray:
    """Mean softmax cross-entropy; logits [N, V], integer targets [N]."""
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or (
        targets.size and targets.max() >= logits.values.shape[-1]
    ):
        raise ValueError("cross_entropy target id out of range")
    x = logits.values
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    rows = np.arange(x.shape[0])
    values = np.asarray((lse - x[rows, targets]).mean())
    n = x.shape[0]

    def backward_fn(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, targets] -= 1.0
        _accumulate(logits, p * (g / n))

    return _make(values, (logits,), backward_fn)


# -- stop-gradient --------------------------------------------------------------


def stop_gradient(x: DiffArray) -> DiffArray:
    """Identity in the forward pass; blocks all gradient flow backward.

    Under a `capture_stop_gradients` / `replay_stop_gradients` context the
    stopped values are recorded / substituted, which lets a central-difference
    check hold them fixed (the defined gradient of a graph containing
    stop-gradient is the gradient of the surrogate where stopped values are
    constants).
    """
    global _SG_MODE
    if _SG_MODE is not None:
        if _SG_MODE[0] == "capture":
            _SG_MODE[1].append(np.array(x.values))
        else:
            store, cursor = _SG_MODE[1], _SG_MODE[2]
            if cursor[0] >= len(store):
                raise RuntimeError("stop-gradient replay exhausted; graph changed shape")
            frozen = store[cursor[0]]
            cursor[0] += 1
            if frozen.shape != x.values.shape:
                raise RuntimeError("stop-gradient replay shape mismatch")
            return DiffArray(frozen)
    return _make(np.array(x.values), (x,), lambda g: None)


@contextmanager
def capture_stop_gradients(storage: list):
    """Record each stop_gradient's forward values into `storage`, in call order."""
    global _SG_MODE
    prev = _SG_MODE
    _SG_MODE = ("capture", storage)
    try:
        yield
    finally:
        _SG_MODE = prev


@contextmanager
def replay_stop_gradients(storage: list):
    """Substitute previously captured values for each stop_gradient call."""
    global _SG_MODE
    prev = _SG_MODE
    _SG_MODE = ("replay", storage, [0])
    try:
        yield
    finally:
        _SG_MODE = prev


# -- finite differences ----------------------------------------------------------


def finite_difference_check(
    f: Callable[[DiffArray], DiffArray],
    x: DiffArray,
    eps: float = 1e-5,
    coords: Iterable[tuple] | None = None,
) -> float:
    """Compare f's analytic gradient at x against central differences.

    Returns max over coordinates of
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    `coords` restricts the check to a subset of coordinates (all by default).
    """
    if not x.requires_grad:
        raise ValueError("finite_difference_check needs x with requires_grad")
    x.zero_grad()
    out = f(x)
    if not np.isfinite(out.values):
        raise FloatingPointError("non-finite function value at the base point")
    out.backward()
    analytic = np.array(x.grad)

    base = np.array(x.values)
    worst = 0.0
    try:
        for idx in coords if coords is not None else np.ndindex(x.values.shape):
            bumped = base.copy()
            bumped[idx] = base[idx] + eps
            x.assign_(bumped)
            with no_grad():
                f_plus = float(f(x).values)
            bumped[idx] = base[idx] - eps
            x.assign_(bumped)
            with no_grad():
                f_minus = float(f(x).values)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite function value at a perturbed point")
            central = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
    finally:
        x.assign_(base)
    return worst
