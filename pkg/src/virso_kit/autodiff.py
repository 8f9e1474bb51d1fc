"""Minimal reverse-mode autodiff over dense float64 arrays (up to 3 axes).

Each op validates its operands against an explicit shape contract and
registers a backward closure; `backward(root)` runs a reverse topological
sweep from a scalar root, accumulating gradients additively. There is no
implicit broadcasting: every alignment rule is part of a named op.

Most ops accept an optional leading batch axis. "Rows" always means
vectors along the last axis.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction for cheap inference."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Value:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > 3:
            raise ShapeError(f"at most 3 axes supported, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None


def constant(data, name=None) -> Value:
    return Value(data, requires_grad=False, name=name)


def param(data, name=None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _node(data, parents, backward_fn) -> Value:
    out = Value(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(v: Value, g: np.ndarray):
    # grad buffers are rebound, never mutated in place, so aliasing is safe
    if not v.requires_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


def backward(root: Value):
    """Populate grads of every reachable requires_grad Value from a scalar root."""
    if root.data.ndim != 0:
        raise InvalidParameterError(
            f"backward requires a scalar root, got shape {root.data.shape}"
        )
    topo: list[Value] = []
    seen = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    _accum(root, np.asarray(1.0))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# shape helpers


def _want(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


def _same_shape(a: Value, b: Value, op: str):
    _want(a.data.shape == b.data.shape, f"{op}: shapes {a.data.shape} vs {b.data.shape}")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient with a leading batch axis back to an unbatched operand."""
    if g.ndim == len(shape):
        return g
    return g.sum(axis=0)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Value, b: Value) -> Value:
    _same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Value, b: Value) -> Value:
    _same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), bwd)


def scalar_mul(a: Value, c: float) -> Value:
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), bwd)


def elementwise_mul(a: Value, b: Value) -> Value:
    _same_shape(a, b, "elementwise_mul")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def matmul(a: Value, b: Value) -> Value:
    """Matrix product. Allowed: 2dx2d, 3dx2d, 2dx3d, 3dx3d (matching batch)."""
    ad, bd = a.data, b.data
    _want(ad.ndim >= 2 and bd.ndim >= 2, "matmul: operands must have >= 2 axes")
    _want(ad.shape[-1] == bd.shape[-2], f"matmul: inner dims {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3:
        _want(ad.shape[0] == bd.shape[0], f"matmul: batch dims {ad.shape} @ {bd.shape}")

    def bwd(g):
        _accum(a, _sum_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape))
        _accum(b, _sum_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape))

    return _node(np.matmul(ad, bd), (a, b), bwd)


def add_rowvec(a: Value, row: Value) -> Value:
    """Add a (1, d) vector to every row of a (..., d) array."""
    _want(row.data.ndim == 2 and row.data.shape[0] == 1, f"add_rowvec: row shape {row.data.shape}")
    _want(a.data.shape[-1] == row.data.shape[1], f"add_rowvec: {a.data.shape} + {row.data.shape}")

    def bwd(g):
        _accum(a, g)
        axes = tuple(range(g.ndim - 1))
        _accum(row, g.sum(axis=axes).reshape(1, -1))

    return _node(a.data + row.data.reshape((1,) * (a.data.ndim - 1) + (-1,)), (a, row), bwd)


def mul_rowvec(a: Value, row: Value) -> Value:
    """Multiply every row of a (..., d) array by a (1, d) vector."""
    _want(row.data.ndim == 2 and row.data.shape[0] == 1, f"mul_rowvec: row shape {row.data.shape}")
    _want(a.data.shape[-1] == row.data.shape[1], f"mul_rowvec: {a.data.shape} * {row.data.shape}")
    r = row.data.reshape((1,) * (a.data.ndim - 1) + (-1,))

    def bwd(g):
        _accum(a, g * r)
        axes = tuple(range(g.ndim - 1))
        _accum(row, (g * a.data).sum(axis=axes).reshape(1, -1))

    return _node(a.data * r, (a, row), bwd)


def scale_rows(a: Value, s: Value) -> Value:
    """Scale each row of a (..., R, d) array by the (R, 1) per-row scalar."""
    _want(
        s.data.ndim == 2 and s.data.shape[1] == 1 and a.data.ndim >= 2
        and s.data.shape[0] == a.data.shape[-2],
        f"scale_rows: {a.data.shape} scaled by {s.data.shape}",
    )

    def bwd(g):
        _accum(a, g * s.data)
        ds = (g * a.data).sum(axis=-1, keepdims=True)
        _accum(s, _sum_to(ds, s.data.shape))

    return _node(a.data * s.data, (a, s), bwd)


def concat_cols(a: Value, b: Value) -> Value:
    _want(
        a.data.shape[:-1] == b.data.shape[:-1],
        f"concat_cols: leading shapes {a.data.shape} vs {b.data.shape}",
    )
    da = a.data.shape[-1]

    def bwd(g):
        _accum(a, g[..., :da])
        _accum(b, g[..., da:])

    return _node(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def slice_cols(a: Value, start: int, stop: int) -> Value:
    _want(0 <= start < stop <= a.data.shape[-1], f"slice_cols: [{start}:{stop}] of {a.data.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    return _node(a.data[..., start:stop].copy(), (a,), bwd)


def broadcast_rows(a: Value, n: int) -> Value:
    """Insert a repeated axis: (B, d) -> (B, n, d)."""
    _want(a.data.ndim == 2, f"broadcast_rows: need 2-d input, got {a.data.shape}")

    def bwd(g):
        _accum(a, g.sum(axis=-2))

    return _node(np.repeat(a.data[:, None, :], n, axis=1), (a,), bwd)


# sort plans keyed by target-array identity; the stored reference keeps the
# array alive so ids cannot be recycled
_SEGMENT_PLANS: dict = {}


def _segment_plan(targets: np.ndarray):
    key = (id(targets), targets.shape[0])
    hit = _SEGMENT_PLANS.get(key)
    if hit is not None and hit[0] is targets:
        return hit[1]
    order = np.argsort(targets, kind="stable")
    st = targets[order]
    starts = np.flatnonzero(np.r_[True, st[1:] != st[:-1]])
    plan = (order, st[starts], starts)
    if len(_SEGMENT_PLANS) > 64:
        _SEGMENT_PLANS.clear()
    _SEGMENT_PLANS[key] = (targets, plan)
    return plan


def _segment_sum(values: np.ndarray, targets: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of (..., E, d) into (..., n, d) buckets given by targets."""
    out_shape = values.shape[:-2] + (n, values.shape[-1])
    if targets.size == 0:
        return np.zeros(out_shape)
    order, bucket_ids, starts = _segment_plan(targets)
    sv = np.take(values, order, axis=-2)
    sums = np.add.reduceat(sv, starts, axis=-2)
    out = np.zeros(out_shape)
    out[..., bucket_ids, :] = sums
    return out


def gather_rows(v: Value, indices: np.ndarray) -> Value:
    """Select rows along axis -2: (..., n, d) -> (..., E, d)."""
    indices = np.asarray(indices, dtype=np.int64)
    _want(indices.ndim == 1, "gather_rows: indices must be 1-d")
    _want(v.data.ndim >= 2, f"gather_rows: input shape {v.data.shape}")
    n = v.data.shape[-2]
    _want(indices.size == 0 or (indices.min() >= 0 and indices.max() < n),
          "gather_rows: index out of range")

    def bwd(g):
        _accum(v, _segment_sum(g, indices, n))

    return _node(np.take(v.data, indices, axis=-2), (v,), bwd)


def scatter_add_rows(contributions: Value, targets: np.ndarray, n: int) -> Value:
    """Sum contribution rows (..., E, d) into n target rows along axis -2."""
    targets = np.asarray(targets, dtype=np.int64)
    _want(targets.ndim == 1 and targets.size == contributions.data.shape[-2],
          "scatter_add_rows: one target per contribution row")
    _want(targets.size == 0 or (targets.min() >= 0 and targets.max() < n),
          "scatter_add_rows: target out of range")

    def bwd(g):
        _accum(contributions, np.take(g, targets, axis=-2))

    return _node(_segment_sum(contributions.data, targets, n), (contributions,), bwd)


def mode1_product(k: Value, c: Value) -> Value:
    """Apply a distinct (d_v, d_w) transform per mode: out[.., j, :] = c[.., j, :] @ k[j]."""
    kd, cd = k.data, c.data
    _want(kd.ndim == 3, f"mode1_product: kernel must be 3-d, got {kd.shape}")
    _want(cd.ndim in (2, 3), f"mode1_product: coefficients must be 2-d or 3-d, got {cd.shape}")
    _want(cd.shape[-2] == kd.shape[0] and cd.shape[-1] == kd.shape[1],
          f"mode1_product: {cd.shape} against kernel {kd.shape}")

    def bwd(g):
        _accum(c, np.einsum("...jb,jab->...ja", g, kd))
        spec = "ja,jb->jab" if cd.ndim == 2 else "Bja,Bjb->jab"
        _accum(k, np.einsum(spec, cd, g))

    return _node(np.einsum("...ja,jab->...jb", cd, kd), (k, c), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and norms

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Value) -> Value:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))

    def bwd(g):
        d = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x2)
        _accum(a, g * d)

    return _node(0.5 * x * (1 + t), (a,), bwd)


def relu(a: Value) -> Value:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), bwd)


def sigmoid(a: Value) -> Value:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bwd)


def sqrt(a: Value) -> Value:
    """Elementwise square root; inputs must be positive where grads matter."""
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out)

    return _node(out, (a,), bwd)


def sum_all(a: Value) -> Value:
    shape = a.data.shape

    def bwd(g):
        _accum(a, np.broadcast_to(g, shape).copy())

    return _node(a.data.sum(), (a,), bwd)


def sum_last2(a: Value) -> Value:
    """Reduce the last two axes: (B, n, c) -> (B,); (n, c) -> ()."""
    _want(a.data.ndim >= 2, f"sum_last2: need >= 2 axes, got {a.data.shape}")
    shape = a.data.shape

    def bwd(g):
        _accum(a, np.broadcast_to(np.reshape(g, g.shape + (1, 1)), shape).copy())

    return _node(a.data.sum(axis=(-2, -1)), (a,), bwd)


def layer_norm_rows(a: Value, gain: Value, bias: Value, eps: float = 1e-12) -> Value:
    """Normalize each row to zero mean / unit variance, then apply (1, d) affine."""
    d = a.data.shape[-1]
    _want(gain.data.shape == (1, d) and bias.data.shape == (1, d),
          f"layer_norm_rows: affine shapes {gain.data.shape}, {bias.data.shape} for d={d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gr = gain.data.reshape((1,) * (a.data.ndim - 1) + (-1,))

    def bwd(g):
        dxhat = g * gr
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (dxhat - m1 - xhat * m2))
        axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=axes).reshape(1, -1))
        _accum(bias, g.sum(axis=axes).reshape(1, -1))

    return _node(xhat * gr + bias.data.reshape((1,) * (a.data.ndim - 1) + (-1,)),
                 (a, gain, bias), bwd)


def l2_normalize_rows(a: Value, eps: float = 1e-12) -> Value:
    """Scale each row to unit norm; zero rows stay zero (stabilizer eps)."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = norm + eps
    out = a.data / denom

    def bwd(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        safe = np.where(norm == 0.0, 1.0, norm)
        corr = np.where(norm == 0.0, 0.0, dot / (denom * denom * safe))
        _accum(a, g / denom - a.data * corr)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params: list[Value], probe_count: int = 20,
               step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic grads and central finite differences.

    `loss_fn()` must be a deterministic closure over `params` returning a
    scalar Value. Probes are drawn uniformly over all scalar parameters.
    """
    for p in params:
        p.zero_grad()
    root = loss_fn()
    backward(root)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(probe_count, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        orig = p.data.flat[local]
        with no_grad():
            p.data.flat[local] = orig + step
            f_plus = float(loss_fn().data)
            p.data.flat[local] = orig - step
            f_minus = float(loss_fn().data)
        p.data.flat[local] = orig
        fd = (f_plus - f_minus) / (2 * step)
        an = float(analytic[pi].flat[local])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst
