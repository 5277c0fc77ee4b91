"""Reverse-mode differentiable ops over dense numpy arrays.

Deliberately small: only the operations the mesh VAE and its losses need.
Every forward op records a backward closure on a tape; gradients are exact
analytic expressions and are verified against central finite differences
by :func:`grad_check`.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense array node in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def _accumulate(self, g, own=False):
        # own=True: g is freshly allocated by the caller and may be adopted
        # without copying; otherwise g may alias another node's grad buffer.
        if self.grad is None:
            if own and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64)
                if self.grad.shape != self.data.shape:
                    self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward()
            if not t.requires_grad and t is not self:
                t.grad = None  # free intermediate buffers early
        # break the graph's reference cycles (node <-> backward closure) so
        # the large intermediate buffers are freed by refcounting instead of
        # waiting for a generational gc pass; a graph is single-use
        for t in topo:
            t._backward = None
            t._parents = ()

    def release_graph(self):
        """Break this graph's reference cycles without running backward.

        Inference-only passes (no backward call) must release their graphs
        explicitly, for the same reason backward() does: every node and its
        closure form a cycle that refcounting alone cannot reclaim.
        """
        stack, seen = [self], set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.extend(t._parents)
            t._backward = None
            t._parents = ()

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data)
        out._parents = (self, other)

        def back():
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)
        out._parents = (self,)
        out._backward = lambda: self._accumulate(-out.grad, own=True)
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data)
        out._parents = (self, other)

        def back():
            self._accumulate(_unbroadcast(out.grad * other.data, self.shape), own=True)
            other._accumulate(_unbroadcast(out.grad * self.data, other.shape), own=True)

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data)
        out._parents = (self, other)

        def back():
            self._accumulate(_unbroadcast(out.grad / other.data, self.shape), own=True)
            other._accumulate(
                _unbroadcast(-out.grad * self.data / other.data ** 2, other.shape), own=True)

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, k):
        assert isinstance(k, (int, float))
        out = Tensor(self.data ** k)
        out._parents = (self,)
        out._backward = lambda: self._accumulate(out.grad * k * self.data ** (k - 1), own=True)
        return out

    def __matmul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data @ other.data)
        out._parents = (self, other)

        def back():
            # sum over broadcast batch dims when one operand is lower-rank
            self._accumulate(_unbroadcast(out.grad @ np.swapaxes(other.data, -1, -2),
                                          self.shape), own=True)
            other._accumulate(_unbroadcast(np.swapaxes(self.data, -1, -2) @ out.grad,
                                           other.shape), own=True)

        out._backward = back
        return out

    # -- elementwise / reductions ------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))
        out._parents = (self,)
        out._backward = lambda: self._accumulate(out.grad * out.data, own=True)
        return out

    def log(self):
        out = Tensor(np.log(self.data))
        out._parents = (self,)
        out._backward = lambda: self._accumulate(out.grad / self.data, own=True)
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))
        out._parents = (self,)

        def back():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape))
        out._parents = (self,)
        out._backward = lambda: self._accumulate(out.grad.reshape(self.shape))
        return out

    def transpose(self):
        out = Tensor(self.data.T)
        out._parents = (self,)
        out._backward = lambda: self._accumulate(out.grad.T)
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key])
        out._parents = (self,)

        def back():
            g = np.zeros_like(self.data)
            np.add.at(g, key, out.grad)
            self._accumulate(g, own=True)

        out._backward = back
        return out


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast to reach its shape."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Model ops


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b with shape checks naming both shapes."""
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} incompatible with weights {weights.shape}")
    return x @ weights + bias


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, alpha * (np.exp(np.minimum(x.data, 0.0)) - 1.0)))
    out._parents = (x,)
    out._backward = lambda: x._accumulate(
        out.grad * np.where(pos, 1.0, alpha * np.exp(np.minimum(x.data, 0.0))), own=True)
    return out


_SCATTER_CACHE: dict = {}


def _scatter_matrix(spiral_set):
    """Sparse (N, N*L) map accumulating spiral-gather gradients per vertex."""
    key = id(spiral_set)
    hit = _SCATTER_CACHE.get(key)
    if hit is not None and hit[0] is spiral_set:
        return hit[1]
    from scipy import sparse

    idx = spiral_set.spirals
    n, l = idx.shape
    flat = idx.ravel()
    keep = flat < n  # drop pad-marker slots
    m = sparse.csr_matrix(
        (np.ones(int(keep.sum())), (flat[keep], np.flatnonzero(keep))),
        shape=(n, n * l))
    _SCATTER_CACHE[key] = (spiral_set, m)
    return m


def gather_spiral(vertex_features: Tensor, spiral_set) -> Tensor:
    """Concatenate each vertex's spiral neighborhood features.

    Input (B, N, C) -> output (B, N, L*C). Rows at the pad marker gather
    a zero feature vector.
    """
    idx = spiral_set.spirals
    b, n, c = vertex_features.shape
    if idx.max() > n or idx.shape[0] != n:
        raise ValueError(
            f"gather_spiral: features for {n} vertices incompatible with "
            f"spirals over {idx.shape[0]} vertices (pad marker {spiral_set.pad_marker})")
    x = vertex_features
    l = idx.shape[1]
    padded = np.concatenate([x.data, np.zeros((b, 1, c))], axis=1)
    # np.take keeps the result C-contiguous; padded[:, idx, :] would return a
    # transposed view whose reshape copies the whole block.
    out = Tensor(np.take(padded, idx, axis=1).reshape(b, n, l * c))

    def back():
        g = out.grad.reshape(b, n * l, c)
        mat = _scatter_matrix(spiral_set)
        gx = np.empty((b, n, c))
        for i in range(b):
            gx[i] = mat @ g[i]
        x._accumulate(gx, own=True)

    out._parents = (x,)
    out._backward = back
    return out


def sparse_apply(matrix, vertex_features: Tensor) -> Tensor:
    """Apply a sparse (M, N) vertex map to features of shape (B, N, C)."""
    b, n, c = vertex_features.shape
    if matrix.shape[1] != n:
        raise ValueError(f"sparse_apply: map {matrix.shape} incompatible with features "
                         f"({b}, {n}, {c})")
    x = vertex_features
    m = matrix.shape[0]
    y = (matrix @ x.data.transpose(1, 0, 2).reshape(n, b * c)).reshape(m, b, c)
    out = Tensor(y.transpose(1, 0, 2))

    def back():
        mt = matrix.T.tocsr()
        gx = np.empty((b, n, c))
        for i in range(b):
            gx[i] = mt @ out.grad[i]
        x._accumulate(gx, own=True)

    out._parents = (x,)
    out._backward = back
    return out


def reparameterize(mu: Tensor, log_var: Tensor, noise_seed=None, eps=None) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps from a seeded stream.

    Gradients flow to mu and log_var only; eps is a constant.
    """
    if mu.shape != log_var.shape:
        raise ValueError(f"reparameterize: mu {mu.shape} vs log_var {log_var.shape}")
    if eps is None:
        eps = np.random.default_rng(noise_seed).standard_normal(mu.shape)
    return mu + (log_var * 0.5).exp() * Tensor(eps)


# ---------------------------------------------------------------------------
# Parameters and verification


class ParamStore:
    """Named parameter tensors with paired gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self):
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state):
        for k, t in self._params.items():
            if t.data.shape != state[k].shape:
                raise ValueError(f"parameter {k!r}: shape {state[k].shape} != {t.data.shape}")
            t.data = state[k].astype(np.float64).copy()


def grad_check(closure, params: ParamStore, h: float = 1e-5, tol: float = 1e-6):
    """Compare analytic gradients with central finite differences.

    ``closure`` recomputes the scalar loss from the current parameter
    values. Returns a dict with per-parameter max relative error and an
    overall pass flag. Raises if the loss is non-finite.
    """
    params.zero_grad()
    loss = closure()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"closure returned non-finite loss {loss.data}")
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}

    report = {"per_param": {}, "tol": tol}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.ravel()
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            out = closure()
            hi = out.data.item()
            out.release_graph()
            flat[i] = orig - h
            out = closure()
            lo = out.data.item()
            out.release_graph()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            fd[i] = (hi - lo) / (2 * h)
        a = analytic[name].ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        err = float(np.max(np.abs(a - fd) / denom)) if flat.size else 0.0
        report["per_param"][name] = err
        worst = max(worst, err)
    report["max_rel_error"] = worst
    report["passed"] = worst < tol
    return report
