"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A Tape records primitive operations in execution order, which is already a
topological order, so the backward pass is a single reverse sweep that visits
each node exactly once.  Max-style semiring nodes route their adjoint entirely
to the argmax operand (first operand wins ties), which is the subgradient used
throughout for Viterbi-style scores.

Also provides the Adam optimizer and a central-finite-difference gradient
checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sopa.semiring import Semiring

# cap on elements materialized per chunk of the pattern/token score products
_CHUNK_ELEMS = 1 << 22


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pairwise_dot(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Row-wise dot products (n, e) x (L, e) -> (n, L).

    Uses multiply-then-reduce over the contiguous last axis so each output
    element is accumulated by the same summation tree regardless of the
    surrounding batch shape.  Scoring paths rely on that for exact agreement
    between the batched recurrence, per-token scoring, and the oracles.
    """
    return (v[:, None, :] * m[None, :, :]).sum(axis=-1)


class Param:
    """A named trainable array with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Node:
    """One recorded value.  grad stays None until the backward sweep reaches it."""

    __slots__ = ("value", "grad", "_bw", "_tape")

    def __init__(self, value, tape):
        self.value = value
        self.grad = None
        self._bw = None
        self._tape = tape

    @property
    def shape(self):
        return np.shape(self.value)


def _accumulate(node: Node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to the given operand shape (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


class Tape:
    """Records forward operations; replayed backwards for gradients."""

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self._nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def _op(self, value, bw=None) -> Node:
        node = Node(value, self)
        if self.grad_enabled and bw is not None:
            node._bw = bw
            self._nodes.append(node)
        return node

    # -- leaves --------------------------------------------------------------

    def const(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), self)

    def leaf(self, param: Param) -> Node:
        cached = self._leaves.get(id(param))
        if cached is not None:
            return cached
        node = self._op(param.value, bw=lambda g, p=param: np.add(p.grad, g, out=p.grad))
        self._leaves[id(param)] = node
        return node

    # -- arithmetic ------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        return self._op(a.value + b.value, bw)

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        def bw(g):
            _accumulate(a, _unbroadcast(g * bv, a.shape))
            _accumulate(b, _unbroadcast(g * av, b.shape))
        return self._op(av * bv, bw)

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        def bw(g):
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)
        return self._op(av @ bv, bw)

    def add_bias(self, x: Node, bias: Node) -> Node:
        def bw(g):
            _accumulate(x, g)
            _accumulate(bias, g.sum(axis=0) if g.ndim > bias.value.ndim else g)
        return self._op(x.value + bias.value, bw)

    def sigmoid(self, x: Node) -> Node:
        y = stable_sigmoid(x.value)
        def bw(g):
            _accumulate(x, g * y * (1.0 - y))
        return self._op(y, bw)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0
        def bw(g):
            _accumulate(x, g * mask)
        return self._op(np.where(mask, x.value, 0.0), bw)

    def pattern_affine(self, doc: np.ndarray, weights: Node, bias: Node) -> Node:
        """Token/slot pre-activations (B,n,e)x(c,L,e)+(c,L) -> (B,n,c,L).

        Dot products use the shape-stable multiply-reduce of pairwise_dot,
        chunked over the token axis to bound memory.
        """
        bsz, n, e = doc.shape
        c, length, _ = weights.value.shape
        w = weights.value
        out = np.empty((bsz, n, c, length))
        step = max(1, _CHUNK_ELEMS // max(1, bsz * c * length * e))
        for s in range(0, n, step):
            blk = doc[:, s:s + step]
            out[:, s:s + step] = (blk[:, :, None, None, :] * w[None, None]).sum(axis=-1)
        out += bias.value

        def bw(g):
            _accumulate(weights, np.einsum("bncl,bne->cle", g, doc))
            _accumulate(bias, g.sum(axis=(0, 1)))
        return self._op(out, bw)

    # -- semiring ops ------------------------------------------------------------

    def semiring_times(self, sr: Semiring, a: Node, b: Node) -> Node:
        """Path-algebra product: guarded so absent (-inf) operands stay absent."""
        av, bv = a.value, b.value
        value = sr.path_times_arrays(av, bv)
        if sr.times_is_addition:
            def bw(g):
                _accumulate(a, _unbroadcast(g, a.shape))
                _accumulate(b, _unbroadcast(g, b.shape))
        elif sr.idempotent_plus:
            # max-product: no gradient through cells that hold no path
            live = np.isfinite(value)
            def bw(g):
                with np.errstate(invalid="ignore"):
                    _accumulate(a, _unbroadcast(np.where(live, g * bv, 0.0), a.shape))
                    _accumulate(b, _unbroadcast(np.where(live, g * av, 0.0), b.shape))
        else:
            def bw(g):
                _accumulate(a, _unbroadcast(g * bv, a.shape))
                _accumulate(b, _unbroadcast(g * av, b.shape))
        return self._op(value, bw)

    def semiring_times_dual(self, sr: Semiring, amax: Node, aneg: Node,
                            b: Node) -> tuple[Node, Node]:
        """Sign-selected product extending (max, -min) path-product pairs.

        Needed because max does not distribute over negative factors; see
        Semiring.dual_times_arrays.  Gradients follow the selected extreme in
        live lanes only.
        """
        av, nv, bv = amax.value, aneg.value, b.value
        vmax, vneg = sr.dual_times_arrays(av, nv, bv)
        live = ~(np.isneginf(bv) | np.isneginf(av))
        nonneg = bv >= 0.0
        pick_max = live & nonneg  # max output read amax; else it read aneg
        pick_neg = live & ~nonneg

        def bw_max(g):
            with np.errstate(invalid="ignore"):
                _accumulate(amax, _unbroadcast(np.where(pick_max, g * bv, 0.0), amax.shape))
                _accumulate(aneg, _unbroadcast(np.where(pick_neg, g * -bv, 0.0), aneg.shape))
                _accumulate(b, _unbroadcast(
                    np.where(pick_max, g * av, np.where(pick_neg, g * -nv, 0.0)), b.shape))

        def bw_neg(g):
            with np.errstate(invalid="ignore"):
                _accumulate(aneg, _unbroadcast(np.where(pick_max, g * bv, 0.0), aneg.shape))
                _accumulate(amax, _unbroadcast(np.where(pick_neg, g * -bv, 0.0), amax.shape))
                _accumulate(b, _unbroadcast(
                    np.where(pick_max, g * nv, np.where(pick_neg, g * -av, 0.0)), b.shape))

        return self._op(vmax, bw_max), self._op(vneg, bw_neg)

    def semiring_plus(self, sr: Semiring, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if sr.idempotent_plus:
            # subgradient: adjoint follows the winning operand, ties go first
            mask = av >= bv
            def bw(g):
                _accumulate(a, _unbroadcast(g * mask, a.shape))
                _accumulate(b, _unbroadcast(g * ~mask, b.shape))
        else:
            def bw(g):
                _accumulate(a, _unbroadcast(g, a.shape))
                _accumulate(b, _unbroadcast(g, b.shape))
        return self._op(sr.plus_arrays(av, bv), bw)

    def semiring_reduce(self, sr: Semiring, x: Node, axis: int) -> Node:
        value = sr.plus_reduce(x.value, axis)
        if sr.idempotent_plus:
            winners = np.expand_dims(np.argmax(x.value, axis=axis), axis)
            def bw(g):
                gx = np.zeros_like(x.value)
                np.put_along_axis(gx, winners, np.expand_dims(g, axis), axis=axis)
                _accumulate(x, gx)
        else:
            def bw(g):
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))
        return self._op(value, bw)

    # -- shape ops ------------------------------------------------------------

    def concat(self, parts: list[Node], axis: int) -> Node:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bw(g):
            for p, s, t in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(s, t)
                _accumulate(p, g[tuple(idx)])
        return self._op(np.concatenate([p.value for p in parts], axis=axis), bw)

    def stack(self, parts: list[Node], axis: int) -> Node:
        def bw(g):
            for i, p in enumerate(parts):
                _accumulate(p, np.take(g, i, axis=axis))
        return self._op(np.stack([p.value for p in parts], axis=axis), bw)

    def slice_axis(self, x: Node, axis: int, start: int, stop: int) -> Node:
        idx = [slice(None)] * len(x.shape)
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        def bw(g):
            gx = np.zeros_like(x.value)
            gx[idx] = g
            _accumulate(x, gx)
        return self._op(x.value[idx], bw)

    def index_axis(self, x: Node, axis: int, i: int) -> Node:
        def bw(g):
            gx = np.zeros_like(x.value)
            idx = [slice(None)] * len(x.shape)
            idx[axis] = i
            gx[tuple(idx)] = g
            _accumulate(x, gx)
        return self._op(np.take(x.value, i, axis=axis), bw)

    def broadcast_to(self, x: Node, shape: tuple) -> Node:
        def bw(g):
            _accumulate(x, _unbroadcast(g, x.shape))
        return self._op(np.broadcast_to(x.value, shape), bw)

    def where_mask(self, x: Node, mask: np.ndarray, fill: float) -> Node:
        def bw(g):
            _accumulate(x, g * mask)
        return self._op(np.where(mask, x.value, fill), bw)

    def finalize_scores(self, sr: Semiring, x: Node) -> Node:
        """Boundary conversion of internal absent markers to the declared zero."""
        value = sr.finalize_scores(x.value)
        if value is x.value:
            return x
        live = ~np.isneginf(x.value)
        def bw(g):
            _accumulate(x, g * live)
        return self._op(value, bw)

    def take_columns(self, x: Node, cols: np.ndarray) -> Node:
        def bw(g):
            gx = np.zeros_like(x.value)
            np.add.at(gx, (slice(None), cols), g)
            _accumulate(x, gx)
        return self._op(x.value[:, cols], bw)

    # -- loss ------------------------------------------------------------

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean negative log-likelihood of integer labels under softmax(logits)."""
        lv = logits.value
        bsz = lv.shape[0]
        shifted = lv - lv.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        nll = logz - shifted[np.arange(bsz), labels]
        def bw(g):
            probs = np.exp(shifted - logz[:, None])
            probs[np.arange(bsz), labels] -= 1.0
            _accumulate(logits, (g / bsz) * probs)
        return self._op(float(nll.mean()), bw)

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Node):
        if not self.grad_enabled:
            raise RuntimeError("backward on a gradient-disabled tape")
        if not self._nodes:
            raise RuntimeError("backward before any forward operation was recorded")
        if loss._tape is not self:
            raise RuntimeError("loss node does not belong to this tape")
        loss.grad = np.ones_like(loss.value, dtype=np.float64)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            node._bw(node.grad)


def backward(loss: Node, tape: Tape):
    """Run the reverse sweep, depositing gradients into Param.grad."""
    tape.backward(loss)


class Adam:
    """Adam with bias correction, applied in place to registered Params."""

    def __init__(self, params: list[Param], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    @property
    def registered_scalars(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient for parameter {p.name!r}")
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FiniteDifferenceEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    checked: int
    worst: list[FiniteDifferenceEntry] = field(default_factory=list)


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def finite_difference_check(
    loss_fn, params: list[Param], *, step: float = 1e-5,
    worst: int = 10, max_checks: int | None = None,
) -> FiniteDifferenceReport:
    """Compare Param.grad against central finite differences of loss_fn.

    loss_fn() must recompute the loss from current Param values.  Call after
    a backward pass has filled the gradients.  max_checks caps the number of
    scalars probed (evenly strided through each array) for large models.
    """
    entries: list[FiniteDifferenceEntry] = []
    checked = 0
    budget = max_checks if max_checks is not None else sum(p.size for p in params)
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        take = n if max_checks is None else max(1, min(n, budget // max(len(params), 1)))
        stride = max(1, n // take)
        for i in range(0, n, stride):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(gflat[i])
            entries.append(FiniteDifferenceEntry(
                param=p.name,
                index=np.unravel_index(i, p.value.shape),
                analytic=analytic,
                numeric=numeric,
                rel_error=_rel_error(analytic, numeric),
            ))
            checked += 1
    entries.sort(key=lambda entry: entry.rel_error, reverse=True)
    max_err = entries[0].rel_error if entries else 0.0
    return FiniteDifferenceReport(max_rel_error=max_err, checked=checked, worst=entries[:worst])
