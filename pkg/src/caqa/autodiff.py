"""Reverse-mode automatic differentiation over dense 2-D float arrays.

A :class:`Graph` is a tape: every primitive application appends one
:class:`Node` holding the operation kind, its input nodes, and the computed
output array. Forward evaluation is eager; :meth:`Graph.backward` seeds the
(scalar) loss with adjoint 1 and walks the tape in exact reverse insertion
order, accumulating adjoints additively. Parameters used several times in
one graph (weight sharing) therefore receive the sum of their per-use
gradients.

Values are plain numpy arrays of the graph dtype (float64 by default;
float32 for training speed). Nodes whose subtree contains no parameter skip
adjoint propagation entirely.
"""

import logging

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .optim import ParamTensor

log = logging.getLogger(__name__)

_ACTIVATIONS = ("none", "tanh", "relu", "sigmoid")


class Node:
    """One tape entry: an operation, its inputs, and its output matrix."""

    __slots__ = ("op", "value", "inputs", "grad", "needs_grad", "_backward")

    def __init__(self, op, value, inputs, needs_grad, backward):
        self.op = op
        self.value = value
        self.inputs = inputs
        self.grad = None
        self.needs_grad = needs_grad
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


def _acc(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Tape of primitive applications; single-threaded during use."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._param_leaves = {}

    # -- leaves ----------------------------------------------------------

    def _register(self, op, value, inputs, backward):
        needs = any(i.needs_grad for i in inputs)
        node = Node(op, value, inputs, needs, backward if needs else None)
        self.nodes.append(node)
        return node

    def constant(self, array) -> Node:
        value = np.asarray(array, dtype=self.dtype)
        if value.ndim != 2:
            raise ShapeError(f"constants must be 2-D, got shape {value.shape}")
        node = Node("const", value, (), False, None)
        self.nodes.append(node)
        return node

    def param(self, p: ParamTensor) -> Node:
        """Leaf bound to a trainable tensor; one leaf per tensor per graph."""
        leaf = self._param_leaves.get(id(p))
        if leaf is None:
            value = p.value
            if value.dtype != self.dtype:
                value = value.astype(self.dtype)
            leaf = Node("param", value, (), True, None)
            self.nodes.append(leaf)
            self._param_leaves[id(p)] = (p, leaf)
            return leaf
        return leaf[1]

    # -- primitives ------------------------------------------------------

    def gemm(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"gemm: inner dimensions differ: {a.shape} x {b.shape}")
        out = a.value @ b.value

        def backward(g):
            if a.needs_grad:
                _acc(a, g @ b.value.T)
            if b.needs_grad:
                _acc(b, a.value.T @ g)

        return self._register("gemm", out, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        out = np.ascontiguousarray(a.value.T)

        def backward(g):
            _acc(a, g.T)

        return self._register("transpose", out, (a,), backward)

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape("add", a, b)
        out = a.value + b.value

        def backward(g):
            if a.needs_grad:
                _acc(a, g)
            if b.needs_grad:
                _acc(b, g)

        return self._register("add", out, (a, b), backward)

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape("sub", a, b)
        out = a.value - b.value

        def backward(g):
            if a.needs_grad:
                _acc(a, g)
            if b.needs_grad:
                _acc(b, -g)

        return self._register("sub", out, (a, b), backward)

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape("mul", a, b)
        out = a.value * b.value

        def backward(g):
            if a.needs_grad:
                _acc(a, g * b.value)
            if b.needs_grad:
                _acc(b, g * a.value)

        return self._register("mul", out, (a, b), backward)

    def add_bias(self, a: Node, b: Node) -> Node:
        """a + b with b a (rows, 1) column broadcast over a's columns."""
        if b.shape != (a.shape[0], 1):
            raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {a.shape}")
        out = a.value + b.value

        def backward(g):
            if a.needs_grad:
                _acc(a, g)
            if b.needs_grad:
                _acc(b, g.sum(axis=1, keepdims=True))

        return self._register("add_bias", out, (a, b), backward)

    def scale(self, a: Node, s: float) -> Node:
        s = float(s)
        out = a.value * s

        def backward(g):
            _acc(a, g * s)

        return self._register("scale", out, (a,), backward)

    def sigmoid(self, a: Node) -> Node:
        out = _stable_sigmoid(a.value)

        def backward(g):
            _acc(a, g * out * (1.0 - out))

        return self._register("sigmoid", out, (a,), backward)

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)

        def backward(g):
            _acc(a, g * (1.0 - out * out))

        return self._register("tanh", out, (a,), backward)

    def relu(self, a: Node) -> Node:
        out = np.maximum(a.value, 0.0)

        def backward(g):
            _acc(a, g * (a.value > 0))

        return self._register("relu", out, (a,), backward)

    def softmax_over_rows(self, a: Node) -> Node:
        """Normalize each column over its row entries (stabilized)."""
        v = a.value
        if v.size == 0:
            out = v.copy()
        else:
            z = v - v.max(axis=0, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=0, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=0, keepdims=True)
            _acc(a, out * (g - dot))

        return self._register("softmax_over_rows", out, (a,), backward)

    def concat_rows(self, parts) -> Node:
        parts = tuple(parts)
        cols = parts[0].shape[1]
        for p in parts:
            if p.shape[1] != cols:
                raise ShapeError(
                    f"concat_rows: column counts differ: {[p.shape for p in parts]}"
                )
        out = np.concatenate([p.value for p in parts], axis=0)

        def backward(g):
            row = 0
            for p in parts:
                r = p.shape[0]
                if p.needs_grad:
                    _acc(p, g[row : row + r, :])
                row += r

        return self._register("concat_rows", out, parts, backward)

    def concat_cols(self, parts) -> Node:
        parts = tuple(parts)
        rows = parts[0].shape[0]
        for p in parts:
            if p.shape[0] != rows:
                raise ShapeError(
                    f"concat_cols: row counts differ: {[p.shape for p in parts]}"
                )
        out = np.concatenate([p.value for p in parts], axis=1)

        def backward(g):
            col = 0
            for p in parts:
                c = p.shape[1]
                if p.needs_grad:
                    _acc(p, g[:, col : col + c])
                col += c

        return self._register("concat_cols", out, parts, backward)

    def max_pool_time(self, a: Node) -> Node:
        """Per-row maximum over the time axis; ties route gradient to the
        first maximal position."""
        if a.shape[1] == 0:
            raise ShapeError("max_pool_time: empty sequence")
        idx = np.argmax(a.value, axis=1)
        out = a.value[np.arange(a.shape[0]), idx].reshape(-1, 1)

        def backward(g):
            da = np.zeros_like(a.value)
            da[np.arange(a.shape[0]), idx] = g[:, 0]
            _acc(a, da)

        return self._register("max_pool_time", out, (a,), backward)

    def conv1d_bank(self, seq: Node, weights, biases, widths) -> Node:
        """Multi-width same-padded 1-D convolution bank with fused ReLU.

        ``weights[i]`` is (channels, widths[i]*f) and ``biases[i]`` is
        (channels, 1); outputs are feature-concatenated.
        """
        widths = tuple(widths)
        f = seq.shape[0]
        for w_node, b_node, w in zip(weights, biases, widths):
            if w % 2 != 1:
                raise ConfigError(f"conv1d_bank: widths must be odd, got {w}")
            c = w_node.shape[0]
            if c == 0:
                raise ConfigError("conv1d_bank: zero output channels")
            if w_node.shape[1] != w * f:
                raise ShapeError(
                    f"conv1d_bank: weight {w_node.shape} does not match width {w} x features {f}"
                )
            if b_node.shape != (c, 1):
                raise ShapeError(f"conv1d_bank: bias {b_node.shape} must be ({c}, 1)")
        backend = kernels.active()
        w_vals = [w.value for w in weights]
        b_vals = [b.value for b in biases]
        out, cache = backend.conv_bank_forward(seq.value, w_vals, b_vals, widths)
        inputs = (seq, *weights, *biases)

        def backward(g):
            dseq, dws, dbs = backend.conv_bank_backward(g, cache)
            if seq.needs_grad:
                _acc(seq, dseq)
            for w_node, dw in zip(weights, dws):
                if w_node.needs_grad:
                    _acc(w_node, dw)
            for b_node, db in zip(biases, dbs):
                if b_node.needs_grad:
                    _acc(b_node, db)

        return self._register("conv1d_bank", out, inputs, backward)

    def lstm(self, seq: Node, wx: Node, wh: Node, b: Node) -> Node:
        """Unidirectional LSTM over the columns of ``seq``; zero initial state."""
        f, m = seq.shape
        if m < 1:
            raise ShapeError("lstm: empty sequence")
        h = wh.shape[1]
        if wx.shape != (4 * h, f) or wh.shape != (4 * h, h) or b.shape != (4 * h, 1):
            raise ShapeError(
                f"lstm: inconsistent shapes seq={seq.shape} wx={wx.shape} "
                f"wh={wh.shape} b={b.shape}"
            )
        backend = kernels.active()
        out, cache = backend.lstm_forward(seq.value, wx.value, wh.value, b.value)

        def backward(g):
            dseq, dwx, dwh, db = backend.lstm_backward(g, cache)
            if seq.needs_grad:
                _acc(seq, dseq)
            if wx.needs_grad:
                _acc(wx, dwx)
            if wh.needs_grad:
                _acc(wh, dwh)
            if b.needs_grad:
                _acc(b, db)

        return self._register("lstm", out, (seq, wx, wh, b), backward)

    def dense(self, x: Node, w: Node, b: Node, activation: str = "none") -> Node:
        """activation(w @ x + b), column-wise."""
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"dense: unknown activation {activation!r}")
        out = self.add_bias(self.gemm(w, x), b)
        if activation == "tanh":
            out = self.tanh(out)
        elif activation == "relu":
            out = self.relu(out)
        elif activation == "sigmoid":
            out = self.sigmoid(out)
        return out

    def sum_all(self, a: Node) -> Node:
        out = np.array([[a.value.sum()]], dtype=self.dtype)

        def backward(g):
            _acc(a, np.full_like(a.value, g[0, 0]))

        return self._register("sum_all", out, (a,), backward)

    def mean_scalars(self, parts) -> Node:
        parts = tuple(parts)
        for p in parts:
            if p.shape != (1, 1):
                raise ShapeError(f"mean_scalars: non-scalar input of shape {p.shape}")
        out = np.array(
            [[sum(float(p.value[0, 0]) for p in parts) / len(parts)]], dtype=self.dtype
        )
        inv = 1.0 / len(parts)

        def backward(g):
            for p in parts:
                if p.needs_grad:
                    _acc(p, g * inv)

        return self._register("mean_scalars", out, parts, backward)

    def nll(self, probs: Node, index: int) -> Node:
        """Negative log of one probability entry of a (k, 1) column.

        Probabilities at or below 1e-12 are clamped (with a warning) so the
        loss stays finite.
        """
        k = probs.shape[0]
        if not 0 <= index < k:
            raise ShapeError(f"nll: index {index} out of range for {k} entries")
        p = float(probs.value[index, 0])
        clamped = max(p, 1e-12)
        if p < 1e-12:
            log.warning("nll: probability %.3e clamped to 1e-12", p)
        out = np.array([[-np.log(clamped)]], dtype=self.dtype)

        def backward(g):
            d = np.zeros_like(probs.value)
            d[index, 0] = -g[0, 0] / clamped
            _acc(probs, d)

        return self._register("nll", out, (probs,), backward)

    # -- backward --------------------------------------------------------

    def backward(self, loss: Node):
        """Reverse sweep from a scalar loss; adds into ParamTensor.gradient."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones((1, 1), dtype=self.dtype)
        for n in reversed(self.nodes):
            if n.grad is not None and n._backward is not None:
                n._backward(n.grad)
        for p, leaf in self._param_leaves.values():
            if leaf.grad is not None:
                p.gradient += leaf.grad.astype(p.gradient.dtype, copy=False)

    def _same_shape(self, op, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")
