"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient and links to
the tensors it was computed from.  Calling :meth:`Tensor.backward` on a
scalar result walks the graph in reverse topological order and accumulates
``grad`` on every tensor that requires it.  Gradients accumulate across
calls; the training loop owns the reset.

Layout conventions: feature maps are channels-last ``(batch, h, w, c)`` and
convolution kernels are ``(kh, kw, cin, cout)``.  Fully connected inputs are
``(batch, features)``.

Everything differentiable here is checked against central finite differences
in the test suite; reductions use a fixed order so repeated runs at the same
thread count are bit-identical.
"""

import math

import numpy as np

from . import _kernels
from .errors import ContractError, NonFiniteError, ShapeError

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation finite-value checks (off by default for speed).

    Scalar losses are always checked; with checks enabled every operation
    validates its full output, turning any NaN/Inf into an immediate
    :class:`NonFiniteError` instead of a silently poisoned state.
    """
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _as_float_array(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        if not math.isfinite(self.item()):
            raise NonFiniteError("backward called on a non-finite loss")
        order = _toposort(self)
        # Each call contributes exactly one full gradient: propagate through
        # fresh per-call grads, then fold previously accumulated ones back in.
        previous = [(node, node.grad) for node in order if node.grad is not None]
        for node in order:
            node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        for node, old in previous:
            node.grad = old if node.grad is None else node.grad + old

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Reverse-mode evaluation order (iterative; graphs can be deep)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    if _DEBUG_CHECKS and not np.isfinite(data).all():
        raise NonFiniteError("operation produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * c)

    return _make(t.data * c, (t,), backward)


def tsum(t: Tensor) -> Tensor:
    def backward(g):
        if t.requires_grad:
            t._accumulate(np.full_like(t.data, g.reshape(-1)[0]))

    return _make(np.sum(t.data, keepdims=True).reshape(()), (t,), backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * mask)

    return _make(t.data * mask, (t,), backward)


def flatten(t: Tensor) -> Tensor:
    """Collapse all non-batch axes: (b, ...) -> (b, features)."""
    b = t.data.shape[0]
    shape = t.data.shape

    def backward(g):
        if t.requires_grad:
            t._accumulate(g.reshape(shape))

    return _make(np.ascontiguousarray(t.data).reshape(b, -1), (t,), backward)


# ---------------------------------------------------------------------------
# linear / convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b), x (batch, in), w (in, out), b (out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes incompatible: x {x.data.shape} vs w {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"bias shape {b.data.shape} does not match output width {w.data.shape[1]}")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(y, parents, backward)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, b: Tensor | None = None) -> Tensor:
    """Cross-correlation of NHWC input with (kh, kw, cin, cout) kernels."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.data.shape} and {k.data.shape}")
    bsz, h, w, cin = x.data.shape
    kh, kw, kcin, cout = k.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {k.data.shape}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"kernel {k.data.shape} larger than padded input {x.data.shape} (pad={pad})"
        )
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"bias shape {b.data.shape} does not match output channels {cout}")

    cols, oh, ow = _kernels.im2col(x.data, kh, kw, stride, pad)
    kmat = k.data.reshape(kh * kw * cin, cout)
    y = (cols @ kmat).reshape(bsz, oh, ow, cout)
    if b is not None:
        y += b.data

    def backward(g):
        g2 = g.reshape(bsz * oh * ow, cout)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if k.requires_grad:
            k._accumulate((cols.T @ g2).reshape(k.data.shape))
        if x.requires_grad:
            # Gradient wrt the input is a correlation of the (stride-dilated)
            # output gradient with the spatially flipped kernel, with the
            # kernel's in/out channel axes swapped.
            gd = _kernels.dilate2d(g.reshape(bsz, oh, ow, cout), stride)
            gd = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            kflip = np.ascontiguousarray(
                k.data[::-1, ::-1].transpose(0, 1, 3, 2)
            ).reshape(kh * kw * cout, cin)
            dcols, gh, gw = _kernels.im2col(gd, kh, kw, 1, 0)
            gxp = (dcols @ kflip).reshape(bsz, gh, gw, cin)
            # gxp covers padded-input rows [0, (oh-1)*stride + kh); rows the
            # windows never reached (stride remainder) get zero gradient.
            if gh < h + 2 * pad or gw < w + 2 * pad:
                full = np.zeros((bsz, h + 2 * pad, w + 2 * pad, cin), dtype=x.data.dtype)
                full[:, :gh, :gw, :] = gxp
                gxp = full
            gx = gxp[:, pad : pad + h, pad : pad + w, :]
            x._accumulate(np.ascontiguousarray(gx))

    parents = (x, k) if b is None else (x, k, b)
    return _make(y, parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def max_pool2d(t: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over non-overlapping windows (trailing rows/cols dropped)."""
    stride = window if stride is None else stride
    if stride != window:
        raise ContractError("max_pool2d supports stride == window")
    b, h, w, c = t.data.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} exceeds input {t.data.shape}")
    oh, ow = h // window, w // window
    crop = t.data[:, : oh * window, : ow * window, :]
    win = crop.reshape(b, oh, window, ow, window, c).transpose(0, 1, 3, 5, 2, 4)
    win = np.ascontiguousarray(win).reshape(b, oh, ow, c, window * window)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not t.requires_grad:
            return
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gcrop = (
            gwin.reshape(b, oh, ow, c, window, window)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, oh * window, ow * window, c)
        )
        gx = np.zeros_like(t.data)
        gx[:, : oh * window, : ow * window, :] = gcrop
        t._accumulate(gx)

    return _make(y, (t,), backward)


def _adaptive_bounds(size, target):
    starts = (np.arange(target) * size) // target
    ends = -(-(np.arange(1, target + 1) * size) // target)  # ceil division
    return starts, ends


def avg_pool2d(t: Tensor, output_size) -> Tensor:
    """Adaptive average pooling to a target spatial size (NHWC)."""
    if isinstance(output_size, int):
        output_size = (output_size, output_size)
    th, tw = output_size
    b, h, w, c = t.data.shape
    if th > h or tw > w or th < 1 or tw < 1:
        raise ShapeError(f"target {output_size} invalid for input {t.data.shape}")
    hs, he = _adaptive_bounds(h, th)
    ws, we = _adaptive_bounds(w, tw)
    y = np.empty((b, th, tw, c), dtype=t.data.dtype)
    for i in range(th):
        for j in range(tw):
            y[:, i, j, :] = t.data[:, hs[i] : he[i], ws[j] : we[j], :].mean(axis=(1, 2))

    def backward(g):
        if not t.requires_grad:
            return
        gx = np.zeros_like(t.data)
        for i in range(th):
            for j in range(tw):
                area = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[:, hs[i] : he[i], ws[j] : we[j], :] += (g[:, i : i + 1, j : j + 1, :] / area)
        t._accumulate(gx)

    return _make(y, (t,), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    Stable under large logits (max subtraction).  Gradient flows to
    ``logits`` only.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"expected (batch, classes) logits, got {logits.data.shape}")
    bsz, k = logits.data.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = -logp[np.arange(bsz), labels].mean()
    if not math.isfinite(loss):
        raise NonFiniteError("cross-entropy produced a non-finite loss")

    def backward(g):
        if not logits.requires_grad:
            return
        grad = ez / denom
        grad[np.arange(bsz), labels] -= 1.0
        logits._accumulate(grad * (g.reshape(-1)[0] / bsz))

    return _make(np.asarray(loss, dtype=logits.data.dtype).reshape(()), (logits,), backward)
