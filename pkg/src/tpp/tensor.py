"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable primitive records a node on a process-global tape
(a Wengert list: append order is topological order). ``backward`` walks
the tape in strict reverse append order, propagating cotangents.

Contracts the rest of the package relies on:

* all data is float64; results are deterministic for a fixed op sequence;
* leaf tensors with ``requires_grad=True`` accumulate into ``.grad``
  across ``backward`` calls until the grad is explicitly zeroed;
* tensors with ``requires_grad=False`` never receive a grad buffer, and
  no vector-Jacobian product is ever evaluated for them (frozen
  parameters cost nothing beyond the forward pass);
* an op records a node only if at least one input is grad-relevant, so
  subgraphs built purely from frozen values stay off the tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ArgumentError, ShapeError, StateError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """One recorded primitive: parent tensors plus a vector-Jacobian product.

    ``vjp(g)`` returns one cotangent per parent (None for parents that do
    not need one). Saved activations live in the vjp closure and are freed
    when the tape is cleared.
    """

    __slots__ = ("parents", "vjp", "idx", "tape", "alive")

    def __init__(self, parents, vjp, idx, tape):
        self.parents = parents
        self.vjp = vjp
        self.idx = idx
        self.tape = tape
        self.alive = True


class Tape:
    """Append-only op record; cleared between training steps."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, parents, vjp) -> Node:
        node = Node(parents, vjp, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        """Free all saved activations; recorded results can no longer backprop."""
        for node in self.nodes:
            node.alive = False
            node.vjp = None
            node.parents = ()
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager: ops inside record nothing on the tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """n-dimensional float64 array with optional grad and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basics ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _needs_grad(self) -> bool:
        # grad-relevant: a trainable leaf, or the output of a recorded op
        return (self.node is not None) or self.requires_grad

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append("taped")
        tag = (" " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={list(self.shape)}{tag})"

    # -- operators --------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Attach a tape node if recording is on and any parent is grad-relevant."""
    if _GRAD_ENABLED and any(p._needs_grad() for p in parents):
        out.node = _TAPE.record(parents, vjp)
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a cotangent down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {list(a.shape)} and {list(b.shape)} are not broadcastable"
        ) from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(g, ash) if a._needs_grad() else None
        gb = _unbroadcast(g, bsh) if b._needs_grad() else None
        return ga, gb

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(g, ash) if a._needs_grad() else None
        gb = -_unbroadcast(g, bsh) if b._needs_grad() else None
        return ga, gb

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(g * bd, ash) if a._needs_grad() else None
        gb = _unbroadcast(g * ad, bsh) if b._needs_grad() else None
        return ga, gb

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    # division by zero propagates as +-inf by design
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / bd, ash) if a._needs_grad() else None
            gb = _unbroadcast(-g * ad / (bd * bd), bsh) if b._needs_grad() else None
        return ga, gb

    return _record(out, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = Tensor(x.data * s)

    def vjp(g):
        return (g * s,)

    return _record(out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), vjp)


# -- shape ops ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul: operands must have rank >= 2, got {list(a.shape)} and {list(b.shape)}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for {list(a.shape)} @ {list(b.shape)}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dimensions not broadcastable for {list(a.shape)} @ {list(b.shape)}"
        ) from None
    out = Tensor(np.matmul(a.data, b.data))
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = gb = None
        if a._needs_grad():
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ash)
        if b._needs_grad():
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bsh)
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    out = Tensor(np.reshape(x.data, shape))

    def vjp(g):
        return (np.reshape(g, old),)

    return _record(out, (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i, t in enumerate(tensors):
            if t._needs_grad():
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _record(out, tensors, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    x = _as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {list(x.shape)}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl])
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        gx[sl] = g
        return (gx,)

    return _record(out, (x,), vjp)


def index_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a [N, d] tensor; idx may be any integer array shape."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), vjp)


def take_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample token gather: x [B, N, d], idx [B, K] -> [B, K, d]."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(
            f"take_tokens: expected x [B,N,d] and idx [B,K], got {list(x.shape)} and {list(idx.shape)}"
        )
    batch = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[batch, idx])
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        np.add.at(gx, (batch, idx), g)
        return (gx,)

    return _record(out, (x,), vjp)


def scatter_tokens(visible: Tensor, idx: np.ndarray, fill: Tensor, num_tokens: int) -> Tensor:
    """Place per-sample tokens back into a full sequence.

    visible [B, V, d] goes to positions idx [B, V]; every other position
    receives the shared `fill` token (shape [d]). Returns [B, num_tokens, d].
    """
    visible, fill = _as_tensor(visible), _as_tensor(fill)
    idx = np.asarray(idx, dtype=np.intp)
    bsz, nvis, dim = visible.shape
    if fill.data.reshape(-1).shape[0] != dim:
        raise ShapeError(f"scatter_tokens: fill has {fill.size} values, expected {dim}")
    batch = np.arange(bsz)[:, None]
    data = np.tile(fill.data.reshape(1, 1, dim), (bsz, num_tokens, 1))
    data[batch, idx] = visible.data
    out = Tensor(data)
    filled = np.ones((bsz, num_tokens), dtype=bool)
    filled[batch, idx] = False

    def vjp(g):
        gvis = g[batch, idx] if visible._needs_grad() else None
        gfill = None
        if fill._needs_grad():
            gfill = g[filled].sum(axis=0).reshape(fill.shape)
        return gvis, gfill

    return _record(out, (visible, fill), vjp)


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    xshape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xshape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xshape).copy(),)

    return _record(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalization and attention ----------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-last-axis normalization with population (biased) variance."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ArgumentError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape [{d}], got {list(gamma.shape)} and {list(beta.shape)}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)  # divide by d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    gdat = gamma.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if gamma._needs_grad():
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta._needs_grad():
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x._needs_grad():
            dxhat = g * gdat
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), vjp)


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Stable softmax of x / temperature along `axis` (rows sum to 1)."""
    x = _as_tensor(x)
    if temperature <= 0:
        raise ArgumentError(f"softmax: temperature must be > 0, got {temperature}")
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return ((p * (g - inner)) / temperature,)

    return _record(out, (x,), vjp)


# -- losses ---------------------------------------------------------------


def mse_masked(pred: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked positions only.

    pred/target are [..., N, D]; mask is a boolean [..., N] selecting which
    positions (patches) contribute. Values at unmasked positions never
    influence the result.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse_masked: pred {list(pred.shape)} and target {list(target.shape)} differ"
        )
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(
            f"mse_masked: mask {list(mask.shape)} must match positions {list(pred.shape[:-1])}"
        )
    count = int(mask.sum())
    if count == 0:
        raise ArgumentError("mse_masked: empty mask, average is undefined")
    denom = count * pred.shape[-1]
    diff = (pred.data - target.data) * mask[..., None]
    out = Tensor(np.array((diff * diff).sum() / denom))

    def vjp(g):
        base = (2.0 / denom) * diff * g
        gp = base if pred._needs_grad() else None
        gt = -base if target._needs_grad() else None
        return gp, gt

    return _record(out, (pred, target), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; classes along the last axis.

    labels holds integer class indices with shape logits.shape[:-1].
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels {list(labels.shape)} must match {list(logits.shape[:-1])}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat_logp = logp.reshape(-1, logits.shape[-1])
    flat_labels = labels.reshape(-1)
    n = flat_labels.shape[0]
    out = Tensor(np.array(-flat_logp[np.arange(n), flat_labels].mean()))

    def vjp(g):
        p = np.exp(flat_logp)
        p[np.arange(n), flat_labels] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _record(out, (logits,), vjp)


def soft_cross_entropy(teacher_probs, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """-sum(p_teacher * log softmax(student / T)), averaged over leading dims.

    The teacher distribution is treated as a constant (no gradient flows
    to it); only the student logits are differentiated.
    """
    if temperature <= 0:
        raise ArgumentError(f"soft_cross_entropy: temperature must be > 0, got {temperature}")
    student_logits = _as_tensor(student_logits)
    pt = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if pt.shape != student_logits.shape:
        raise ShapeError(
            f"soft_cross_entropy: teacher {list(pt.shape)} and student {list(student_logits.shape)} differ"
        )
    s = student_logits.data / temperature
    z = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    k = student_logits.shape[-1]
    n = student_logits.data.size // k
    out = Tensor(np.array(-(pt * logp).sum() / n))

    def vjp(g):
        ps = np.exp(logp)
        pt_sum = pt.sum(axis=-1, keepdims=True)
        return ((g / (n * temperature)) * (ps * pt_sum - pt),)

    return _record(out, (student_logits,), vjp)


def dice_loss(probs: Tensor, target: Tensor, smooth: float = 1e-5) -> Tensor:
    """1 - (2*sum(p*q) + s) / (sum(p) + sum(q) + s) on foreground probabilities."""
    probs, target = _as_tensor(probs), _as_tensor(target)
    if probs.shape != target.shape:
        raise ShapeError(
            f"dice_loss: probs {list(probs.shape)} and target {list(target.shape)} differ"
        )
    inter = tsum(mul(probs, target))
    total = add(tsum(probs), tsum(target))
    ratio = div(add(scale(inter, 2.0), smooth), add(total, smooth))
    return sub(1.0, ratio)


# -- backward -----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d loss / d leaf into the grads of trainable leaves.

    Grads accumulate across calls until explicitly zeroed. The tape stays
    intact, so calling backward twice doubles the grads.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ArgumentError("backward: loss must be a scalar Tensor")
    node = loss.node
    if node is None:
        raise StateError("backward: loss is not attached to the tape")
    if not node.alive:
        raise StateError("backward: tape was cleared; cannot backpropagate")
    tape_nodes = node.tape.nodes
    cot: dict[int, np.ndarray] = {node.idx: np.ones_like(loss.data)}
    for i in range(node.idx, -1, -1):
        g = cot.pop(i, None)
        if g is None:
            continue
        n = tape_nodes[i]
        grads = n.vjp(g)
        for parent, pg in zip(n.parents, grads):
            if pg is None:
                continue
            if parent.node is not None:
                j = parent.node.idx
                prev = cot.get(j)
                cot[j] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
