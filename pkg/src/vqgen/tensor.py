"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray plus, when it was produced by an operation, the
parent tensors and a closure that maps the upstream gradient to gradients
for each parent. backward() walks the graph once in reverse topological
order, keeps per-call adjoint buffers, and accumulates into .grad only on
leaves. Calling backward twice on the same graph therefore adds the same
gradient twice.

Every operation checks its output for NaN/Inf and raises NonFiniteError
naming the op, so numerical blowups surface at the op that caused them
instead of corrupting a later step.

All data is float64. Integer inputs (token ids, targets) are passed as
plain numpy arrays, never as Tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, NonFiniteError, ShapeError

Array = np.ndarray

# Large negative fill for masked attention logits. exp(-1e9) underflows to
# exactly 0.0 in float64, so masked positions get weight 0, not "almost 0".
MASK_FILL_VALUE = -1e9


def _check_finite(arr: Array, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the autodiff graph. Leaves may require gradients."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    # ---- introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # ---- graph construction ----

    @staticmethod
    def _make(
        data: Array,
        parents: tuple["Tensor", ...],
        vjp: Callable[[Array], tuple[Array | None, ...]],
        op: str,
    ) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    # ---- backward ----

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        Adjoint buffers live only for the duration of this call, so a second
        backward on the same output adds the same contribution again.
        """
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without gradient requires a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
                )

        topo = self._topo_order()
        adjoint: dict[int, Array] = {id(self): grad}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad = node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"vjp produced grad shape {pg.shape} for parent shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS; recursion would overflow on long unrolled graphs.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return topo

    # ---- elementwise arithmetic ----

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        try:
            data = a.data + b.data
        except ValueError as exc:
            raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

        def vjp(g: Array):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return Tensor._make(data, (a, b), vjp, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        try:
            data = a.data - b.data
        except ValueError as exc:
            raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

        def vjp(g: Array):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return Tensor._make(data, (a, b), vjp, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        try:
            data = a.data * b.data
        except ValueError as exc:
            raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

        def vjp(g: Array):
            return (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )

        return Tensor._make(data, (a, b), vjp, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                data = a.data / b.data
        except ValueError as exc:
            raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

        def vjp(g: Array):
            return (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            )

        return Tensor._make(data, (a, b), vjp, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        a = self

        def vjp(g: Array):
            return (-g,)

        return Tensor._make(-a.data, (a,), vjp, "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        n = float(exponent)
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data**n

        def vjp(g: Array):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g * n * a.data ** (n - 1.0),)

        return Tensor._make(data, (a,), vjp, "pow")

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def vjp(g: Array):
            return (g * data,)

        return Tensor._make(data, (a,), vjp, "exp")

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.log(a.data)

        def vjp(g: Array):
            return (g / a.data,)

        return Tensor._make(data, (a,), vjp, "log")

    # ---- matmul ----

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul requires 2D+ operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        try:
            data = a.data @ b.data
        except ValueError as exc:
            raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from exc

        def vjp(g: Array):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            return ga, gb

        return Tensor._make(data, (a, b), vjp, "matmul")

    # ---- shape ops ----

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            data = a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc

        def vjp(g: Array):
            return (g.reshape(a.data.shape),)

        return Tensor._make(data, (a,), vjp, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if len(axes) != self.ndim:
            raise ShapeError(f"transpose: got {len(axes)} axes for ndim {self.ndim}")
        a = self
        inverse = tuple(np.argsort(axes))

        def vjp(g: Array):
            return (np.transpose(g, inverse),)

        return Tensor._make(np.transpose(a.data, axes), (a,), vjp, "transpose")

    def swap_axes(self, ax1: int, ax2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(*axes)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        a = self
        if axis < 0:
            axis += a.ndim
        if not (0 <= axis < a.ndim):
            raise ShapeError(f"narrow: axis {axis} out of range for shape {a.shape}")
        if start < 0 or start + length > a.shape[axis]:
            raise ShapeError(
                f"narrow: [{start}, {start + length}) out of range for size {a.shape[axis]}"
            )
        index = tuple(
            slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim)
        )
        data = a.data[index]

        def vjp(g: Array):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        return Tensor._make(data, (a,), vjp, "narrow")

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g: Array):
            return (_spread(g, a.data.shape, axis, keepdims),)

        return Tensor._make(np.asarray(data), (a,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else _axis_count(a.data.shape, axis)

        def vjp(g: Array):
            return (_spread(g, a.data.shape, axis, keepdims) / count,)

        return Tensor._make(np.asarray(data), (a,), vjp, "mean")

    # ---- nonlinearities ----

    def relu(self) -> "Tensor":
        a = self
        keep = a.data > 0
        data = np.where(keep, a.data, 0.0)

        def vjp(g: Array):
            return (g * keep,)

        return Tensor._make(data, (a,), vjp, "relu")

    def softmax(self, axis: int = -1) -> "Tensor":
        """Softmax along one axis, stabilized by max subtraction."""
        a = self
        if not (-a.ndim <= axis < a.ndim):
            raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def vjp(g: Array):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return Tensor._make(data, (a,), vjp, "softmax")

    def masked_fill(self, mask: Array, value: float) -> "Tensor":
        """Replace entries where mask is True with a constant.

        The constant fully replaces the input there, so no gradient flows
        through masked positions.
        """
        a = self
        mask = np.asarray(mask, dtype=bool)
        try:
            data = np.where(mask, np.float64(value), a.data)
        except ValueError as exc:
            raise ShapeError(
                f"masked_fill: mask {mask.shape} does not broadcast over {a.shape}"
            ) from exc

        def vjp(g: Array):
            return (_unbroadcast(np.where(mask, 0.0, g), a.data.shape),)

        return Tensor._make(data, (a,), vjp, "masked_fill")

    def detach(self) -> "Tensor":
        """Copy of this value cut out of the graph."""
        return Tensor(self.data.copy(), requires_grad=False)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _axis_count(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _spread(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g, shape).copy() if g.shape != shape else g * np.ones(shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


# ---- multi-input and structured ops ----


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along an existing axis; gradient splits back per input."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    parents = tuple(tensors)
    axis = axis % parents[0].ndim if axis < 0 else axis
    try:
        data = np.concatenate([t.data for t in parents], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in parents]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in parents]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        out = []
        for i, t in enumerate(parents):
            index = tuple(
                slice(offsets[i], offsets[i + 1]) if d == axis else slice(None)
                for d in range(g.ndim)
            )
            out.append(g[index])
        return tuple(out)

    return Tensor._make(data, parents, vjp, "concat")


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Look up rows of table (V, D) by integer ids of any shape.

    Output shape is ids.shape + (D,). Backward scatter-adds, so repeated
    ids accumulate their gradients.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"embedding id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    data = table.data[ids]

    def vjp(g: Array):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._make(data, (table,), vjp, "embedding")


def cross_entropy(logits: Tensor, targets: Array, ignore_id: int | None = None) -> Tensor:
    """Mean token-level cross entropy from raw logits.

    logits: (N, V) or (B, T, V); targets are integer ids shaped like the
    logits minus the class axis. Positions whose target equals ignore_id
    contribute nothing to the loss or gradient; the mean divides by the
    count of counted positions. All positions ignored is an error. Uses the
    log-sum-exp form, never materializing a softmax in the loss.
    """
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("cross_entropy targets must be integers")
    if logits.ndim == 3:
        if targets.shape != logits.shape[:2]:
            raise ShapeError(
                f"cross_entropy: targets {targets.shape} for logits {logits.shape}"
            )
        logits = logits.reshape(-1, logits.shape[-1])
        targets = targets.reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) or (B, T, V) logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: {targets.shape} targets for {logits.shape[0]} logit rows"
        )
    n, v = logits.shape
    if ignore_id is None:
        counted = np.ones(n, dtype=bool)
    else:
        counted = targets != ignore_id
    count = int(counted.sum())
    if count == 0:
        raise DataError("cross_entropy: every target is the ignore id")
    safe_targets = np.where(counted, targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= v:
        raise DataError(f"cross_entropy target out of range [0, {v})")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))  # (N,)
    logp_target = shifted[np.arange(n), safe_targets] - lse
    loss = -(logp_target * counted).sum() / count

    def vjp(g: Array):
        p = np.exp(shifted - lse[:, None])  # softmax rows, (N, V)
        p[np.arange(n), safe_targets] -= 1.0
        p *= (counted / count)[:, None]
        return (p * g,)

    return Tensor._make(np.asarray(loss), (logits,), vjp, "cross_entropy")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    pred_t, target_t = as_tensor(pred), as_tensor(target)
    if pred_t.shape != target_t.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred_t.shape} vs {target_t.shape}")
    diff = pred_t.data - target_t.data
    n = diff.size
    loss = float((diff * diff).sum() / n)

    def vjp(g: Array):
        base = (2.0 / n) * diff * g
        return base, -base

    return Tensor._make(np.asarray(loss), (pred_t, target_t), vjp, "mse_loss")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance.

    gain and bias are 1D of size equal to the last axis.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match feature dim {d}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed * gain + bias


def batch_stats_norm(x: Tensor, eps: float) -> tuple[Tensor, Array, Array]:
    """Normalize (B, F) by per-feature batch mean and population variance.

    Returns the normalized tensor plus plain-array batch mean and variance
    for running-statistic updates. Requires B >= 2; a single row has zero
    variance everywhere and normalizing it is meaningless.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch norm expects (B, F), got {x.shape}")
    if x.shape[0] < 2:
        raise DataError(f"batch norm needs batch size >= 2 in training, got {x.shape[0]}")
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed, mu.data.reshape(-1), var.data.reshape(-1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW layout.

    x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw), bias: (Cout,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} vs weight channels {cin_w}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel ({kh}, {kw}) too large for padded input ({hp}, {wp})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((b, cin, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    cols2 = cols.reshape(b, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols2).reshape(b, cout, ho, wo) + bias.data.reshape(1, cout, 1, 1)

    def vjp(g: Array):
        gmat = g.reshape(b, cout, ho * wo)
        gw = np.einsum("bij,bkj->ik", gmat, cols2).reshape(weight.data.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (wmat.T @ gmat).reshape(b, cin, kh, kw, ho, wo)
        gxp = np.zeros((b, cin, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), vjp, "conv2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Average pooling with square kernel and equal stride; dims must divide."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: ({h}, {w}) not divisible by {k}")
    data = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g: Array):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (b, c, h // k, k, w // k, k)
        ).reshape(b, c, h, w)
        return (gx.copy(),)

    return Tensor._make(data, (x,), vjp, "avg_pool2d")


def dropout(x: Tensor, p: float, gen: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p < 0 or p >= 1:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (gen.random(x.shape) >= p) / (1.0 - p)

    def vjp(g: Array):
        return (g * keep,)

    return Tensor._make(x.data * keep, (x,), vjp, "dropout")


# ---- optimization ----


class Adam:
    """Adam with bias correction; hyperparameters default to the training setup."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 0.003,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ShapeError("Adam received the same parameter twice")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise DataError(
                    f"optimizer step with missing grad on parameter {p.name or '<unnamed>'}"
                )
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, Array]:
        """Flat name -> array map of optimizer state, for checkpointing."""
        out: dict[str, Array] = {"t": np.asarray([self.t], dtype=np.float64)}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, Array]) -> None:
        self.t = int(arrays["t"][0])
        for i, p in enumerate(self.params):
            m = arrays[f"m{i}"]
            v = arrays[f"v{i}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ShapeError(
                    f"optimizer state {i} has shape {m.shape}, parameter has {p.data.shape}"
                )
            self.m[i] = m.astype(np.float64)
            self.v[i] = v.astype(np.float64)


# ---- gradient verification ----


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients against central differences.

    loss_fn rebuilds the scalar loss from the current parameter values on
    every call. Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Returns worst error overall, per-parameter worsts, and entries checked.
    When max_entries_per_param is set, a seeded choice of entries is checked
    instead of every one.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"grad_check loss must be scalar, got {loss.shape}")
    loss.backward()

    pick = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    per_param: dict[str, float] = {}
    worst = 0.0
    worst_at = ("", -1)
    checked = 0
    for name, p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = np.sort(pick.choice(n, size=max_entries_per_param, replace=False))
        else:
            idxs = np.arange(n)
        local_worst = 0.0
        for idx in idxs:
            original = flat[idx]
            flat[idx] = original + h
            up = loss_fn().data.item()
            flat[idx] = original - h
            down = loss_fn().data.item()
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            a = float(aflat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > local_worst:
                local_worst = rel
            if rel > worst:
                worst = rel
                worst_at = (name, int(idx))
        per_param[name] = local_worst
    return {
        "worst": worst,
        "worst_param": worst_at[0],
        "worst_index": worst_at[1],
        "per_param": per_param,
        "entries_checked": checked,
    }
