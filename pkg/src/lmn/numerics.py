"""Dense float64 math with tape-based reverse-mode gradients.

Exactly the operations the rest of the package needs: matrix products,
affine layers, ReLU/sigmoid, row softmax, gathers, masked reductions,
Smooth-L1 and binary cross-entropy losses, plus a central-difference
gradient checker.  A :class:`GradTape` records one backward closure per
op and replays them in strict reverse order of recording.  Parameters
are long-lived leaf :class:`Tensor` objects; activations are per-forward
temporaries.  Everything is float64; 32-bit arrays only appear inside
the scaling benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)


def check_finite(a: Array, what: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{what} contains NaN or Inf")


def as_matrix(data, rows: int | None = None, cols: int | None = None,
              checked: bool = True) -> Array:
    """C-contiguous float64 matrix, with shape/finiteness validation."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if rows is not None:
        if cols is None or a.size != rows * cols:
            raise ShapeError(f"matrix data of size {a.size} != {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    if checked:
        check_finite(a, "matrix")
    return a


class Tensor:
    """A float64 array with an optional accumulated gradient."""

    __slots__ = ("value", "grad", "name", "touched_rows")

    def __init__(self, value, name: str = "", checked: bool = False):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        if checked:
            check_finite(self.value, name or "tensor")
        self.grad: Array | None = None
        self.name = name
        # When not None, row-gather ops append the unique row ids they
        # touch here; sparse optimizers consume and clear the list.
        self.touched_rows: list[Array] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def add_grad(self, g: Array) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != value shape {self.value.shape}"
                + (f" for {self.name}" if self.name else "")
            )
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None
        if self.touched_rows is not None:
            self.touched_rows.clear()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label} shape={self.value.shape}"


class GradTape:
    """Backward closures in recording order, replayed strictly reversed."""

    __slots__ = ("_ops",)

    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []

    def record(self, backward: Callable[[], None]) -> None:
        self._ops.append(backward)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ContractError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._ops):
            fn()


def _val(x) -> Array:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(tape: GradTape | None, a, b) -> Tensor:
    """C = A @ B; backward dA = dC Bt, dB = At dC."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    out = Tensor(av @ bv)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Tensor):
                a.add_grad(g @ bv.T)
            if isinstance(b, Tensor):
                b.add_grad(av.T @ g)
        tape.record(backward)
    return out


def matmul_nt(tape: GradTape | None, a, b) -> Tensor:
    """C = A @ Bt for row-major key tables; backward dA = dC B, dB = dCt A."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"matmul_nt: {av.shape} @ {bv.shape}^T")
    out = Tensor(av @ bv.T)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Tensor):
                a.add_grad(g @ bv)
            if isinstance(b, Tensor):
                b.add_grad(g.T @ av)
        tape.record(backward)
    return out


def add(tape: GradTape | None, a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: {av.shape} vs {bv.shape}")
    out = Tensor(av + bv)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Tensor):
                a.add_grad(g)
            if isinstance(b, Tensor):
                b.add_grad(g)
        tape.record(backward)
    return out


def scale(tape: GradTape | None, x, c: float) -> Tensor:
    xv = _val(x)
    out = Tensor(xv * c)
    if tape is not None:
        def backward():
            g = out.grad
            if g is not None and isinstance(x, Tensor):
                x.add_grad(g * c)
        tape.record(backward)
    return out


def add_bias(tape: GradTape | None, x, b) -> Tensor:
    """Rows of x plus a bias vector."""
    xv, bv = _val(x), _val(b)
    if xv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != bv.shape[0]:
        raise ShapeError(f"add_bias: {xv.shape} + {bv.shape}")
    out = Tensor(xv + bv[None, :])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(x, Tensor):
                x.add_grad(g)
            if isinstance(b, Tensor):
                b.add_grad(g.sum(axis=0))
        tape.record(backward)
    return out


def relu(tape: GradTape | None, x) -> Tensor:
    xv = _val(x)
    out = Tensor(np.maximum(xv, 0.0))
    if tape is not None:
        def backward():
            g = out.grad
            if g is not None and isinstance(x, Tensor):
                x.add_grad(g * (xv > 0.0))
        tape.record(backward)
    return out


def sigmoid(tape: GradTape | None, x) -> Tensor:
    xv = _val(x)
    with np.errstate(over="ignore"):
        p = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-xv)),
                     np.exp(xv) / (1.0 + np.exp(xv)))
    out = Tensor(p)
    if tape is not None:
        def backward():
            g = out.grad
            if g is not None and isinstance(x, Tensor):
                x.add_grad(g * p * (1.0 - p))
        tape.record(backward)
    return out


def concat_cols(tape: GradTape | None, parts: Sequence) -> Tensor:
    vals = [_val(p) for p in parts]
    if not vals or any(v.ndim != 2 for v in vals):
        raise ShapeError("concat_cols needs 2-D parts")
    rows = vals[0].shape[0]
    if any(v.shape[0] != rows for v in vals):
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate(vals, axis=1))
    if tape is not None:
        widths = [v.shape[1] for v in vals]
        def backward():
            g = out.grad
            if g is None:
                return
            at = 0
            for part, w in zip(parts, widths):
                if isinstance(part, Tensor):
                    part.add_grad(g[:, at:at + w])
                at += w
        tape.record(backward)
    return out


def gather_rows(tape: GradTape | None, table, idx) -> Tensor:
    """Rows of a (N, d) table at integer ids of any shape.

    Output has shape ``idx.shape + (d,)``; backward scatter-adds into the
    touched rows only.
    """
    tv = _val(table)
    if tv.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {tv.shape}")
    ids = np.asarray(idx)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ContractError(
            f"gather_rows: id out of range [0, {tv.shape[0]}) in lookup"
        )
    out = Tensor(tv[ids])
    if tape is not None and isinstance(table, Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, ids.reshape(-1),
                      g.reshape(-1, tv.shape[1]))
            if table.touched_rows is not None:
                table.touched_rows.append(np.unique(ids))
        tape.record(backward)
    return out


def repeat_rows(tape: GradTape | None, x, reps: int) -> Tensor:
    """Each row repeated ``reps`` times; backward sums each block."""
    xv = _val(x)
    if xv.ndim != 2:
        raise ShapeError(f"repeat_rows: expected (B, d), got {xv.shape}")
    out = Tensor(np.repeat(xv, reps, axis=0))
    if tape is not None and isinstance(x, Tensor):
        def backward():
            g = out.grad
            if g is not None:
                x.add_grad(g.reshape(xv.shape[0], reps, xv.shape[1]).sum(axis=1))
        tape.record(backward)
    return out


def softmax_rows(tape: GradTape | None, x) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[1] == 0:
        raise ContractError(f"softmax_rows: needs non-empty rows, got {xv.shape}")
    z = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    if tape is not None and isinstance(x, Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            dot = (g * p).sum(axis=1, keepdims=True)
            x.add_grad(p * (g - dot))
        tape.record(backward)
    return out


def softmax(tape: GradTape | None, v) -> Tensor:
    """Softmax of a vector; outputs sum to one within 1e-12."""
    vv = _val(v)
    if vv.ndim != 1 or vv.shape[0] == 0:
        raise ContractError("softmax requires a non-empty vector")
    check_finite(vv, "softmax input")
    as_row = _Reshaped(tape, v) if isinstance(v, Tensor) else vv[None, :]
    return _flatten(tape, softmax_rows(tape, as_row))


class _Reshaped(Tensor):
    """1-D tensor viewed as a single row, gradient routed back."""

    __slots__ = ("_src",)

    def __init__(self, tape: GradTape | None, src: Tensor):
        super().__init__(src.value[None, :])
        self._src = src
        if tape is not None:
            def backward():
                if self.grad is not None:
                    self._src.add_grad(self.grad[0])
            tape.record(backward)


def _flatten(tape: GradTape | None, row: Tensor) -> Tensor:
    out = Tensor(row.value.reshape(-1))
    if tape is not None:
        def backward():
            if out.grad is not None:
                row.add_grad(out.grad.reshape(row.value.shape))
        tape.record(backward)
    return out


def weighted_sum_rows(tape: GradTape | None, w, rows) -> Tensor:
    """out[p] = sum_k w[p, k] * rows[p, k, :]."""
    wv, rv = _val(w), _val(rows)
    if wv.ndim != 2 or rv.ndim != 3 or rv.shape[:2] != wv.shape:
        raise ShapeError(f"weighted_sum_rows: {wv.shape} vs {rv.shape}")
    out = Tensor(np.einsum("pk,pkd->pd", wv, rv))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(w, Tensor):
                w.add_grad(np.einsum("pd,pkd->pk", g, rv))
            if isinstance(rows, Tensor):
                rows.add_grad(wv[:, :, None] * g[:, None, :])
        tape.record(backward)
    return out


def masked_mean_pool(tape: GradTape | None, x, weights: Array, groups: int) -> Tensor:
    """Per-group weighted mean over consecutive row blocks.

    x is (groups * L, d); ``weights`` is a float 0/1 array of length
    groups * L.  Group g averages its rows with nonzero weight; an
    all-zero group yields the zero vector.
    """
    xv = _val(x)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if xv.ndim != 2 or w.shape[0] != xv.shape[0] or xv.shape[0] % groups:
        raise ShapeError(
            f"masked_mean_pool: rows {xv.shape} vs weights {w.shape} in {groups} groups"
        )
    span = xv.shape[0] // groups
    wg = w.reshape(groups, span)
    denom = np.maximum(wg.sum(axis=1), 1.0)
    pooled = np.einsum("gl,gld->gd", wg, xv.reshape(groups, span, -1)) / denom[:, None]
    out = Tensor(pooled)
    if tape is not None and isinstance(x, Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            scaled = g / denom[:, None]
            x.add_grad((wg[:, :, None] * scaled[:, None, :]).reshape(xv.shape))
        tape.record(backward)
    return out


def squeeze_col(tape: GradTape | None, x) -> Tensor:
    """(B, 1) column down to a (B,) vector."""
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[1] != 1:
        raise ShapeError(f"squeeze_col: expected (B, 1), got {xv.shape}")
    out = Tensor(xv[:, 0])
    if tape is not None and isinstance(x, Tensor):
        def backward():
            if out.grad is not None:
                x.add_grad(out.grad[:, None])
        tape.record(backward)
    return out


def masked_softmax_groups(tape: GradTape | None, scores, mask: Array,
                          groups: int) -> Tensor:
    """Per-group softmax over positions with nonzero mask.

    ``scores`` is (groups * L,); masked positions get weight exactly 0,
    and a fully-masked group yields all-zero weights (no softmax at all).
    """
    sv = _val(scores)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if sv.ndim != 1 or sv.shape != m.shape or sv.shape[0] % groups:
        raise ShapeError(
            f"masked_softmax_groups: scores {sv.shape} mask {m.shape} groups {groups}"
        )
    span = sv.shape[0] // groups
    z = sv.reshape(groups, span)
    mg = m.reshape(groups, span)
    with np.errstate(invalid="ignore"):
        gmax = np.where(mg, z, -np.inf).max(axis=1)
    safe_max = np.where(np.isfinite(gmax), gmax, 0.0)
    e = np.exp(np.where(mg, z - safe_max[:, None], -np.inf))
    denom = e.sum(axis=1)
    w = np.divide(e, denom[:, None], out=np.zeros_like(e), where=denom[:, None] > 0)
    out = Tensor(w.reshape(-1))
    if tape is not None and isinstance(scores, Tensor):
        def backward():
            g = out.grad
            if g is None:
                return
            gg = g.reshape(groups, span)
            dot = (gg * w).sum(axis=1, keepdims=True)
            scores.add_grad((w * (gg - dot)).reshape(-1))
        tape.record(backward)
    return out


def scale_rows_and_pool(tape: GradTape | None, x, w, groups: int) -> Tensor:
    """Per-group weighted sum with differentiable weights.

    x is (groups * L, d), w is (groups * L,); group g yields
    ``sum_t w[t] * x[t]`` over its block.
    """
    xv, wv = _val(x), _val(w)
    if xv.ndim != 2 or wv.ndim != 1 or wv.shape[0] != xv.shape[0] \
            or xv.shape[0] % groups:
        raise ShapeError(
            f"scale_rows_and_pool: rows {xv.shape} weights {wv.shape} groups {groups}"
        )
    span = xv.shape[0] // groups
    xg = xv.reshape(groups, span, -1)
    wg = wv.reshape(groups, span)
    out = Tensor(np.einsum("gl,gld->gd", wg, xg))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(w, Tensor):
                w.add_grad(np.einsum("gd,gld->gl", g, xg).reshape(-1))
            if isinstance(x, Tensor):
                x.add_grad((wg[:, :, None] * g[:, None, :]).reshape(xv.shape))
        tape.record(backward)
    return out


def rowwise_dot(tape: GradTape | None, a, b) -> Tensor:
    """out[p] = a[p] . b[p] for matching (P, d) operands."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape or av.ndim != 2:
        raise ShapeError(f"rowwise_dot: {av.shape} vs {bv.shape}")
    out = Tensor(np.einsum("pd,pd->p", av, bv))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Tensor):
                a.add_grad(g[:, None] * bv)
            if isinstance(b, Tensor):
                b.add_grad(g[:, None] * av)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _smooth_l1_elem(e: Array, beta: float) -> tuple[Array, Array]:
    quad = np.abs(e) < beta
    loss = np.where(quad, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    dloss = np.where(quad, e / beta, np.sign(e))
    return loss, dloss


def smooth_l1(tape: GradTape | None, a, b, beta: float = 1.0) -> Tensor:
    """Mean element-wise Smooth-L1 between two same-shape arrays.

    Quadratic inside |e| < beta, linear outside; the gradient is clipped
    to +-1 in the linear zone.
    """
    if beta <= 0:
        raise ContractError(f"smooth_l1: beta must be positive, got {beta}")
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"smooth_l1: {av.shape} vs {bv.shape}")
    e = av - bv
    loss, dloss = _smooth_l1_elem(e, beta)
    out = Tensor(np.asarray(loss.mean()))
    if tape is not None:
        inv = 1.0 / e.size
        def backward():
            g = out.grad
            if g is None:
                return
            base = g * dloss * inv
            if isinstance(a, Tensor):
                a.add_grad(base)
            if isinstance(b, Tensor):
                b.add_grad(-base)
        tape.record(backward)
    return out


def smooth_l1_weighted(tape: GradTape | None, a, b, weights: Array,
                       beta: float = 1.0) -> Tensor:
    """Position-weighted Smooth-L1: mean over rows with nonzero weight.

    Row p contributes ``weights[p] * mean_d(elem_loss(a[p]-b[p]))``; the
    total is divided by max(sum(weights), 1), so an all-zero weight
    vector yields exactly zero loss and zero gradients.
    """
    if beta <= 0:
        raise ContractError(f"smooth_l1_weighted: beta must be positive, got {beta}")
    av, bv = _val(a), _val(b)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape or av.ndim != 2 or w.shape[0] != av.shape[0]:
        raise ShapeError(
            f"smooth_l1_weighted: {av.shape} vs {bv.shape} with weights {w.shape}"
        )
    e = av - bv
    loss, dloss = _smooth_l1_elem(e, beta)
    denom = max(float(w.sum()), 1.0)
    out = Tensor(np.asarray((w * loss.mean(axis=1)).sum() / denom))
    if tape is not None:
        coef = w[:, None] / (denom * av.shape[1])
        def backward():
            g = out.grad
            if g is None:
                return
            base = g * dloss * coef
            if isinstance(a, Tensor):
                a.add_grad(base)
            if isinstance(b, Tensor):
                b.add_grad(-base)
        tape.record(backward)
    return out


BCE_CLAMP = 1e-7


def bce_loss(tape: GradTape | None, p, y) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    pv, yv = _val(p), np.asarray(_val(y), dtype=np.float64)
    if pv.shape != yv.shape or pv.ndim != 1:
        raise ShapeError(f"bce_loss: {pv.shape} vs {yv.shape}")
    clamped = np.clip(pv, BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = Tensor(np.asarray(
        -(yv * np.log(clamped) + (1.0 - yv) * np.log1p(-clamped)).mean()
    ))
    if tape is not None:
        inside = (pv > BCE_CLAMP) & (pv < 1.0 - BCE_CLAMP)
        def backward():
            g = out.grad
            if g is not None and isinstance(p, Tensor):
                dp = (clamped - yv) / (clamped * (1.0 - clamped) * pv.size)
                p.add_grad(g * dp * inside)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------


@dataclass
class MlpLayer:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor    # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1 \
                or self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"layer weight {self.weight.shape} vs bias {self.bias.shape}"
            )


@dataclass
class MlpParams:
    layers: list[MlpLayer]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("MLP needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"adjacent layer dims {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.w{i}", layer.weight
            yield f"{prefix}.b{i}", layer.bias


def mlp_init(dims: Sequence[int], rng: np.random.Generator,
             hidden_activation: str = RELU, name: str = "mlp") -> MlpParams:
    """Fan-in scaled uniform init; hidden layers activated, final identity."""
    if len(dims) < 2:
        raise ContractError("mlp_init needs at least in and out dims")
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        bound = 1.0 / np.sqrt(din)
        w = Tensor(rng.uniform(-bound, bound, size=(din, dout)), name=f"{name}.w{i}")
        b = Tensor(rng.uniform(-bound, bound, size=dout), name=f"{name}.b{i}")
        act = hidden_activation if i < len(dims) - 2 else IDENTITY
        layers.append(MlpLayer(w, b, act))
    return MlpParams(layers)


def mlp_forward(tape: GradTape | None, params: MlpParams, x) -> Tensor:
    """Layer-wise affine + activation; accepts a vector or a row batch."""
    xv = _val(x)
    vector_in = xv.ndim == 1
    h = _Reshaped(tape, x) if (vector_in and isinstance(x, Tensor)) else x
    if vector_in and not isinstance(x, Tensor):
        h = xv[None, :]
    if _val(h).shape[1] != params.in_dim:
        raise ShapeError(
            f"mlp_forward: input dim {_val(h).shape[1]} != layer dim {params.in_dim}"
        )
    for layer in params.layers:
        h = add_bias(tape, matmul(tape, h, layer.weight), layer.bias)
        if layer.activation == RELU:
            h = relu(tape, h)
    return _flatten(tape, h) if vector_in else h


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class BlockCheck:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    ok: bool


@dataclass
class FdReport:
    blocks: list[BlockCheck]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(b.ok for b in self.blocks)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    def format(self) -> str:
        lines = []
        for b in self.blocks:
            status = "OK" if b.ok else "FAIL"
            lines.append(
                f"{status:4s} {b.name:32s} max_rel_err={b.max_rel_err:.3e} "
                f"(analytic={b.analytic:+.6e} numeric={b.numeric:+.6e} @ {b.worst_index})"
            )
        verdict = "PASS" if self.ok else "FAIL"
        lines.append(f"{verdict}, max rel err {self.max_rel_err:.3e} "
                     f"(tolerance {self.tolerance:.1e})")
        return "\n".join(lines)


def finite_diff_check(loss_fn: Callable[[], float],
                      params: Mapping[str, Tensor],
                      epsilon: float = 1e-5,
                      tolerance: float = 1e-4) -> FdReport:
    """Central-difference check of analytic gradients, block by block.

    ``loss_fn`` evaluates the loss at the current parameter values and
    populates ``.grad`` on every tensor in ``params`` (running its own
    tape).  Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    for t in params.values():
        t.zero_grad()
    loss_a = float(loss_fn())
    loss_b = float(loss_fn())
    if loss_a != loss_b:
        raise ContractError(
            f"loss_fn is not deterministic ({loss_a!r} != {loss_b!r})"
        )
    analytic = {
        name: (np.zeros_like(t.value) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    # Note grads accumulated over the two calls; halve to undo.
    for g in analytic.values():
        g *= 0.5

    blocks = []
    for name, t in params.items():
        flat = t.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0
        worst_err = 0.0
        worst_num = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            up = float(loss_fn())
            flat[i] = keep - epsilon
            down = float(loss_fn())
            flat[i] = keep
            num = (up - down) / (2.0 * epsilon)
            err = abs(ana[i] - num) / max(1e-8, abs(ana[i]) + abs(num))
            if err >= worst_err:
                worst, worst_err, worst_num = i, err, num
        blocks.append(BlockCheck(
            name=name, max_rel_err=worst_err, worst_index=worst,
            analytic=float(ana[worst]), numeric=worst_num,
            ok=worst_err < tolerance,
        ))
    for t in params.values():
        t.zero_grad()
    return FdReport(blocks=blocks, tolerance=tolerance)
