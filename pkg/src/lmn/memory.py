"""The shared memory block.

Keys are factored into a row table and a column table of sqrt(n) entries
each; a slot (i, j) lives at flat index ``i * sqrt_n + j`` in the n-slot
value table.  Reading is: build a user-aware query, split it into a row
query and a column query, score both axes against their key tables
(Theta(sqrt(n) * d) multiply-adds per axis), broadcast-add the axis
scores into the flat grid, select the top-K slots, and return the
softmax-weighted sum of their value rows.  Writing happens through
gradient descent on a Smooth-L1 loss between the read vector and the
query.

``naive_read`` is the exact reference: it materialises the concatenated
2d-wide key table over all n slots and scores the concatenated query
against every slot, which the decomposed path must reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Protocol

import numpy as np

from . import _kernels as kernels
from .counters import score_madds
from .errors import ContractError, ShapeError
from .numerics import (
    GradTape,
    MlpParams,
    Tensor,
    add,
    check_finite,
    concat_cols,
    gather_rows,
    masked_mean_pool,
    matmul_nt,
    mlp_forward,
    mlp_init,
    repeat_rows,
    smooth_l1_weighted,
    softmax_rows,
    weighted_sum_rows,
    _Reshaped,
    _flatten,
    _val,
)

# Refuse to materialise full key tables beyond this many slots.
MEMORY_GUARD_SLOTS = 1 << 20


@dataclass(frozen=True)
class MemoryConfig:
    """Shape and loss settings of one memory block.

    ``sqrt_n`` is the per-axis key count, so the block holds
    ``sqrt_n ** 2`` value slots; ``k_top`` slots are read per query and
    ``alpha`` weighs the injection loss in the combined objective.
    """

    sqrt_n: int
    d: int
    k_top: int = 8
    heads: int = 1
    alpha: float = 0.1
    beta_smooth: float = 1.0

    @property
    def n(self) -> int:
        return self.sqrt_n * self.sqrt_n

    def validate(self) -> "MemoryConfig":
        if self.sqrt_n < 1:
            raise ContractError(f"sqrt_n must be >= 1, got {self.sqrt_n}")
        if self.d < 1:
            raise ContractError(f"d must be >= 1, got {self.d}")
        if not 1 <= self.k_top <= self.n:
            raise ContractError(
                f"k_top must be in [1, {self.n}], got {self.k_top}"
            )
        if self.heads < 1:
            raise ContractError(f"heads must be >= 1, got {self.heads}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta_smooth <= 0:
            raise ContractError(f"beta_smooth must be > 0, got {self.beta_smooth}")
        return self


@dataclass
class MemoryKeys:
    """Row and column key tables of one head, each (sqrt_n, d)."""

    row_keys: Tensor
    col_keys: Tensor

    def validate(self, config: MemoryConfig) -> "MemoryKeys":
        want = (config.sqrt_n, config.d)
        for name, t in (("row_keys", self.row_keys), ("col_keys", self.col_keys)):
            if t.shape != want:
                raise ShapeError(f"{name} shape {t.shape} != {want}")
            check_finite(t.value, name)
        return self


@dataclass
class MemoryValues:
    """The (n, d) value table; slot (i, j) sits at row i * sqrt_n + j."""

    table: Tensor

    def validate(self, config: MemoryConfig) -> "MemoryValues":
        if self.table.shape != (config.n, config.d):
            raise ShapeError(
                f"value table shape {self.table.shape} != {(config.n, config.d)}"
            )
        return self

    @staticmethod
    def flat_index(i: int, j: int, sqrt_n: int) -> int:
        return i * sqrt_n + j


@dataclass
class QueryNet:
    """Merge MLP (2d -> d) plus per-head row and column MLPs (d -> d)."""

    merge: MlpParams
    row: list[MlpParams]
    col: list[MlpParams]

    def validate(self, config: MemoryConfig) -> "QueryNet":
        if self.merge.in_dim != 2 * config.d or self.merge.out_dim != config.d:
            raise ShapeError(
                f"merge MLP {self.merge.in_dim}->{self.merge.out_dim}, "
                f"want {2 * config.d}->{config.d}"
            )
        if len(self.row) != config.heads or len(self.col) != config.heads:
            raise ShapeError(
                f"query nets for {len(self.row)}/{len(self.col)} heads, "
                f"want {config.heads}"
            )
        for p in (*self.row, *self.col):
            if p.in_dim != config.d or p.out_dim != config.d:
                raise ShapeError(
                    f"axis MLP {p.in_dim}->{p.out_dim}, want {config.d}->{config.d}"
                )
        return self


@dataclass
class ActivationResult:
    """One query's read: top slot ids, their weights, and the read vector."""

    indices: np.ndarray
    weights: np.ndarray
    read: np.ndarray

    def validate(self, n: int) -> "ActivationResult":
        if len(np.unique(self.indices)) != len(self.indices):
            raise ContractError("activation indices are not distinct")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ContractError("activation index out of range")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("activation weights do not sum to 1")
        return self


class ValueSource(Protocol):
    """Where value rows come from during a batched read."""

    def gather(self, tape: GradTape | None, flat_idx: np.ndarray) -> Tensor:
        """Rows for flat slot ids of shape (P, k); returns (P, k, d)."""
        ...


class TableValueSource:
    """Reads straight out of an in-process value table."""

    def __init__(self, values: MemoryValues):
        self.values = values

    def gather(self, tape: GradTape | None, flat_idx: np.ndarray) -> Tensor:
        return gather_rows(tape, self.values.table, flat_idx)


# ---------------------------------------------------------------------------
# query construction
# ---------------------------------------------------------------------------


def build_query(tape: GradTape | None, merge: MlpParams, x, u) -> Tensor:
    """User-aware query: the merge MLP over concat(x, u).

    Accepts single vectors (d,) or row batches (P, d).
    """
    xv, uv = _val(x), _val(u)
    if xv.shape != uv.shape:
        raise ShapeError(f"build_query: item {xv.shape} vs user {uv.shape}")
    if xv.ndim == 1:
        merged = concat_cols(tape, [_as_row(tape, x), _as_row(tape, u)])
        return _flatten(tape, mlp_forward(tape, merge, merged))
    merged = concat_cols(tape, [x, u])
    return mlp_forward(tape, merge, merged)


def _as_row(tape, x):
    return _Reshaped(tape, x) if isinstance(x, Tensor) else _val(x)[None, :]


def split_queries(tape: GradTape | None, qnet: QueryNet, m_q,
                  head: int = 0) -> tuple[Tensor, Tensor]:
    """Row and column queries: two independent MLPs over the same input."""
    q_row = mlp_forward(tape, qnet.row[head], m_q)
    q_col = mlp_forward(tape, qnet.col[head], m_q)
    return q_row, q_col


def score_axes(tape: GradTape | None, q_row, q_col,
               keys: MemoryKeys) -> tuple[Tensor, Tensor]:
    """Axis scores S_row = q_row . row_keys^T, S_col = q_col . col_keys^T.

    Costs exactly sqrt_n * d multiply-adds per query per axis, which is
    what the counted-scaling benchmark measures.
    """
    qr, qc = _val(q_row), _val(q_col)
    vector_in = qr.ndim == 1
    row_in = _as_row(tape, q_row) if vector_in else q_row
    col_in = _as_row(tape, q_col) if vector_in else q_col
    rk, ck = keys.row_keys, keys.col_keys
    if _val(row_in).shape[1] != rk.shape[1] or _val(col_in).shape[1] != ck.shape[1]:
        raise ShapeError("score_axes: query dim does not match key dim")
    s_row = matmul_nt(tape, row_in, rk)
    s_col = matmul_nt(tape, col_in, ck)
    queries = _val(row_in).shape[0]
    score_madds.add(queries * rk.shape[0] * rk.shape[1])
    score_madds.add(queries * ck.shape[0] * ck.shape[1])
    if vector_in:
        return _flatten(tape, s_row), _flatten(tape, s_col)
    return s_row, s_col


def combine_scores(s_row: np.ndarray, s_col: np.ndarray) -> np.ndarray:
    """Flat n-vector of broadcast-added axis scores (no gradient path;
    the differentiable pipeline reads the selected entries directly)."""
    return kernels.combine_vec(_val(s_row), _val(s_col))


def top_k(s: np.ndarray, k_top: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and raw scores of the k_top largest entries.

    Ties break toward the lowest flat index; output is sorted by
    descending score, then ascending index.
    """
    return kernels.topk_vec(_val(s), k_top)


def topk_from_axes(tape: GradTape | None, s_row, s_col,
                   k_top: int) -> tuple[np.ndarray, Tensor]:
    """Top-k selection over the broadcast grid, batched by rows.

    Returns integer flat indices (P, k) and the selected raw scores as a
    differentiable tensor; gradients flow into the selected entries of
    s_row / s_col only (the discrete selection itself is treated as
    constant).
    """
    rv, cv = _val(s_row), _val(s_col)
    if rv.ndim != 2 or rv.shape != cv.shape:
        raise ShapeError(f"topk_from_axes: {rv.shape} vs {cv.shape}")
    m = rv.shape[1]
    idx, vals = kernels.topk_bcast_rows(rv, cv, k_top)
    out = Tensor(vals)
    if tape is not None:
        row_of = idx // m
        col_of = idx % m
        p_index = np.repeat(np.arange(rv.shape[0]), k_top)
        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(s_row, Tensor):
                if s_row.grad is None:
                    s_row.grad = np.zeros_like(rv)
                np.add.at(s_row.grad, (p_index, row_of.reshape(-1)), g.reshape(-1))
            if isinstance(s_col, Tensor):
                if s_col.grad is None:
                    s_col.grad = np.zeros_like(cv)
                np.add.at(s_col.grad, (p_index, col_of.reshape(-1)), g.reshape(-1))
        tape.record(backward)
    return idx, out


def read_memory(tape: GradTape | None, act_scores, indices: np.ndarray,
                values: MemoryValues | ValueSource) -> tuple[Tensor, ActivationResult]:
    """Softmax-weighted sum of the selected value rows for one query.

    Gradient reaches only the ``k_top`` touched value rows and the score
    path; returns the read vector and the realised activation.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"read_memory: indices must be a vector, got {idx.shape}")
    if len(np.unique(idx)) != idx.size:
        raise ContractError("read_memory: indices must be distinct")
    source = values if not isinstance(values, MemoryValues) else TableValueSource(values)
    scores_row = _as_row(tape, act_scores)
    weights = softmax_rows(tape, scores_row)
    rows = source.gather(tape, idx[None, :])
    m_o = _flatten(tape, weighted_sum_rows(tape, weights, rows))
    result = ActivationResult(
        indices=idx.copy(),
        weights=weights.value[0].copy(),
        read=m_o.value.copy(),
    )
    return m_o, result


def naive_read(q_row, q_col, keys: MemoryKeys,
               values: MemoryValues) -> np.ndarray:
    """Exact reference read over the materialised full key table.

    Builds the n x 2d table whose row i * sqrt_n + j is
    concat(row_keys[i], col_keys[j]) and scores concat(q_row, q_col)
    against every slot (Theta(n * d) multiply-adds), then softmaxes over
    all n slots and weights the full value table.  With ``k_top = n``
    the decomposed path must match this to 1e-9.
    """
    qr, qc = _val(q_row), _val(q_col)
    rk, ck = keys.row_keys.value, keys.col_keys.value
    m, d = rk.shape
    n = m * m
    if n > MEMORY_GUARD_SLOTS:
        raise ContractError(
            f"naive_read refuses n={n} slots (> {MEMORY_GUARD_SLOTS})"
        )
    if qr.shape != (d,) or qc.shape != (d,):
        raise ShapeError("naive_read: query dims do not match key dims")
    full_keys = np.empty((n, 2 * d))
    full_keys[:, :d] = np.repeat(rk, m, axis=0)
    full_keys[:, d:] = np.tile(ck, (m, 1))
    q_full = np.concatenate([qr, qc])
    scores = kernels.score_vec(full_keys, q_full)
    e = np.exp(scores - scores.max())
    probs = e / e.sum()
    return probs @ values.table.value


def naive_scores(q_row, q_col, keys: MemoryKeys) -> np.ndarray:
    """Score half of :func:`naive_read`, for the scaling benchmark and
    the equivalence checks."""
    qr, qc = _val(q_row), _val(q_col)
    rk, ck = keys.row_keys.value, keys.col_keys.value
    m, d = rk.shape
    n = m * m
    if n > MEMORY_GUARD_SLOTS:
        raise ContractError(
            f"naive_scores refuses n={n} slots (> {MEMORY_GUARD_SLOTS})"
        )
    full_keys = np.empty((n, 2 * d))
    full_keys[:, :d] = np.repeat(rk, m, axis=0)
    full_keys[:, d:] = np.tile(ck, (m, 1))
    return kernels.score_vec(full_keys, np.concatenate([qr, qc]))


def memory_loss(tape: GradTape | None, m_o, m_q, mask,
                beta: float = 1.0) -> tuple[Tensor, int]:
    """Smooth-L1 between read vectors and queries, averaged over real
    positions.

    ``mask`` is 0/1 per position; padded positions contribute nothing to
    the loss or its gradients.  Returns the loss and the real-position
    count (0 means the whole sequence was padding and the loss is an
    exact zero).
    """
    w = np.asarray(mask, dtype=np.float64).reshape(-1)
    loss = smooth_l1_weighted(tape, m_o, m_q, w, beta=beta)
    return loss, int(w.sum())


# ---------------------------------------------------------------------------
# the block
# ---------------------------------------------------------------------------


@dataclass
class MemoryReadout:
    """Everything a batched read produces, for loss wiring and updates."""

    m_o: Tensor                 # (P, d) summed over heads
    m_q: Tensor                 # (P, d) merge-MLP output
    indices: list[np.ndarray]   # per head, (P, k) flat slot ids
    weights: list[Tensor]       # per head, (P, k) softmax weights


class RemoteValueSource:
    """Gathers value rows through a lookup callable (e.g. the sharded
    store).

    Each gather fetches its own deduplicated leaf buffer, so heads stay
    independent; after backward, :meth:`pending_updates` yields the
    per-slot gradients to route back to the store.
    """

    def __init__(self, lookup):
        self.lookup = lookup
        self.fetches: list[tuple[np.ndarray, Tensor]] = []

    def gather(self, tape: GradTape | None, flat_idx: np.ndarray) -> Tensor:
        slots = np.unique(np.asarray(flat_idx, dtype=np.int64))
        buffer = Tensor(self.lookup(slots), name="value_buffer")
        local = np.searchsorted(slots, flat_idx)
        self.fetches.append((slots, buffer))
        return gather_rows(tape, buffer, local)

    def pending_updates(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Concatenated (slot ids, gradient rows) over all fetches that
        received gradients; None when nothing flowed back."""
        slot_parts = []
        grad_parts = []
        for slots, buffer in self.fetches:
            if buffer.grad is not None:
                slot_parts.append(slots)
                grad_parts.append(buffer.grad)
        if not slot_parts:
            return None
        return np.concatenate(slot_parts), np.concatenate(grad_parts, axis=0)

    def clear(self) -> None:
        self.fetches.clear()


class MemoryBlock:
    """Keys, query nets and (optionally) the value table of one memory."""

    def __init__(self, config: MemoryConfig, rng: np.random.Generator | None = None,
                 keys: list[MemoryKeys] | None = None,
                 qnet: QueryNet | None = None,
                 values: MemoryValues | None = None):
        self.config = config.validate()
        d = config.d
        if keys is None or qnet is None or values is None:
            if rng is None:
                raise ContractError("MemoryBlock needs either an rng or explicit parts")
            bound = 1.0 / np.sqrt(d)
            keys = keys or [
                MemoryKeys(
                    Tensor(rng.uniform(-bound, bound, (config.sqrt_n, d)),
                           name=f"memory.h{h}.row_keys"),
                    Tensor(rng.uniform(-bound, bound, (config.sqrt_n, d)),
                           name=f"memory.h{h}.col_keys"),
                )
                for h in range(config.heads)
            ]
            qnet = qnet or QueryNet(
                merge=mlp_init((2 * d, d, d), rng, name="memory.merge"),
                row=[mlp_init((d, d, d), rng, name=f"memory.h{h}.row_mlp")
                     for h in range(config.heads)],
                col=[mlp_init((d, d, d), rng, name=f"memory.h{h}.col_mlp")
                     for h in range(config.heads)],
            )
            values = values or MemoryValues(
                Tensor(rng.uniform(-bound, bound, (config.n, d)),
                       name="memory.values"))
        self.keys = [k.validate(config) for k in keys]
        self.qnet = qnet.validate(config)
        self.values = values.validate(config)

    # -- parameters -------------------------------------------------------

    def named_tensors(self, include_values: bool = True) -> Iterator[tuple[str, Tensor]]:
        yield from self.qnet.merge.tensors("memory.merge")
        for h in range(self.config.heads):
            yield f"memory.h{h}.row_keys", self.keys[h].row_keys
            yield f"memory.h{h}.col_keys", self.keys[h].col_keys
            yield from self.qnet.row[h].tensors(f"memory.h{h}.row_mlp")
            yield from self.qnet.col[h].tensors(f"memory.h{h}.col_mlp")
        if include_values:
            yield "memory.values", self.values.table

    # -- reads ------------------------------------------------------------

    def read_batch(self, tape: GradTape | None, x, u,
                   source: ValueSource | None = None) -> MemoryReadout:
        """Full pipeline for a (P, d) batch of positions.

        Per-head reads are summed; all heads share one value table.
        """
        cfg = self.config
        head_source = source if source is not None else TableValueSource(self.values)
        m_q = build_query(tape, self.qnet.merge, x, u)
        m_o: Tensor | None = None
        indices: list[np.ndarray] = []
        weights: list[Tensor] = []
        for h in range(cfg.heads):
            q_row, q_col = split_queries(tape, self.qnet, m_q, head=h)
            s_row, s_col = score_axes(tape, q_row, q_col, self.keys[h])
            idx, top_scores = topk_from_axes(tape, s_row, s_col, cfg.k_top)
            w = softmax_rows(tape, top_scores)
            rows = head_source.gather(tape, idx)
            head_read = weighted_sum_rows(tape, w, rows)
            m_o = head_read if m_o is None else add(tape, m_o, head_read)
            indices.append(idx)
            weights.append(w)
        return MemoryReadout(m_o=m_o, m_q=m_q, indices=indices, weights=weights)

    def read_single(self, x, u, values: MemoryValues | None = None,
                    head: int = 0) -> ActivationResult:
        """Convenience single-query read (no tape), for tests and tools."""
        vals = values or self.values
        tape = None
        m_q = build_query(tape, self.qnet.merge, x, u)
        q_row, q_col = split_queries(tape, self.qnet, m_q, head=head)
        s_row, s_col = score_axes(tape, q_row, q_col, self.keys[head])
        s = combine_scores(s_row.value, s_col.value)
        idx, raw = top_k(s, self.config.k_top)
        _, result = read_memory(tape, Tensor(raw), idx, vals)
        return result


def multi_head_read(tape: GradTape | None, block: MemoryBlock, x, u,
                    source: ValueSource | None = None) -> Tensor:
    """Sum of per-head reads; with one head this is exactly the single
    pipeline."""
    return block.read_batch(tape, x, u, source).m_o


def memory_forward(tape: GradTape | None, block: MemoryBlock, seq_x, u,
                   mask: np.ndarray, source: ValueSource | None = None,
                   ) -> tuple[Tensor, MemoryReadout]:
    """Per-position reads over a batch of sequences, pooled by masked mean.

    ``seq_x`` is (B*L, d) position embeddings, ``u`` is (B, d) user
    embeddings, ``mask`` is (B, L) 0/1.  Returns the pooled s_mem (B, d)
    and the raw readout (padded positions are computed then zero-weighted,
    so they change nothing).
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"memory_forward: mask must be (B, L), got {m.shape}")
    b, span = m.shape
    xv = _val(seq_x)
    if xv.shape[0] != b * span:
        raise ShapeError(
            f"memory_forward: {xv.shape[0]} positions != {b} x {span}"
        )
    u_rep = repeat_rows(tape, u, span)
    readout = block.read_batch(tape, seq_x, u_rep, source)
    s_mem = masked_mean_pool(tape, readout.m_o, m.reshape(-1), groups=b)
    return s_mem, readout


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_memory_block(path: str, block: MemoryBlock) -> None:
    from .checkpoint import KIND_MEMORY, write_checkpoint

    cfg = block.config
    tables = [(name, t.value) for name, t in block.named_tensors()]
    write_checkpoint(
        path, KIND_MEMORY,
        ints=(cfg.sqrt_n, cfg.d, cfg.k_top, cfg.heads),
        reals=(cfg.alpha, cfg.beta_smooth),
        tables=tables,
    )


def load_memory_block(path: str) -> MemoryBlock:
    from .checkpoint import KIND_MEMORY, read_checkpoint
    from .errors import CheckpointError
    from .numerics import IDENTITY, RELU, MlpLayer

    ckpt = read_checkpoint(path)
    if ckpt.kind != KIND_MEMORY:
        raise CheckpointError(f"{path}: not a memory checkpoint (kind={ckpt.kind})")
    sqrt_n, d, k_top, heads = ckpt.ints
    alpha, beta_smooth = ckpt.reals
    cfg = MemoryConfig(sqrt_n=sqrt_n, d=d, k_top=k_top, heads=heads,
                       alpha=alpha, beta_smooth=beta_smooth)

    def read_mlp(prefix: str) -> MlpParams:
        layers = []
        i = 0
        while any(name == f"{prefix}.w{i}" for name in ckpt.table_names):
            w = ckpt.table(f"{prefix}.w{i}")
            bias = ckpt.table(f"{prefix}.b{i}").reshape(-1)
            layers.append(MlpLayer(Tensor(w, name=f"{prefix}.w{i}"),
                                   Tensor(bias, name=f"{prefix}.b{i}"),
                                   IDENTITY))
            i += 1
        for layer in layers[:-1]:
            layer.activation = RELU
        return MlpParams(layers)

    keys = [
        MemoryKeys(
            Tensor(ckpt.table(f"memory.h{h}.row_keys"), name=f"memory.h{h}.row_keys"),
            Tensor(ckpt.table(f"memory.h{h}.col_keys"), name=f"memory.h{h}.col_keys"),
        )
        for h in range(heads)
    ]
    qnet = QueryNet(
        merge=read_mlp("memory.merge"),
        row=[read_mlp(f"memory.h{h}.row_mlp") for h in range(heads)],
        col=[read_mlp(f"memory.h{h}.col_mlp") for h in range(heads)],
    )
    values = MemoryValues(Tensor(ckpt.table("memory.values"), name="memory.values"))
    return MemoryBlock(cfg, keys=keys, qnet=qnet, values=values)
