"""CTR model variants over embedded features.

One tower ``sigmoid(MLP(concat(u, i, c, s)))`` is shared by all
variants; they differ only in how the behaviour sequence becomes the
feature ``s``:

* ``base``: s is the zero vector (no sequence signal),
* ``pooling``: masked mean of the sequence embeddings,
* ``target_attention``: sequence positions weighted by similarity to the
  candidate item,
* ``lmn``: the pooled sequence concatenated with the memory read, plus
  the Smooth-L1 injection loss on the side.

Ids are embedded per feature family; id 0 is reserved padding and maps
to a frozen zero row everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dataset import rng_stream
from .errors import ContractError, ShapeError
from .memory import (
    MemoryBlock,
    MemoryConfig,
    MemoryReadout,
    ValueSource,
    memory_forward,
    memory_loss,
)
from .numerics import (
    GradTape,
    MlpParams,
    Tensor,
    add,
    bce_loss,
    concat_cols,
    gather_rows,
    masked_mean_pool,
    masked_softmax_groups,
    mlp_forward,
    mlp_init,
    repeat_rows,
    rowwise_dot,
    scale,
    scale_rows_and_pool,
    sigmoid,
    squeeze_col,
    _val,
)

PADDING_ID = 0
VARIANTS = ("base", "pooling", "target_attention", "lmn")


@dataclass(frozen=True)
class Sample:
    """One impression: ids, fixed-length behaviour sequence, binary label."""

    user_id: int
    item_id: int
    cross_id: int
    sequence: tuple[int, ...]
    label: int
    day: int = 0
    profile_ids: tuple[int, ...] = ()
    item_feature_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0/1, got {self.label}")

    @property
    def mask(self) -> tuple[int, ...]:
        return tuple(1 if s != PADDING_ID else 0 for s in self.sequence)


@dataclass
class Batch:
    user: np.ndarray    # (B,)
    item: np.ndarray    # (B,)
    cross: np.ndarray   # (B,)
    seq: np.ndarray     # (B, L)
    mask: np.ndarray    # (B, L) float 0/1
    labels: np.ndarray  # (B,) float

    @classmethod
    def from_samples(cls, samples: list[Sample], seq_len: int) -> "Batch":
        b = len(samples)
        seq = np.zeros((b, seq_len), dtype=np.int64)
        for r, s in enumerate(samples):
            if len(s.sequence) > seq_len:
                raise ShapeError(
                    f"sample sequence length {len(s.sequence)} > {seq_len}"
                )
            seq[r, :len(s.sequence)] = s.sequence
        return cls(
            user=np.array([s.user_id for s in samples], dtype=np.int64),
            item=np.array([s.item_id for s in samples], dtype=np.int64),
            cross=np.array([s.cross_id for s in samples], dtype=np.int64),
            seq=seq,
            mask=(seq != PADDING_ID).astype(np.float64),
            labels=np.array([s.label for s in samples], dtype=np.float64),
        )

    @property
    def size(self) -> int:
        return self.user.shape[0]


class EmbeddingTable:
    """id -> row table; row 0 is the frozen zero padding vector."""

    def __init__(self, name: str, size: int, dim: int,
                 rng: np.random.Generator | None = None,
                 values: np.ndarray | None = None):
        if size < 1 or dim < 1:
            raise ContractError(f"embedding table {name}: bad size {size}x{dim}")
        if values is None:
            bound = 1.0 / np.sqrt(dim)
            values = rng.uniform(-bound, bound, size=(size, dim))
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != (size, dim):
            raise ShapeError(f"embedding table {name}: {values.shape} != {(size, dim)}")
        values[PADDING_ID] = 0.0
        self.name = name
        self.tensor = Tensor(values, name=f"emb.{name}")
        self.tensor.touched_rows = []

    @property
    def size(self) -> int:
        return self.tensor.shape[0]

    @property
    def dim(self) -> int:
        return self.tensor.shape[1]

    def lookup(self, tape: GradTape | None, ids) -> Tensor:
        return gather_rows(tape, self.tensor, np.asarray(ids, dtype=np.int64))

    def touched(self) -> np.ndarray:
        """Unique non-padding rows gathered since the last optimizer step."""
        if not self.tensor.touched_rows:
            return np.empty(0, dtype=np.int64)
        rows = np.unique(np.concatenate(self.tensor.touched_rows))
        return rows[rows != PADDING_ID]


def embed_batch(tape: GradTape | None, table: EmbeddingTable, ids) -> Tensor:
    """Stacked embedding rows for a batch of ids (padding id -> zeros)."""
    return table.lookup(tape, ids)


def sequence_pooling(tape: GradTape | None, seq_emb, mask) -> Tensor:
    """Masked mean over sequence positions; all-masked rows yield zeros."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"sequence_pooling: mask must be (B, L), got {m.shape}")
    x = seq_emb
    if _val(x).ndim == 3:
        raise ShapeError("sequence_pooling expects flattened (B*L, d) embeddings")
    return masked_mean_pool(tape, x, m.reshape(-1), groups=m.shape[0])


def target_attention(tape: GradTape | None, seq_emb, target_emb, mask) -> Tensor:
    """Positions weighted by softmax of their dot product with the target.

    ``seq_emb`` is (B*L, d), ``target_emb`` (B, d); masked positions get
    weight 0 and a fully-masked row returns the zero vector.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"target_attention: mask must be (B, L), got {m.shape}")
    b, span = m.shape
    target_rep = repeat_rows(tape, target_emb, span)
    scores = rowwise_dot(tape, seq_emb, target_rep)
    weights = masked_softmax_groups(tape, scores, m.reshape(-1), groups=b)
    return scale_rows_and_pool(tape, seq_emb, weights, groups=b)


def predict_ctr(tape: GradTape | None, tower: MlpParams, u, i, c, s) -> Tensor:
    """sigmoid(MLP(concat(u, i, c, s))) -> probabilities in (0, 1)."""
    stacked = concat_cols(tape, [u, i, c, s])
    return sigmoid(tape, squeeze_col(tape, mlp_forward(tape, tower, stacked)))


def ctr_loss(tape: GradTape | None, probs, labels) -> Tensor:
    """Binary cross-entropy (the LogLoss the evaluation reports)."""
    return bce_loss(tape, probs, labels)


def total_loss(tape: GradTape | None, ctr, memory, alpha: float) -> Tensor:
    """ctr + alpha * memory; with alpha = 0 this is exactly the CTR loss."""
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    if memory is None:
        return ctr
    return add(tape, ctr, scale(tape, memory, alpha))


@dataclass
class ForwardResult:
    probs: Tensor
    memory_loss: Tensor | None
    real_positions: int
    readout: MemoryReadout | None


@dataclass(frozen=True)
class ModelConfig:
    """Structure of the CTR model (training knobs live in TrainConfig)."""

    variant: str = "lmn"
    embed_dim: int = 32
    seq_len: int = 50
    tower_dims: tuple[int, ...] = (256, 128)
    sqrt_n: int = 32
    k_top: int = 8
    heads: int = 1
    alpha: float = 0.1
    beta_smooth: float = 1.0
    include_smem: bool = True   # wiring flag: drop s_mem from the tower input

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r} (have {VARIANTS})")
        if self.embed_dim < 1 or self.seq_len < 1:
            raise ContractError("embed_dim and seq_len must be positive")
        return self

    def memory_config(self) -> MemoryConfig:
        return MemoryConfig(sqrt_n=self.sqrt_n, d=self.embed_dim,
                            k_top=self.k_top, heads=self.heads,
                            alpha=self.alpha, beta_smooth=self.beta_smooth)

    @property
    def s_dim(self) -> int:
        if self.variant == "lmn" and self.include_smem:
            return 2 * self.embed_dim
        return self.embed_dim

    @property
    def tower_in_dim(self) -> int:
        return 3 * self.embed_dim + self.s_dim


class CtrModel:
    """Embeddings + sequence feature + prediction tower for one variant.

    Each parameter family draws from its own named RNG stream, so two
    variants with the same seed share bit-identical embeddings and tower
    weights whenever the shapes agree.
    """

    def __init__(self, config: ModelConfig, vocab: dict[str, int], seed: int = 0,
                 tables: dict[str, np.ndarray] | None = None):
        self.config = config.validate()
        self.vocab = dict(vocab)
        self.seed = seed
        d = config.embed_dim

        def table(name: str) -> EmbeddingTable:
            if tables is not None and f"emb.{name}" in tables:
                return EmbeddingTable(name, self.vocab[name], d,
                                      values=tables[f"emb.{name}"])
            return EmbeddingTable(name, self.vocab[name], d,
                                  rng=rng_stream(seed, f"emb.{name}"))

        self.user_table = table("user")
        self.item_table = table("item")
        self.cross_table = table("cross")
        self.tower = mlp_init(
            (config.tower_in_dim, *config.tower_dims, 1),
            rng_stream(seed, "tower"), name="tower",
        )
        self.memory: MemoryBlock | None = None
        if config.variant == "lmn":
            self.memory = MemoryBlock(config.memory_config(),
                                      rng=rng_stream(seed, "memory"))

    # -- parameters ---------------------------------------------------------

    def named_parameters(self, include_values: bool = True) -> Iterator[tuple[str, Tensor]]:
        yield "emb.user", self.user_table.tensor
        yield "emb.item", self.item_table.tensor
        yield "emb.cross", self.cross_table.tensor
        yield from self.tower.tensors("tower")
        if self.memory is not None:
            yield from self.memory.named_tensors(include_values=include_values)

    def zero_grads(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    # -- forward ------------------------------------------------------------

    def forward(self, tape: GradTape | None, batch: Batch,
                value_source: ValueSource | None = None) -> ForwardResult:
        cfg = self.config
        if batch.seq.shape[1] != cfg.seq_len:
            raise ShapeError(
                f"batch sequence length {batch.seq.shape[1]} != {cfg.seq_len}"
            )
        u = self.user_table.lookup(tape, batch.user)
        i = self.item_table.lookup(tape, batch.item)
        c = self.cross_table.lookup(tape, batch.cross)
        seq_flat = self.item_table.lookup(tape, batch.seq.reshape(-1))

        mem_loss = None
        readout = None
        real_positions = int(batch.mask.sum())
        if cfg.variant == "base":
            s = np.zeros((batch.size, cfg.embed_dim))
        elif cfg.variant == "pooling":
            s = sequence_pooling(tape, seq_flat, batch.mask)
        elif cfg.variant == "target_attention":
            s = target_attention(tape, seq_flat, i, batch.mask)
        else:  # lmn
            pooled = sequence_pooling(tape, seq_flat, batch.mask)
            s_mem, readout = memory_forward(tape, self.memory, seq_flat, u,
                                            batch.mask, source=value_source)
            mem_loss, real_positions = memory_loss(
                tape, readout.m_o, readout.m_q, batch.mask.reshape(-1),
                beta=cfg.beta_smooth,
            )
            s = concat_cols(tape, [pooled, s_mem]) if cfg.include_smem else pooled
        probs = predict_ctr(tape, self.tower, u, i, c, s)
        return ForwardResult(probs=probs, memory_loss=mem_loss,
                             real_positions=real_positions, readout=readout)

    def predict(self, batch: Batch,
                value_source: ValueSource | None = None) -> np.ndarray:
        return self.forward(None, batch, value_source).probs.value

    # -- persistence ----------------------------------------------------------

    VARIANT_CODES = {name: i for i, name in enumerate(VARIANTS)}

    def save(self, path: str, values_override: np.ndarray | None = None) -> None:
        """Write a single-file checkpoint; the live value table can be
        passed in when it is owned by a sharded store."""
        from .checkpoint import KIND_MODEL, write_checkpoint

        cfg = self.config
        tables = []
        for name, t in self.named_parameters(include_values=True):
            arr = t.value
            if name == "memory.values" and values_override is not None:
                arr = values_override
            tables.append((name, arr))
        write_checkpoint(
            path, KIND_MODEL,
            ints=(
                self.VARIANT_CODES[cfg.variant], cfg.embed_dim, cfg.seq_len,
                cfg.sqrt_n, cfg.k_top, cfg.heads, int(cfg.include_smem),
                self.vocab["user"], self.vocab["item"], self.vocab["cross"],
                self.seed, len(cfg.tower_dims),
            ),
            reals=(cfg.alpha, cfg.beta_smooth),
            tables=tables,
        )

    @classmethod
    def load(cls, path: str) -> "CtrModel":
        from .checkpoint import KIND_MODEL, read_checkpoint
        from .errors import CheckpointError
        from .numerics import IDENTITY, RELU, MlpLayer

        ckpt = read_checkpoint(path)
        if ckpt.kind != KIND_MODEL:
            raise CheckpointError(f"{path}: not a model checkpoint (kind={ckpt.kind})")
        (variant_code, embed_dim, seq_len, sqrt_n, k_top, heads, include_smem,
         n_user, n_item, n_cross, seed, n_hidden) = ckpt.ints
        alpha, beta_smooth = ckpt.reals
        tower_ws = [ckpt.table(f"tower.w{i}") for i in range(n_hidden + 1)]
        config = ModelConfig(
            variant=VARIANTS[variant_code], embed_dim=embed_dim, seq_len=seq_len,
            tower_dims=tuple(w.shape[1] for w in tower_ws[:-1]),
            sqrt_n=sqrt_n, k_top=k_top, heads=heads, alpha=alpha,
            beta_smooth=beta_smooth, include_smem=bool(include_smem),
        )
        model = cls(
            config,
            vocab={"user": n_user, "item": n_item, "cross": n_cross},
            seed=seed,
            tables={name: arr for name, arr in ckpt.tables},
        )
        # overwrite generated parameters with the stored ones
        for name, t in model.named_parameters(include_values=True):
            stored = ckpt.table(name)
            t.value[...] = stored.reshape(t.value.shape)
        return model
