"""Training loop: Adagrad over the tower, query nets, keys and sparse
embedding rows, with memory values routed through the sharded store.

Everything is deterministic given the config seed: initialisation,
shuffling, and updates draw from named RNG streams, and the store
applies pre-aggregated per-slot gradients, so the shard count never
changes the result.  Lookups see the values from before the current
step's update (snapshot-at-barrier semantics).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .dataset import rng_stream
from .errors import ContractError, DivergenceError
from .memory import RemoteValueSource
from .metrics import MetricsReport
from .model import Batch, CtrModel, ModelConfig, Sample, ctr_loss, total_loss
from .mps import MemoryStore, ShardLayout, UpdateBatch
from .numerics import GradTape
from .optim import Adagrad


def worker_count() -> int:
    """Parallel eval workers, capped by the LMN_THREADS environment var."""
    raw = os.environ.get("LMN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"LMN_THREADS must be an integer, got {raw!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs; seed fixes all randomness."""

    variant: str = "lmn"
    seed: int = 0
    learning_rate: float = 0.01
    optimizer: str = "adagrad"
    batch_size: int = 256
    epochs: int = 2
    alpha: float = 0.1
    embed_dim: int = 32
    seq_len: int = 50
    sqrt_n: int = 32
    k_top: int = 8
    heads: int = 1
    beta_smooth: float = 1.0
    tower_dims: tuple[int, ...] = (256, 128)
    shards: int = 1
    include_smem: bool = True

    def validate(self) -> "TrainConfig":
        if self.optimizer != "adagrad":
            raise ContractError(f"unknown optimizer tag {self.optimizer!r}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 1 or self.shards < 1:
            raise ContractError("batch_size, epochs and shards must be positive")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, embed_dim=self.embed_dim, seq_len=self.seq_len,
            tower_dims=self.tower_dims, sqrt_n=self.sqrt_n, k_top=self.k_top,
            heads=self.heads, alpha=self.alpha, beta_smooth=self.beta_smooth,
            include_smem=self.include_smem,
        )

    _INT_FIELDS = ("seed", "batch_size", "epochs", "embed_dim", "seq_len",
                   "sqrt_n", "k_top", "heads", "shards")
    _REAL_FIELDS = ("learning_rate", "alpha", "beta_smooth")
    _BOOL_FIELDS = ("include_smem",)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ContractError(f"unknown train config key {key!r}")
            if key in cls._INT_FIELDS:
                kwargs[key] = int(raw)
            elif key in cls._REAL_FIELDS:
                kwargs[key] = float(raw)
            elif key in cls._BOOL_FIELDS:
                if raw.lower() not in ("0", "1", "true", "false"):
                    raise ContractError(f"{key} must be boolean, got {raw!r}")
                kwargs[key] = raw.lower() in ("1", "true")
            elif key == "tower_dims":
                kwargs[key] = tuple(int(p) for p in raw.split(",") if p)
            else:
                kwargs[key] = raw
        return cls(**kwargs).validate()

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if f.name == "tower_dims":
                out[f.name] = ",".join(str(p) for p in v)
            elif f.name in self._BOOL_FIELDS:
                out[f.name] = "1" if v else "0"
            else:
                out[f.name] = str(v)
        return out


def vocab_sizes(*sample_sets: list[Sample]) -> dict[str, int]:
    """Table sizes covering every id seen in the given splits."""
    max_user = max_item = max_cross = 0
    for samples in sample_sets:
        for s in samples:
            max_user = max(max_user, s.user_id)
            max_item = max(max_item, s.item_id, *s.sequence)
            max_cross = max(max_cross, s.cross_id)
    return {"user": max_user + 1, "item": max_item + 1, "cross": max_cross + 1}


def make_batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    return [idx[at:at + batch_size] for at in range(0, n, batch_size)]


@dataclass
class TrainResult:
    model: CtrModel
    store: MemoryStore | None
    reports: list[MetricsReport]
    train_logloss: list[float]   # per epoch, mean over steps
    lookup_stats: dict[str, int] | None

    def final_values(self) -> np.ndarray | None:
        return None if self.store is None else self.store.gather()


def train_step(model: CtrModel, batch: Batch, opt: Adagrad,
               store: MemoryStore | None, step: int) -> float:
    """One forward/backward/update pass; returns the total loss."""
    tape = GradTape()
    source = RemoteValueSource(store.lookup) if store is not None else None
    out = model.forward(tape, batch, value_source=source)
    ctr = ctr_loss(tape, out.probs, batch.labels)
    loss = total_loss(tape, ctr, out.memory_loss, model.config.alpha)
    loss_val = float(loss.value)
    if not np.isfinite(loss_val):
        raise DivergenceError(f"step {step}: loss is {loss_val}")
    tape.backward(loss)

    # Dense parameters (tower, query nets, keys).
    for name, t in model.named_parameters(include_values=False):
        if name.startswith("emb."):
            continue
        opt.step_dense(name, t)
    # Sparse embedding rows.
    for table in (model.user_table, model.item_table, model.cross_table):
        opt.step_rows(table.tensor.name, table.tensor, table.touched())
    # Memory values through the store, duplicates pre-aggregated.
    if store is not None and source is not None:
        pending = source.pending_updates()
        if pending is not None:
            store.apply_updates(UpdateBatch.build(*pending), opt)
        source.clear()
    model.zero_grads()
    return loss_val


def evaluate(model: CtrModel, samples: list[Sample], batch_size: int = 512,
             store: MemoryStore | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Labels and predicted probabilities over a sample list.

    Uses the read-only serving lookup; batches may run on up to
    LMN_THREADS workers (each gets its own value source, and results are
    collected in batch order either way).
    """
    batches = make_batches(len(samples), batch_size)

    def run(sel: np.ndarray) -> np.ndarray:
        part = [samples[i] for i in sel]
        source = RemoteValueSource(store.serving_lookup) if store is not None else None
        return model.predict(Batch.from_samples(part, model.config.seq_len),
                             value_source=source)

    workers = worker_count()
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, batches))
    else:
        scores = [run(b) for b in batches]
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return labels, np.concatenate(scores) if scores else np.empty(0)


def train(config: TrainConfig, train_samples: list[Sample],
          eval_samples: list[Sample], log=None) -> TrainResult:
    config.validate()
    if not train_samples:
        raise ContractError("empty training set")
    vocab = vocab_sizes(train_samples, eval_samples)
    model = CtrModel(config.model_config(), vocab, seed=config.seed)
    opt = Adagrad(lr=config.learning_rate)

    store = None
    if config.variant == "lmn":
        layout = ShardLayout(n_slots=model.memory.config.n, n_shards=config.shards)
        store = MemoryStore(model.memory.values.table.value, layout)

    n = len(train_samples)
    reports: list[MetricsReport] = []
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng_stream(config.seed, f"shuffle.{epoch}").permutation(n)
        losses = []
        for sel in make_batches(n, config.batch_size, order):
            batch = Batch.from_samples([train_samples[i] for i in sel],
                                       config.seq_len)
            losses.append(train_step(model, batch, opt, store, step))
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        if eval_samples:
            labels, scores = evaluate(model, eval_samples, store=store)
            reports.append(MetricsReport.from_scores(labels, scores))
        if log is not None:
            eval_txt = (f" eval_auc={reports[-1].auc:.4f} "
                        f"eval_logloss={reports[-1].logloss:.4f}"
                        if reports else "")
            log(f"epoch {epoch + 1}/{config.epochs} "
                f"train_logloss={epoch_losses[-1]:.4f}{eval_txt}")
    return TrainResult(
        model=model, store=store, reports=reports,
        train_logloss=epoch_losses,
        lookup_stats=None if store is None else dict(store.stats),
    )


def train_steps(config: TrainConfig, train_samples: list[Sample],
                max_steps: int) -> TrainResult:
    """Fixed number of optimisation steps (used by the shard-equivalence
    checks); no evaluation."""
    config.validate()
    vocab = vocab_sizes(train_samples)
    model = CtrModel(config.model_config(), vocab, seed=config.seed)
    opt = Adagrad(lr=config.learning_rate)
    store = None
    if config.variant == "lmn":
        layout = ShardLayout(n_slots=model.memory.config.n, n_shards=config.shards)
        store = MemoryStore(model.memory.values.table.value, layout)
    n = len(train_samples)
    step = 0
    epoch = 0
    while step < max_steps:
        order = rng_stream(config.seed, f"shuffle.{epoch}").permutation(n)
        for sel in make_batches(n, config.batch_size, order):
            if step >= max_steps:
                break
            batch = Batch.from_samples([train_samples[i] for i in sel],
                                       config.seq_len)
            train_step(model, batch, opt, store, step)
            step += 1
        epoch += 1
    return TrainResult(model=model, store=store, reports=[],
                       train_logloss=[],
                       lookup_stats=None if store is None else dict(store.stats))
