"""In-process simulation of the sharded memory value store.

Slots are assigned to shards by ``slot_id mod S``; a lookup runs as two
deterministic phases (scatter deduplicated, sorted requests to the
owning shards; gather the replies back into request order), and updates
are applied per shard in ascending shard id and ascending slot id after
duplicate slots have been pre-aggregated by summation.  Because one
slot's update never reads another slot's state, the resulting tables are
bit-identical for any shard count.  A barrier separates the phases:
lookups within a step see the values from before the step's updates.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass

import numpy as np

from .checkpoint import KIND_SHARD, read_checkpoint, write_checkpoint
from .errors import CheckpointError, ContractError, CorruptionError, DivergenceError
from .optim import Adagrad

SHARD_RULE = "mod"


def shard_assign(slot_id: int, n_shards: int, n_slots: int | None = None) -> int:
    """Owning shard of a slot: ``slot_id mod n_shards``."""
    if n_shards < 1:
        raise ContractError(f"need at least one shard, got {n_shards}")
    if slot_id < 0 or (n_slots is not None and slot_id >= n_slots):
        raise ContractError(f"slot {slot_id} out of range")
    return slot_id % n_shards


@dataclass(frozen=True)
class ShardLayout:
    """Partition of [0, n_slots) across shards by the modulo rule."""

    n_slots: int
    n_shards: int

    def __post_init__(self):
        if self.n_shards < 1 or self.n_slots < 1:
            raise ContractError(
                f"invalid layout: {self.n_slots} slots over {self.n_shards} shards"
            )

    def shard_of(self, slots):
        return np.asarray(slots, dtype=np.int64) % self.n_shards

    def local_index(self, slots):
        return np.asarray(slots, dtype=np.int64) // self.n_shards

    def owned_slots(self, shard: int) -> np.ndarray:
        """Slots of one shard in ascending order (= ascending local index)."""
        return np.arange(shard, self.n_slots, self.n_shards, dtype=np.int64)

    def shard_sizes(self) -> list[int]:
        return [len(range(s, self.n_slots, self.n_shards))
                for s in range(self.n_shards)]


@dataclass
class LookupPlan:
    """Routing of one batched lookup.

    ``shard_requests[s]`` holds the deduplicated, ascending slot ids
    shard s must answer; ``inverse`` maps each original request position
    to its row in the unique reply buffer.
    """

    requested: np.ndarray
    unique_slots: np.ndarray
    inverse: np.ndarray
    shard_requests: list[np.ndarray]

    @property
    def rows_fetched(self) -> int:
        return int(self.unique_slots.size)

    @property
    def messages(self) -> int:
        """Non-empty request/reply message pairs in the exchange."""
        return sum(1 for req in self.shard_requests if req.size)


def plan_lookup(slot_ids, layout: ShardLayout) -> LookupPlan:
    requested = np.asarray(slot_ids, dtype=np.int64).reshape(-1)
    if requested.size and (requested.min() < 0 or requested.max() >= layout.n_slots):
        raise ContractError(
            f"lookup requests a slot outside [0, {layout.n_slots})"
        )
    unique, inverse = np.unique(requested, return_inverse=True)
    owner = layout.shard_of(unique)
    shard_requests = [unique[owner == s] for s in range(layout.n_shards)]
    return LookupPlan(requested=requested, unique_slots=unique,
                      inverse=inverse, shard_requests=shard_requests)


@dataclass
class UpdateBatch:
    """Per-slot gradients with duplicates pre-aggregated by summation."""

    slots: np.ndarray   # unique, ascending
    grads: np.ndarray   # (len(slots), d)

    @classmethod
    def build(cls, slot_ids, grads) -> "UpdateBatch":
        ids = np.asarray(slot_ids, dtype=np.int64).reshape(-1)
        g = np.asarray(grads, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != ids.size:
            raise ContractError(
                f"update batch: {ids.size} slots vs gradient shape {g.shape}"
            )
        unique, inverse = np.unique(ids, return_inverse=True)
        agg = np.zeros((unique.size, g.shape[1]))
        np.add.at(agg, inverse, g)
        return cls(slots=unique, grads=agg)


class MemoryStore:
    """Owns the sharded value table and its per-slot optimizer state."""

    def __init__(self, values: np.ndarray, layout: ShardLayout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != layout.n_slots:
            raise ContractError(
                f"value table {values.shape} does not match layout "
                f"({layout.n_slots} slots)"
            )
        self.layout = layout
        self.dim = values.shape[1]
        self.shards = [values[layout.owned_slots(s)].copy()
                       for s in range(layout.n_shards)]
        self.acc = [np.zeros_like(sh) for sh in self.shards]
        self.stats = {
            "lookups": 0, "serving_lookups": 0, "requests_in": 0,
            "rows_fetched": 0, "messages": 0, "updates": 0, "rows_updated": 0,
        }
        self._stats_lock = threading.Lock()

    def _count(self, **inc: int) -> None:
        with self._stats_lock:
            for key, by in inc.items():
                self.stats[key] += by

    # -- lookup -----------------------------------------------------------

    def _run_plan(self, plan: LookupPlan) -> np.ndarray:
        unique_rows = np.empty((plan.unique_slots.size, self.dim))
        answered = np.zeros(plan.unique_slots.size, dtype=bool)
        # Phase 1: each shard answers its own request list, ascending ids.
        replies = []
        for shard in range(self.layout.n_shards):
            req = plan.shard_requests[shard]
            local = self.layout.local_index(req)
            if req.size and local.max() >= self.shards[shard].shape[0]:
                raise CorruptionError(
                    f"shard {shard} asked for unknown slot {int(req[local.argmax()])}"
                )
            replies.append(self.shards[shard][local])
        # Phase 2 (after the barrier): route replies back.
        for shard, reply in enumerate(replies):
            req = plan.shard_requests[shard]
            where = np.searchsorted(plan.unique_slots, req)
            if req.size and not np.array_equal(plan.unique_slots[where], req):
                raise CorruptionError(
                    f"shard {shard} answered a slot that was never requested"
                )
            unique_rows[where] = reply
            answered[where] = True
        if not answered.all():
            missing = plan.unique_slots[~answered][0]
            raise CorruptionError(f"slot {int(missing)} was never answered")
        return unique_rows[plan.inverse]

    def lookup(self, slot_ids) -> np.ndarray:
        """Training-path all2all lookup; replies in request order."""
        ids = np.asarray(slot_ids, dtype=np.int64)
        plan = plan_lookup(ids, self.layout)
        self._count(lookups=1, requests_in=int(ids.size),
                    rows_fetched=plan.rows_fetched, messages=plan.messages)
        rows = self._run_plan(plan)
        return rows.reshape(ids.shape + (self.dim,))

    def serving_lookup(self, slot_ids) -> np.ndarray:
        """Read-only serving path: same exchange, optimizer state untouched."""
        ids = np.asarray(slot_ids, dtype=np.int64)
        plan = plan_lookup(ids, self.layout)
        self._count(serving_lookups=1, rows_fetched=plan.rows_fetched,
                    messages=plan.messages)
        rows = self._run_plan(plan)
        return rows.reshape(ids.shape + (self.dim,))

    def lookup_planned(self, plan: LookupPlan) -> np.ndarray:
        """Run a caller-built plan (exists so tests can breach invariants)."""
        return self._run_plan(plan)

    # -- update -----------------------------------------------------------

    def apply_updates(self, batch: UpdateBatch, opt: Adagrad) -> None:
        """Route aggregated gradients to their shards and step Adagrad.

        Application order is ascending shard id, then ascending slot id
        inside the shard; with pre-aggregated duplicates the result is
        bit-identical to single-shard application in ascending slot order.
        """
        if batch.grads.size and not np.all(np.isfinite(batch.grads)):
            bad = batch.slots[~np.isfinite(batch.grads).all(axis=1)][0]
            raise DivergenceError(f"non-finite gradient for memory slot {int(bad)}")
        if batch.grads.shape[1:] != (self.dim,):
            raise ContractError(
                f"update dim {batch.grads.shape[1:]} != value dim {self.dim}"
            )
        owner = self.layout.shard_of(batch.slots)
        self._count(updates=1, rows_updated=int(batch.slots.size))
        for shard in range(self.layout.n_shards):
            mine = owner == shard
            if not mine.any():
                continue
            local = self.layout.local_index(batch.slots[mine])
            Adagrad.apply_rows(self.shards[shard], self.acc[shard], local,
                               batch.grads[mine], opt.lr, opt.eps)

    # -- state ------------------------------------------------------------

    def gather(self) -> np.ndarray:
        """Reassembled full (n, d) value table."""
        full = np.empty((self.layout.n_slots, self.dim))
        for shard in range(self.layout.n_shards):
            full[self.layout.owned_slots(shard)] = self.shards[shard]
        return full

    def gather_acc(self) -> np.ndarray:
        full = np.empty((self.layout.n_slots, self.dim))
        for shard in range(self.layout.n_shards):
            full[self.layout.owned_slots(shard)] = self.acc[shard]
        return full

    def dump(self, out_dir: str) -> None:
        """One checkpoint file per shard plus a text layout manifest."""
        os.makedirs(out_dir, exist_ok=True)
        for shard in range(self.layout.n_shards):
            write_checkpoint(
                os.path.join(out_dir, f"shard_{shard:04d}.lmn"),
                KIND_SHARD,
                ints=(shard, self.layout.n_shards, self.layout.n_slots, self.dim),
                reals=(),
                tables=[("values", self.shards[shard]), ("acc", self.acc[shard])],
            )
        manifest = (
            f"shards={self.layout.n_shards}\n"
            f"rule={SHARD_RULE}\n"
            f"slots={self.layout.n_slots}\n"
        )
        tmp = os.path.join(out_dir, "layout.txt.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(manifest)
        os.replace(tmp, os.path.join(out_dir, "layout.txt"))

    @classmethod
    def load(cls, in_dir: str) -> "MemoryStore":
        manifest_path = os.path.join(in_dir, "layout.txt")
        fields = {}
        with open(manifest_path, encoding="utf-8") as fh:
            for line in fh:
                key, _, value = line.strip().partition("=")
                fields[key] = value
        if fields.get("rule") != SHARD_RULE:
            raise CheckpointError(f"unknown shard rule {fields.get('rule')!r}")
        layout = ShardLayout(n_slots=int(fields["slots"]),
                             n_shards=int(fields["shards"]))
        store = cls.__new__(cls)
        store.layout = layout
        store.shards = []
        store.acc = []
        for shard in range(layout.n_shards):
            ckpt = read_checkpoint(os.path.join(in_dir, f"shard_{shard:04d}.lmn"))
            if ckpt.kind != KIND_SHARD or ckpt.ints[0] != shard:
                raise CheckpointError(f"shard file {shard} is inconsistent")
            store.shards.append(ckpt.table("values").copy())
            store.acc.append(ckpt.table("acc").copy())
        store.dim = store.shards[0].shape[1]
        store.stats = {
            "lookups": 0, "serving_lookups": 0, "requests_in": 0,
            "rows_fetched": 0, "messages": 0, "updates": 0, "rows_updated": 0,
        }
        store._stats_lock = threading.Lock()
        return store
