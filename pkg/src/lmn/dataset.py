"""Synthetic CTR logs with planted short- and long-term interests.

Every user gets a weekly "current" interest cluster that drifts over
time, plus a persistent long-term interest fixed to their first-week
cluster.  Click probability is a logistic function of cluster matches
and a per-item quality bias; behaviour sequences are the user's previous
clicks (strictly earlier days, so generation is day-causal), padded with
zeros to a fixed length.  The long-term component keeps boosting labels
for the whole run while its evidence lives mostly in the oldest sequence
positions, which is the signal a shared memory can compress and a plain
mean pool dilutes.

CSV schema (one header row):
``user_id,item_id,cross_id,seq,mask_len,label,day`` where ``seq`` is a
"|"-joined list of exactly L item ids with 0 padding.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .errors import ContractError

CSV_HEADER = "user_id,item_id,cross_id,seq,mask_len,label,day"


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for one named purpose."""
    tag = int.from_bytes(hashlib.blake2s(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the generator; defaults size a desk-scale run."""

    users: int = 1800
    items: int = 400
    clusters: int = 10
    days: int = 28
    seq_len: int = 50
    daily_rate: float = 1.8      # browsing events per user per day (Poisson)
    label_noise: float = 0.02    # probability of flipping a label
    seed: int = 0
    cross_buckets: int = 1000
    # label model
    base_logit: float = -1.2
    w_current: float = 2.0
    w_longterm: float = 2.0
    item_bias_scale: float = 1.0
    # candidate exposure mixture
    p_current: float = 0.45
    p_longterm: float = 0.15
    drift_days: int = 7

    def validate(self) -> "SyntheticSpec":
        if self.clusters < 2:
            raise ContractError(f"need at least 2 clusters, got {self.clusters}")
        if not 0.0 <= self.label_noise < 0.5 + 1e-12:
            raise ContractError(f"label noise {self.label_noise} outside [0, 0.5]")
        if self.seq_len < 1 or self.days < 1 or self.users < 1 or self.items < 2:
            raise ContractError("users/items/days/seq_len must be positive")
        if self.p_current + self.p_longterm > 1.0:
            raise ContractError("exposure mixture probabilities exceed 1")
        if self.drift_days < 1:
            raise ContractError("drift_days must be >= 1")
        return self

    @property
    def eval_days(self) -> int:
        return math.ceil(self.days / 4)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "SyntheticSpec":
        kwargs = {}
        casts = {f.name: f.type for f in dc_fields(cls)}
        for key, raw in mapping.items():
            if key not in casts:
                raise ContractError(f"unknown dataset spec key {key!r}")
            kind = casts[key]
            kwargs[key] = int(raw) if kind == "int" else float(raw)
        return cls(**kwargs).validate()

    def to_mapping(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in dc_fields(self)}


@dataclass
class Event:
    """Ground truth behind one CSV row (tests only; never serialised)."""

    user_id: int
    item_id: int
    day: int
    label: int
    p_click: float
    clean_label: int


@dataclass
class GenResult:
    train_path: str | None
    eval_path: str | None
    train_rows: list[str] = field(default_factory=list)
    eval_rows: list[str] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)  # CSV row order: train then eval


def item_cluster(item_id: int, clusters: int) -> int:
    """Deterministic item -> cluster map (ids are 1-based; 0 is padding)."""
    return (item_id - 1) % clusters


def cross_bucket(user_id: int, item_id: int, buckets: int) -> int:
    return 1 + (user_id * 2654435761 + item_id * 40503) % buckets


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def generate(spec: SyntheticSpec, out_dir: str | None = None,
             keep_events: bool = False) -> GenResult:
    """Produce train/eval CSVs (train = all but the last ceil(D/4) days).

    Deterministic per seed: identical spec + seed give byte-identical
    files.  With ``keep_events`` the returned result carries the hidden
    click probabilities for every row, aligned with train rows followed
    by eval rows.
    """
    spec.validate()
    rng = rng_stream(spec.seed, "gen")
    n_weeks = (spec.days + spec.drift_days - 1) // spec.drift_days
    user_week_cluster = rng.integers(0, spec.clusters, size=(spec.users + 1, n_weeks))
    item_bias = rng.normal(0.0, spec.item_bias_scale, size=spec.items + 1)
    items_of = [
        np.array([j for j in range(1, spec.items + 1)
                  if item_cluster(j, spec.clusters) == c], dtype=np.int64)
        for c in range(spec.clusters)
    ]
    if any(arr.size == 0 for arr in items_of):
        raise ContractError("every cluster needs at least one item")

    first_day_eval = spec.days - spec.eval_days + 1
    train_rows: list[str] = []
    eval_rows: list[str] = []
    train_events: list[Event] = []
    eval_events: list[Event] = []

    for user in range(1, spec.users + 1):
        history: list[int] = []   # clicked item ids, chronological
        long_term = int(user_week_cluster[user, 0])
        counts = rng.poisson(spec.daily_rate, size=spec.days)
        for day in range(1, spec.days + 1):
            current = int(user_week_cluster[user, (day - 1) // spec.drift_days])
            window = history[-spec.seq_len:]
            seq = window + [0] * (spec.seq_len - len(window))
            seq_text = "|".join(str(s) for s in seq)
            mask_len = len(window)
            clicked_today: list[int] = []
            for _ in range(int(counts[day - 1])):
                roll = rng.random()
                if roll < spec.p_current:
                    pool = items_of[current]
                elif roll < spec.p_current + spec.p_longterm:
                    pool = items_of[long_term]
                else:
                    pool = None
                if pool is None:
                    item = int(rng.integers(1, spec.items + 1))
                else:
                    item = int(pool[rng.integers(0, pool.size)])
                cluster = item_cluster(item, spec.clusters)
                logit = spec.base_logit + item_bias[item]
                if cluster == current:
                    logit += spec.w_current
                if cluster == long_term:
                    logit += spec.w_longterm
                p = _sigmoid(logit)
                clean = 1 if rng.random() < p else 0
                label = clean ^ (1 if rng.random() < spec.label_noise else 0)
                row = (f"{user},{item},{cross_bucket(user, item, spec.cross_buckets)},"
                       f"{seq_text},{mask_len},{label},{day}")
                sink_rows = eval_rows if day >= first_day_eval else train_rows
                sink_rows.append(row)
                if keep_events:
                    ev = Event(user_id=user, item_id=item, day=day, label=label,
                               p_click=p, clean_label=clean)
                    (eval_events if day >= first_day_eval else train_events).append(ev)
                if label == 1:
                    clicked_today.append(item)
            history.extend(clicked_today)

    result = GenResult(train_path=None, eval_path=None,
                       train_rows=train_rows, eval_rows=eval_rows,
                       events=train_events + eval_events)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.train_path = os.path.join(out_dir, "train.csv")
        result.eval_path = os.path.join(out_dir, "eval.csv")
        for path, rows in ((result.train_path, train_rows),
                           (result.eval_path, eval_rows)):
            tmp = f"{path}.tmp"
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(CSV_HEADER + "\n")
                fh.write("\n".join(rows))
                if rows:
                    fh.write("\n")
            os.replace(tmp, path)
    return result


def parse_rows(rows: list[str], seq_len: int | None = None):
    """CSV body rows -> list of Sample (import is deferred to avoid a cycle)."""
    from .model import Sample

    samples = []
    for line in rows:
        parts = line.split(",")
        if len(parts) != 7:
            raise ContractError(f"bad CSV row (want 7 fields): {line!r}")
        seq = tuple(int(s) for s in parts[3].split("|"))
        if seq_len is not None and len(seq) != seq_len:
            raise ContractError(
                f"sequence length {len(seq)} != expected {seq_len}"
            )
        mask_len = int(parts[4])
        if sum(1 for s in seq if s != 0) != mask_len:
            raise ContractError(f"mask_len {mask_len} inconsistent with sequence")
        samples.append(Sample(
            user_id=int(parts[0]), item_id=int(parts[1]), cross_id=int(parts[2]),
            sequence=seq, label=int(parts[5]), day=int(parts[6]),
        ))
    return samples


def read_csv(path: str, seq_len: int | None = None):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ContractError(f"{path}: unexpected CSV header {header!r}")
        rows = [line.rstrip("\n") for line in fh if line.strip()]
    return parse_rows(rows, seq_len)
