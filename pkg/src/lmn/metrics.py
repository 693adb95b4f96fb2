"""Ranking metrics and the relative-improvement arithmetic used in the
result tables.

AUC is the Mann-Whitney rank statistic with average ranks on ties;
relative AUC improvement normalises the gain over a random ranker,
``(auc - 0.5) / (auc_base - 0.5) - 1``, and LogLoss improvement is the
plain relative change (negative is better).  Both improvements are
reported as percentages rounded half-even to two decimals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LOGLOSS_CLAMP = 1e-15


def auc(labels, scores) -> float:
    """Probability a random positive outranks a random negative."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape or y.size == 0:
        raise ContractError(f"auc: {y.size} labels vs {s.size} scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ContractError("auc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auc is undefined with a single class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(y.size)
    sorted_scores = s[order]
    # average rank within tied groups, 1-based
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    start = 0
    for stop in list(boundaries) + [y.size]:
        ranks[order[start:stop]] = 0.5 * (start + stop + 1)
        start = stop
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(labels, scores) -> float:
    """Mean negative log-likelihood; scores clamped away from 0 and 1."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape or y.size == 0:
        raise ContractError(f"logloss: {y.size} labels vs {s.size} scores")
    p = np.clip(s, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def auc_improvement(auc_model: float, auc_base: float) -> float:
    """Relative AUC gain over random, in percent (2 decimals, half-even)."""
    if auc_base <= 0.5:
        raise ContractError(
            f"auc_improvement needs a base better than random, got {auc_base}"
        )
    value = ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0
    return round(value, 2)


def logloss_improvement(logloss_model: float, logloss_base: float) -> float:
    """Relative LogLoss change in percent (negative is better)."""
    if logloss_base <= 0:
        raise ContractError(
            f"logloss_improvement needs a positive base, got {logloss_base}"
        )
    value = (logloss_model - logloss_base) / logloss_base * 100.0
    return round(value, 2)


@dataclass
class MetricsReport:
    """AUC / LogLoss plus optional improvement columns over a baseline."""

    auc: float
    logloss: float
    sample_count: int
    auc_imp_pct: float | None = None
    logloss_imp_pct: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ContractError(f"auc {self.auc} outside [0, 1]")
        if self.logloss < 0.0:
            raise ContractError(f"logloss {self.logloss} negative")

    @classmethod
    def from_scores(cls, labels, scores, base_auc: float | None = None,
                    base_logloss: float | None = None) -> "MetricsReport":
        a = auc(labels, scores)
        l = logloss(labels, scores)
        return cls(
            auc=a,
            logloss=l,
            sample_count=int(np.asarray(labels).size),
            auc_imp_pct=None if base_auc is None else auc_improvement(a, base_auc),
            logloss_imp_pct=(None if base_logloss is None
                             else logloss_improvement(l, base_logloss)),
        )

    CSV_HEADER = "auc,logloss,auc_imp_pct,logloss_imp_pct,sample_count"

    def csv_row(self) -> str:
        imp_a = "" if self.auc_imp_pct is None else f"{self.auc_imp_pct:.2f}"
        imp_l = "" if self.logloss_imp_pct is None else f"{self.logloss_imp_pct:.2f}"
        return (f"{self.auc:.6f},{self.logloss:.6f},{imp_a},{imp_l},"
                f"{self.sample_count}")
