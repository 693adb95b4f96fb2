"""Multiply-add accounting for the scoring kernels.

The scaling claims are checked by counting the multiply-adds the scoring
code actually performs, not by timing alone.  Every kernel that computes
query/key scores reports its work to the global ``score_madds`` counter;
a counter increment covers one whole kernel call (one add per call, so
the accounting itself costs nothing measurable).
"""


class MaddCounter:
    """Running total of multiply-add operations."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += n

    def reset(self) -> None:
        self.total = 0

    @property
    def value(self) -> int:
        return self.total


# Single writer per the package concurrency contract (scoring happens on
# the training thread); eval workers only read values.
score_madds = MaddCounter()
