"""Labels for the index set ``S ∪ S̄`` (unbared ``1..N`` and bared ``1̄..N̄``)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List


@dataclass(frozen=True, order=True)
class Idx:
    k: int
    bar: bool = False

    def __str__(self):
        return f"{self.k}b" if self.bar else f"{self.k}"

    @property
    def sg(self) -> int:
        return -1 if self.bar else 1

    @classmethod
    def parse(cls, text) -> "Idx":
        if isinstance(text, Idx):
            return text
        text = str(text).strip()
        if text.endswith(("b", "̄")):
            return cls(int(text[:-1]), True)
        return cls(int(text), False)


def all_indices(N: int) -> List[Idx]:
    return [Idx(k) for k in range(1, N + 1)] + [Idx(k, True) for k in range(1, N + 1)]


ONE = Idx(1)
ONE_BAR = Idx(1, True)
