from __future__ import annotations

from collections import defaultdict


class AllocTrace:
    """Counts buffer elements allocated by each pipeline, per buffer and rank.

    Pipelines call :meth:`record` for each tensor they materialize on the
    dispatch path, e.g. ``trace.record("pf", "dispatch_in", rank, B * H)``.
    """

    def __init__(self) -> None:
        self._elements: dict[tuple[str, str, int], int] = defaultdict(int)

    def record(self, pipeline: str, buffer: str, rank: int, elements: int) -> None:
        self._elements[(pipeline, buffer, rank)] += int(elements)

    def total(self, pipeline: str, buffer: str | None = None) -> int:
        return sum(v for (p, b, _), v in self._elements.items()
                   if p == pipeline and (buffer is None or b == buffer))

    def per_rank(self, pipeline: str, buffer: str) -> dict[int, int]:
        return {r: v for (p, b, r), v in sorted(self._elements.items())
                if p == pipeline and b == buffer}

    def peak_rank(self, pipeline: str, buffer: str) -> int:
        return max(self.per_rank(pipeline, buffer).values(), default=0)
