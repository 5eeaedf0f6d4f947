"""Process-wide counters for repairs, clipping and projections.

Numerical safeguards (weight clipping, density-matrix repair, simplex
projection) record how often they fire here so run reports can show them.
"""
from collections import Counter
from contextlib import contextmanager

_counts: Counter = Counter()
_maxima: dict = {}


def count(name: str, n: int = 1) -> None:
    _counts[name] += n


def record_max(name: str, value: float) -> None:
    if value > _maxima.get(name, float("-inf")):
        _maxima[name] = float(value)


def snapshot() -> dict:
    return dict(sorted({**_counts, **_maxima}.items()))


def reset() -> None:
    _counts.clear()
    _maxima.clear()


@contextmanager
def collecting():
    """Reset the counters, yield a dict that is filled on exit."""
    reset()
    out: dict = {}
    try:
        yield out
    finally:
        out.update(snapshot())
