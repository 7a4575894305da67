"""Internal helpers."""
from __future__ import annotations

from typing import TypeVar

T = TypeVar("T")


def evolve(obj: T, **changes) -> T:
    """Copy-with-changes for frozen dataclasses, skipping __init__.

    Semantics match :func:`dataclasses.replace` for plain field updates; used
    on the transition hot path where replace() is too slow.
    """
    new = object.__new__(type(obj))
    d = new.__dict__
    d.update(obj.__dict__)
    d.update(changes)
    return new
