"""Record and replay of discrete decisions made during a forward pass.

Token selection, cosine argmax, and KM matching are piecewise constant in the
parameters. Finite-difference checks must hold them fixed, otherwise a tiny
perturbation can flip a selection and the numeric gradient measures a jump.
"""
from __future__ import annotations

import contextlib
from typing import Any, Callable, Optional


class ChoiceLog:
    def __init__(self):
        self.entries: list = []
        self.cursor = 0


_active: Optional[ChoiceLog] = None
_replaying = False


def decide(compute: Callable[[], Any]) -> Any:
    """Return ``compute()``, or the value recorded at this position on replay."""
    global _active
    if _active is None:
        return compute()
    if _replaying:
        if _active.cursor >= len(_active.entries):
            raise RuntimeError("replay requested more decisions than were recorded")
        value = _active.entries[_active.cursor]
        _active.cursor += 1
        return value
    value = compute()
    _active.entries.append(value)
    return value


@contextlib.contextmanager
def recording():
    global _active, _replaying
    prev = (_active, _replaying)
    log = ChoiceLog()
    _active, _replaying = log, False
    try:
        yield log
    finally:
        _active, _replaying = prev


@contextlib.contextmanager
def replaying(log: ChoiceLog):
    global _active, _replaying
    prev = (_active, _replaying)
    log.cursor = 0
    _active, _replaying = log, True
    try:
        yield log
    finally:
        _active, _replaying = prev
