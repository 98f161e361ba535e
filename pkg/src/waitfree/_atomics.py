"""Minimal atomic cells for lock-free style code.

CPython's GIL makes single attribute loads and stores atomic and, because
every bytecode runs under the interpreter lock, sequentially consistent
with respect to each other.  Read-modify-write sequences are not atomic,
so compare-and-swap and fetch-and-add take a per-cell mutex.  On
free-threaded builds (no GIL) plain loads/stores lose their ordering
guarantee, so the cells route everything through the mutex there.
"""

from __future__ import annotations

import sys
import threading
from typing import Any

_GIL = getattr(sys, "_is_gil_enabled", lambda: True)()


class AtomicInt:
    """Integer cell with atomic load/store/cas/fetch_add."""

    __slots__ = ("_v", "_lock")

    def __init__(self, value: int = 0) -> None:
        self._v = value
        self._lock = threading.Lock()

    if _GIL:

        def load(self) -> int:
            return self._v

        def store(self, value: int) -> None:
            self._v = value

    else:

        def load(self) -> int:  # noqa: F811
            with self._lock:
                return self._v

        def store(self, value: int) -> None:  # noqa: F811
            with self._lock:
                self._v = value

    def cas(self, expected: int, desired: int) -> bool:
        with self._lock:
            if self._v == expected:
                self._v = desired
                return True
            return False

    def fetch_add(self, delta: int) -> int:
        """Add delta, returning the previous value."""
        with self._lock:
            old = self._v
            self._v = old + delta
            return old

    def add_and_fetch(self, delta: int) -> int:
        """Add delta, returning the new value."""
        with self._lock:
            self._v += delta
            return self._v


class AtomicRef:
    """Reference cell with atomic load/store and identity-compared cas."""

    __slots__ = ("_v", "_lock")

    def __init__(self, value: Any = None) -> None:
        self._v = value
        self._lock = threading.Lock()

    if _GIL:

        def load(self) -> Any:
            return self._v

        def store(self, value: Any) -> None:
            self._v = value

    else:

        def load(self) -> Any:  # noqa: F811
            with self._lock:
                return self._v

        def store(self, value: Any) -> None:  # noqa: F811
            with self._lock:
                self._v = value

    def cas(self, expected: Any, desired: Any) -> bool:
        with self._lock:
            if self._v is expected:
                self._v = desired
                return True
            return False
