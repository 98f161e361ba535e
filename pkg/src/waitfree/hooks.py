"""Test-only pause-point registry.

The core fires named hooks at four scheduling-sensitive spots so that the
fault-injection harness can freeze threads there deterministically.  With
no handler installed, a fire is one global load and a None test.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

AFTER_ENQUEUE = "after-enqueue"
AFTER_EXCLUSIVE_LOCK = "after-exclusive-lock"
BEFORE_CURCOMB_CAS = "before-curcomb-cas"
AFTER_DOWNGRADE = "after-downgrade"

PAUSE_POINTS = (
    AFTER_ENQUEUE,
    AFTER_EXCLUSIVE_LOCK,
    BEFORE_CURCOMB_CAS,
    AFTER_DOWNGRADE,
)

Handler = Callable[[str, int], None]

_handler: Optional[Handler] = None
_install_lock = threading.Lock()


def fire(point: str, tid: int) -> None:
    h = _handler
    if h is not None:
        h(point, tid)


def install(handler: Handler) -> None:
    global _handler
    with _install_lock:
        if _handler is not None:
            raise RuntimeError("a pause-point handler is already installed")
        _handler = handler


def uninstall() -> None:
    global _handler
    with _install_lock:
        _handler = None


def installed() -> bool:
    return _handler is not None
