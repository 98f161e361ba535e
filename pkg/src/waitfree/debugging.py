"""Debug invariant machinery: global toggle and per-construct probe log.

Debug checks (poisoned-node detection, ticket monotonicity, lag bounds,
slot budgets, loop bounds, result determinism) are enabled either
per-construct or globally through the ``WAITFREE_DEBUG`` environment
variable.  With the flag off, probe sites reduce to a single attribute
test so release benchmarking pays nothing.
"""

from __future__ import annotations

import os
import threading

ENV_FLAG = "WAITFREE_DEBUG"


def env_debug_default() -> bool:
    return os.environ.get(ENV_FLAG, "") not in ("", "0", "false", "False")


class ProbeLog:
    """Thread-safe sink for invariant violations and debug observations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._violations: list[tuple[str, str]] = []
        self._transitions: list[tuple[int, int]] = []  # (old head ticket, new head ticket)
        self._lag_samples: list[int] = []
        self.max_apply_iters = 0
        self.max_lock_steps = 0

    def violation(self, kind: str, detail: str) -> None:
        with self._lock:
            self._violations.append((kind, detail))

    def transition(self, old_ticket: int, new_ticket: int) -> None:
        with self._lock:
            self._transitions.append((old_ticket, new_ticket))

    def lag_sample(self, lag: int) -> None:
        with self._lock:
            self._lag_samples.append(lag)

    def note_apply_iters(self, iters: int) -> None:
        with self._lock:
            if iters > self.max_apply_iters:
                self.max_apply_iters = iters

    def note_lock_steps(self, steps: int) -> None:
        with self._lock:
            if steps > self.max_lock_steps:
                self.max_lock_steps = steps

    @property
    def violations(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._violations)

    @property
    def transitions(self) -> list[tuple[int, int]]:
        with self._lock:
            return list(self._transitions)

    @property
    def lag_samples(self) -> list[int]:
        with self._lock:
            return list(self._lag_samples)

    def clear(self) -> None:
        with self._lock:
            self._violations.clear()
            self._transitions.clear()
            self._lag_samples.clear()
            self.max_apply_iters = 0
            self.max_lock_steps = 0
