"""Reader-writer lock with strong trylock, downgrade and handover.

Four logical states: unlocked, shared (read-only), exclusive (read-write)
and handover.  Handover is shared mode without an owning thread: readers
may still enter, writers are locked out until some thread (any thread)
calls :meth:`handover_unlock`.

Layout follows the scalable reader-indicator scheme: one occupancy flag
per thread id plus a single atomic writer word.  A reader raises its flag
and then checks the writer word; a writer claims the word by CAS and then
verifies every reader flag is clear, rolling the claim back on failure.
Every operation finishes in a bounded number of steps (the only loop is
the fixed-size indicator scan), and among any set of exclusive trylocks
racing on a free lock, exactly one wins the claiming CAS.

A reader/writer race may fail both parties (the writer sees the transient
flag, the reader sees the transient claim); that is permitted, only
writer/writer races must elect a winner.

Misuse (unlocking without holding, downgrading without exclusive access)
raises :class:`LockUsageError` immediately; these are contract violations,
not recoverable conditions.
"""

from __future__ import annotations

from waitfree._atomics import AtomicInt
from waitfree.debugging import ProbeLog

UNLOCKED = 0
HANDOVER = 1
_EXCLUSIVE_BASE = 2  # word value 2 + tid encodes EXCLUSIVE(tid)


class LockUsageError(RuntimeError):
    """A lock operation violated its calling contract."""


class StrongTryRwLock:
    __slots__ = ("_max_threads", "_readers", "_word", "_probes", "_last_steps")

    def __init__(self, max_threads: int, probes: ProbeLog | None = None) -> None:
        if max_threads < 1:
            raise ValueError("max_threads must be >= 1")
        self._max_threads = max_threads
        self._readers = [0] * max_threads
        self._word = AtomicInt(UNLOCKED)
        self._probes = probes
        # per-tid step count of the last trylock call, for step-budget tests
        self._last_steps = [0] * max_threads

    @property
    def max_threads(self) -> int:
        return self._max_threads

    def _check_tid(self, tid: int) -> None:
        if not 0 <= tid < self._max_threads:
            raise LockUsageError(f"tid {tid} out of range [0, {self._max_threads})")

    def shared_try_lock(self, tid: int) -> bool:
        self._check_tid(tid)
        if self._readers[tid]:
            raise LockUsageError(f"tid {tid} already holds the shared lock")
        self._readers[tid] = 1
        steps = 2
        word = self._word.load()
        if word >= _EXCLUSIVE_BASE:
            self._readers[tid] = 0
            steps += 1
            self._note_steps(tid, steps)
            return False
        self._note_steps(tid, steps)
        return True

    def shared_unlock(self, tid: int) -> None:
        self._check_tid(tid)
        if not self._readers[tid]:
            raise LockUsageError(f"tid {tid} does not hold the shared lock")
        self._readers[tid] = 0

    def exclusive_try_lock(self, tid: int) -> bool:
        self._check_tid(tid)
        if not self._word.cas(UNLOCKED, _EXCLUSIVE_BASE + tid):
            self._note_steps(tid, 1)
            return False
        steps = 1
        readers = self._readers
        for flag in readers:
            steps += 1
            if flag:
                # roll the claim back: a reader got in first
                self._word.store(UNLOCKED)
                self._note_steps(tid, steps + 1)
                return False
        self._note_steps(tid, steps)
        return True

    def exclusive_unlock(self) -> None:
        word = self._word.load()
        if word < _EXCLUSIVE_BASE:
            raise LockUsageError("exclusive_unlock without exclusive hold")
        self._word.store(UNLOCKED)

    def downgrade_to_handover(self) -> None:
        word = self._word.load()
        if word < _EXCLUSIVE_BASE:
            raise LockUsageError("downgrade_to_handover without exclusive hold")
        self._word.store(HANDOVER)

    def handover_unlock(self) -> None:
        # Callable from any thread; that cross-thread release is the point.
        if not self._word.cas(HANDOVER, UNLOCKED):
            raise LockUsageError("handover_unlock while not in handover state")

    # -- introspection ----------------------------------------------------

    def state(self) -> str:
        """Human-readable lock state (racy; for tests and debugging only)."""
        word = self._word.load()
        readers = [t for t in range(self._max_threads) if self._readers[t]]
        if word >= _EXCLUSIVE_BASE:
            return f"exclusive(tid={word - _EXCLUSIVE_BASE})"
        if word == HANDOVER:
            return "handover" + (f"+readers{readers}" if readers else "")
        if readers:
            return f"shared{readers}"
        return "unlocked"

    def last_steps(self, tid: int) -> int:
        return self._last_steps[tid]

    def _note_steps(self, tid: int, steps: int) -> None:
        self._last_steps[tid] = steps
        if self._probes is not None:
            self._probes.note_lock_steps(steps)
