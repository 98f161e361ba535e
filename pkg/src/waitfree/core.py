"""The universal construct: linearizable wait-free access to a sequential object.

A fixed pool of slots holds replicas of the object, each guarded by a
strong-trylock reader-writer lock and stamped with the queue node whose
mutation was applied last (``head``).  ``cur_comb`` indexes the slot
reads execute on; it is always shared- or handover-protected, its head
ticket only ever grows, and it never lags the queue tail by more than
``max_threads`` tickets.

An update enqueues its mutation, grabs any slot exclusively, catches the
replica up through the queue (copying from the current slot first if the
replica is missing or its chain was reclaimed), then publishes the slot:
downgrade to handover, shared-lock the current slot, verify its head
ticket is older, CAS ``cur_comb`` over, and release the superseded slot
cross-thread.  Helpers store each traversed node's result as they go, so
an update that finds its ticket already covered just returns the stored
result.

A read trylocks the current slot a few times; if writers keep moving it,
the read function itself is enqueued and some updater's helping pass
fills in its result, which keeps reads wait-free even in configurations
where updates are blocking (``max_objs < 2 * max_threads``).

Thread ids must be registered (:meth:`Construct.register_thread`) before
use.  Mutation and read functions must be deterministic, side-effect-free
functions of the object: helpers re-execute them on other threads, and
racing helpers must compute identical results.  Results must fit one
machine word (ints/bools); wider payloads are out of scope.
"""

from __future__ import annotations

import copy as _copymod
import threading
import time
from typing import Any, Callable, Optional

from waitfree import hooks
from waitfree._atomics import AtomicInt
from waitfree.debugging import ProbeLog, env_debug_default
from waitfree.mutation_queue import MutationNode, MutationQueue
from waitfree.reclaim import (
    DEFAULT_CIRCBUFF_SIZE,
    HP_CURCOMB,
    HP_TRAVERSAL,
    MemoryTracker,
    Reclaimer,
)
from waitfree.rwlock import StrongTryRwLock

DEFAULT_MAX_READ_TRIES = 4
_BLOCKING_BACKOFF = 20e-6  # seconds between scan passes when updates may block


class ConfigurationError(ValueError):
    """Construct parameters cannot support the protocol."""


class RegistrationError(RuntimeError):
    """Operation attempted with an unregistered or out-of-range thread id."""


class CombinedSlot:
    __slots__ = ("head", "replica", "lock")

    def __init__(self, lock: StrongTryRwLock) -> None:
        self.head: Optional[MutationNode] = None
        self.replica: Any = None
        self.lock = lock


def _default_replica_bytes(obj: Any) -> int:
    fn = getattr(obj, "approx_bytes", None)
    if fn is not None:
        return int(fn())
    try:
        return 80 * len(obj) + 64
    except TypeError:
        return 256


class Construct:
    def __init__(
        self,
        initial: Any,
        max_threads: int,
        max_objs: int,
        *,
        size_circbuff: int = DEFAULT_CIRCBUFF_SIZE,
        max_read_tries: int = DEFAULT_MAX_READ_TRIES,
        copy_fn: Callable[[Any], Any] | None = None,
        replica_bytes: Callable[[Any], int] | None = None,
        debug: bool | None = None,
    ) -> None:
        if max_threads < 1:
            raise ConfigurationError("max_threads must be >= 1")
        if max_objs < 2:
            raise ConfigurationError(
                "max_objs must be >= 2: one slot cannot be both the published "
                "replica and a writer's workspace"
            )
        self._max_threads = max_threads
        self._max_objs = max_objs
        self._max_read_tries = max_read_tries
        self._debug = env_debug_default() if debug is None else debug
        self.probes = ProbeLog()
        self.tracker = MemoryTracker(self.probes if self._debug else None)
        self._reclaim = Reclaimer(
            max_threads, self.tracker, size_circbuff,
            self.probes if self._debug else None,
        )
        self._queue = MutationQueue(max_threads, self.tracker.new_node)
        if copy_fn is None:
            copy_fn = (
                (lambda o: o.copy()) if hasattr(initial, "copy") else _copymod.deepcopy
            )
        self._copy_fn = copy_fn
        self._replica_bytes = replica_bytes or _default_replica_bytes
        self._apply_loop_bound = size_circbuff * max_threads + max_threads

        self._combs = [
            CombinedSlot(StrongTryRwLock(max_threads, self.probes if self._debug else None))
            for _ in range(max_objs)
        ]
        first = self._combs[0]
        first.head = self._queue.sentinel
        self._reclaim.pin(first.head)
        first.replica = initial
        self.tracker.alloc_replica(initial, self._replica_bytes(initial))
        # the published slot starts read-protected with no owner
        first.lock.exclusive_try_lock(0)
        first.lock.downgrade_to_handover()
        self._cur_comb = AtomicInt(0)

        self._fast_path: tuple[int, float] | None = None
        self._reg_lock = threading.Lock()
        self._registered = [False] * max_threads
        self._held = [0] * max_threads  # debug: slot locks held per thread

    # -- configuration ------------------------------------------------------

    @property
    def max_threads(self) -> int:
        return self._max_threads

    @property
    def max_objs(self) -> int:
        return self._max_objs

    @property
    def is_wait_free_for_updates(self) -> bool:
        return self._max_objs >= 2 * self._max_threads

    def set_fast_path(self, slot_limit: int, budget: float) -> None:
        """Scan only slots [0, slot_limit) for ``budget`` seconds per update.

        A timed blocking fast path over fewer replicas; after the budget the
        scan reverts to the full array and the usual progress guarantees.
        A zero budget is identical to the plain construct.
        """
        if not 1 <= slot_limit <= self._max_objs:
            raise ConfigurationError("slot_limit must be in [1, max_objs]")
        if budget < 0:
            raise ConfigurationError("budget must be >= 0")
        self._fast_path = (slot_limit, budget)

    # -- thread registration --------------------------------------------------

    def register_thread(self, tid: int | None = None) -> int:
        with self._reg_lock:
            if tid is None:
                for cand in range(self._max_threads):
                    if not self._registered[cand]:
                        tid = cand
                        break
                else:
                    raise RegistrationError("all thread ids are registered")
            elif not 0 <= tid < self._max_threads:
                raise RegistrationError(f"tid {tid} out of range")
            elif self._registered[tid]:
                raise RegistrationError(f"tid {tid} already registered")
            self._registered[tid] = True
            return tid

    def deregister_thread(self, tid: int) -> None:
        with self._reg_lock:
            if not 0 <= tid < self._max_threads or not self._registered[tid]:
                raise RegistrationError(f"tid {tid} is not registered")
            self._registered[tid] = False
            none_left = not any(self._registered)
        self._reclaim.deregister(tid)
        if none_left:
            self._quiesce(tid)

    def _check_registered(self, tid: int) -> None:
        if not 0 <= tid < self._max_threads or not self._registered[tid]:
            raise RegistrationError(f"tid {tid} is not registered")

    # -- public operations ------------------------------------------------------

    def apply_update(self, mutation: Callable[[Any], Any], tid: int) -> Any:
        self._check_registered(tid)
        node = self._queue.enqueue(mutation, tid)
        hooks.fire(hooks.AFTER_ENQUEUE, tid)
        tkt = node.ticket
        slot, idx = self._acquire_exclusive_slot(tid)
        hooks.fire(hooks.AFTER_EXCLUSIVE_LOCK, tid)
        debug = self._debug

        mn = slot.head
        if mn is not None and mn.ticket >= tkt:
            # a helper already applied us and published past our ticket
            slot.lock.exclusive_unlock()
            self._held_dec(tid)
            return self._finish(node, tid)

        copied = False
        iters = 0
        while mn is not node:
            iters += 1
            if debug and iters > self._apply_loop_bound:
                self.probes.violation(
                    "apply-loop-bound", f"{iters} iterations exceed {self._apply_loop_bound}"
                )
            succ = None if mn is None else self._protected_successor(mn, tid)
            if succ is None:
                # replica missing or its chain was reclaimed: copy, once
                src_idx = self.get_combined(tkt, tid)
                if copied or src_idx is None:
                    # our ticket is necessarily covered at cur_comb already
                    self._set_head(slot, mn, tid)
                    slot.lock.exclusive_unlock()
                    self._held_dec(tid)
                    self._reclaim.clear(tid, HP_TRAVERSAL)
                    if debug:
                        self.probes.note_apply_iters(iters)
                    return self._finish(node, tid)
                src = self._combs[src_idx]
                self.update_head_obj(slot, src, tid)
                src.lock.shared_unlock(tid)
                self._held_dec(tid)
                copied = True
                mn = slot.head
                continue
            mn = succ
            self._apply_node(mn, slot.replica)
        self._set_head(slot, node, tid)
        self._reclaim.clear(tid, HP_TRAVERSAL)
        if debug:
            self.probes.note_apply_iters(iters)

        slot.lock.downgrade_to_handover()
        self._held_dec(tid)
        hooks.fire(hooks.AFTER_DOWNGRADE, tid)
        for _ in range(self._max_threads):
            cur = self._cur_comb.load()
            comb = self._combs[cur]
            old_ticket = self._shared_lock_check_ticket(comb, cur, tkt, tid)
            if old_ticket is None:
                continue
            hooks.fire(hooks.BEFORE_CURCOMB_CAS, tid)
            tail_before = self._queue.tail_ticket() if debug else 0
            if self._cur_comb.cas(cur, idx):
                if debug:
                    self._record_transition(old_ticket, tkt, tail_before - tkt)
                comb.lock.handover_unlock()
                comb.lock.shared_unlock(tid)
                self._held_dec(tid)
                return self._finish(node, tid)
            comb.lock.shared_unlock(tid)
            self._held_dec(tid)
        slot.lock.handover_unlock()
        return self._finish(node, tid)

    def apply_read(self, reader: Callable[[Any], Any], tid: int) -> Any:
        self._check_registered(tid)
        node: Optional[MutationNode] = None
        for i in range(self._max_read_tries + self._max_threads):
            if i == self._max_read_tries:
                # writers keep moving cur_comb: park the read in the queue,
                # an updater's helping pass will fill in its result
                node = self._queue.enqueue(reader, tid)
            cur = self._cur_comb.load()
            comb = self._combs[cur]
            if comb.lock.shared_try_lock(tid):
                if self._cur_comb.load() == cur:
                    try:
                        ret = reader(comb.replica)
                    finally:
                        comb.lock.shared_unlock(tid)
                    if node is not None:
                        self._reclaim.release(node, tid)
                    return ret
                comb.lock.shared_unlock(tid)
        return self._finish(node, tid)

    def get_combined(self, ticket: int, tid: int) -> Optional[int]:
        """Shared-lock the current slot for copying, if it is older than ticket.

        Returns the slot index with its shared lock held by tid, or None when
        either the current slot already covers ``ticket`` or max_threads
        attempts failed (the slot transitioned under us each time) — in both
        cases the caller's operation is already visible and its result stored.
        """
        for _ in range(self._max_threads):
            cur = self._cur_comb.load()
            comb = self._combs[cur]
            if not comb.lock.shared_try_lock(tid):
                continue
            self._held_inc(tid)
            if self._cur_comb.load() != cur:
                comb.lock.shared_unlock(tid)
                self._held_dec(tid)
                continue
            head = comb.head
            if head is None:
                comb.lock.shared_unlock(tid)
                self._held_dec(tid)
                continue
            if head.ticket >= ticket:
                comb.lock.shared_unlock(tid)
                self._held_dec(tid)
                return None
            return cur
        return None

    def update_head_obj(self, dst: CombinedSlot, src: CombinedSlot, tid: int) -> None:
        """Bring dst up to src: deep-copy the replica, adopt src's head.

        Caller holds dst exclusively and src in shared mode; the shared hold
        freezes src.head and keeps the replica consistent during the copy.
        """
        self._set_head(dst, src.head, tid)
        old_replica = dst.replica
        new_replica = self._copy_fn(src.replica)
        dst.replica = new_replica
        self.tracker.alloc_replica(new_replica, self._replica_bytes(new_replica))
        if old_replica is not None:
            self._reclaim.retire_replica(old_replica)

    # -- internals ------------------------------------------------------------

    def _acquire_exclusive_slot(self, tid: int) -> tuple[CombinedSlot, int]:
        max_objs = self._max_objs
        blocking = max_objs < 2 * self._max_threads
        fast_path = self._fast_path
        deadline = time.monotonic() + fast_path[1] if fast_path is not None else None
        while True:
            limit = max_objs
            if deadline is not None and time.monotonic() < deadline:
                limit = fast_path[0]
            for k in range(limit):
                i = (tid + k) % limit
                slot = self._combs[i]
                if slot.lock.exclusive_try_lock(tid):
                    self._held_inc(tid)
                    return slot, i
            if blocking:
                time.sleep(_BLOCKING_BACKOFF)

    def _protected_successor(self, mn: MutationNode, tid: int) -> Optional[MutationNode]:
        nxt = mn.next_ref.load()
        if nxt is None or nxt is mn:
            return None
        if self._reclaim.protect(tid, HP_TRAVERSAL, nxt) is None:
            return None
        if nxt.ticket == 0:
            nxt.ticket = mn.ticket + 1
        return nxt

    def _apply_node(self, node: MutationNode, replica: Any) -> None:
        if self._debug:
            node.check_alive(self.probes)
        node.result.store_once(node.mutation(replica), self.probes if self._debug else None)

    def _set_head(self, slot: CombinedSlot, new_head: Optional[MutationNode], tid: int) -> None:
        old = slot.head
        if old is new_head:
            return
        if new_head is not None:
            self._reclaim.pin(new_head)
        slot.head = new_head
        if old is not None:
            self._reclaim.release(old, tid)

    def _shared_lock_check_ticket(
        self, comb: CombinedSlot, cur: int, ticket: int, tid: int
    ) -> Optional[int]:
        """Shared-trylock comb and revalidate it is still cur_comb with an
        older head; returns the head ticket on success, None (unlocked) else."""
        if not comb.lock.shared_try_lock(tid):
            return None
        self._held_inc(tid)
        if self._cur_comb.load() != cur:
            comb.lock.shared_unlock(tid)
            self._held_dec(tid)
            return None
        head = comb.head
        if head is None or head.ticket >= ticket:
            comb.lock.shared_unlock(tid)
            self._held_dec(tid)
            return None
        return head.ticket

    def _finish(self, node: MutationNode, tid: int) -> Any:
        if self._debug:
            self._assert_visibility(node.ticket, tid)
        if not node.result.is_set():
            raise RuntimeError("operation completed without a stored result")
        result = node.result.load()
        self._reclaim.release(node, tid)
        return result

    # -- debug probes --------------------------------------------------------

    def _held_inc(self, tid: int) -> None:
        if self._debug:
            held = self._held[tid] + 1
            self._held[tid] = held
            if held > 2:
                self.probes.violation("slot-budget", f"tid {tid} holds {held} slot locks")

    def _held_dec(self, tid: int) -> None:
        if self._debug:
            self._held[tid] -= 1

    def _record_transition(self, old_ticket: int, new_ticket: int, lag: int) -> None:
        self.probes.transition(old_ticket, new_ticket)
        if new_ticket <= old_ticket:
            self.probes.violation(
                "curcomb-monotonicity", f"head ticket {old_ticket} -> {new_ticket}"
            )
        self.probes.lag_sample(lag)
        if lag > self._max_threads:
            self.probes.violation(
                "lag-bound", f"tail leads new head by {lag} > {self._max_threads}"
            )

    def _assert_visibility(self, ticket: int, tid: int) -> None:
        seen = self.current_head_ticket(tid)
        if seen is not None and seen < ticket:
            self.probes.violation(
                "visibility", f"returning op {ticket} while cur_comb head is {seen}"
            )

    def current_head_ticket(self, tid: int) -> Optional[int]:
        """Hazard-protected sample of the current slot's head ticket."""
        for _ in range(8):
            cur = self._cur_comb.load()
            comb = self._combs[cur]
            head = comb.head
            if head is None:
                continue
            if self._reclaim.protect(tid, HP_CURCOMB, head) is None:
                continue
            if self._cur_comb.load() == cur and comb.head is head:
                ticket = head.ticket
                self._reclaim.clear(tid, HP_CURCOMB)
                return ticket
            self._reclaim.clear(tid, HP_CURCOMB)
        return None

    # -- introspection for tests and probes -----------------------------------

    @property
    def tail_ticket(self) -> int:
        return self._queue.tail_ticket()

    @property
    def cur_comb_index(self) -> int:
        return self._cur_comb.load()

    @property
    def queue(self) -> MutationQueue:
        return self._queue

    @property
    def reclaimer(self) -> Reclaimer:
        return self._reclaim

    def slot(self, idx: int) -> CombinedSlot:
        return self._combs[idx]

    # -- quiescent teardown ----------------------------------------------------

    def _quiesce(self, tid: int) -> None:
        """Called once no thread is registered: unpin stale slots and drain.

        Slots still locked (a failed thread never released them) are
        skipped; their pins stay stranded, which is the documented cost of
        a thread death.
        """
        cur = self._cur_comb.load()
        for i, slot in enumerate(self._combs):
            if i == cur:
                continue
            if not slot.lock.exclusive_try_lock(tid):
                continue
            if slot.head is not None:
                self._reclaim.release(slot.head, None)
                slot.head = None
            if slot.replica is not None:
                self._reclaim.retire_replica(slot.replica)
                slot.replica = None
            slot.lock.exclusive_unlock()
        self._reclaim.drain_all()
