"""Wait-free FIFO queue of mutation nodes with consecutive tickets.

The queue is the consensus on operation order: enqueue linearizes each
mutation at a unique, monotonically increasing ticket (successor ticket =
predecessor ticket + 1, sentinel is 0).  There is no dequeue; consumers
follow ``next`` links from the slot heads, and reclamation self-links the
``next`` field of freed nodes so that stale traversals detect the break
and signal :class:`CopyInvalidated`.

Enqueue is wait-free through an announce array.  A thread publishes its
node, then repeatedly either helps advance a lagging tail or tries to
link the pending announce whose turn it is (turn = next ticket mod
maxThreads), so a stalled enqueuer is finished by its helpers within a
bounded number of link completions.  Tickets are written only after a
link is observed; every writer derives the same positional value from
the predecessor, so racing ticket stores are benign, and the tail never
advances onto a node whose ticket is still unset.
"""

from __future__ import annotations

from typing import Any, Callable, Iterator, Optional

from waitfree._atomics import AtomicRef
from waitfree.debugging import ProbeLog

_UNSET = object()


class CopyInvalidated(Exception):
    """Traversal ran into reclaimed queue territory; the caller must re-copy."""


class ResultCell:
    """Fixed-width result slot, written at most with one distinct value."""

    __slots__ = ("_v",)

    def __init__(self) -> None:
        self._v: Any = _UNSET

    def store_once(self, value: Any, probes: ProbeLog | None = None) -> None:
        prev = self._v
        if prev is _UNSET:
            self._v = value
        elif probes is not None and prev != value:
            probes.violation(
                "result-mismatch",
                f"result cell first saw {prev!r}, a helper then computed {value!r}",
            )

    def load(self) -> Any:
        return self._v

    def is_set(self) -> bool:
        return self._v is not _UNSET


class MutationNode:
    __slots__ = ("mutation", "result", "next_ref", "ticket", "enq_tid", "refcnt", "freed")

    def __init__(self, mutation: Callable[[Any], Any], enq_tid: int) -> None:
        self.mutation = mutation  # stored by value, executed by any helper
        self.result = ResultCell()
        self.next_ref = AtomicRef(None)
        self.ticket = 0  # 0 = unset; filled once the node is linked
        self.enq_tid = enq_tid
        self.refcnt = None  # AtomicInt, attached by the allocator
        self.freed = False

    def check_alive(self, probes: ProbeLog | None) -> None:
        """Debug probe: payload access on a freed node is a use-after-free."""
        if self.freed and probes is not None:
            probes.violation("use-after-free", f"payload access on freed node t={self.ticket}")

    def __repr__(self) -> str:  # pragma: no cover
        return f"<node t={self.ticket} tid={self.enq_tid}{' FREED' if self.freed else ''}>"


def _identity_mutation(_obj: Any) -> Any:
    return None


class MutationQueue:
    __slots__ = ("_max_threads", "_sentinel", "_tail", "_announce", "_max_iters", "_alloc")

    def __init__(
        self,
        max_threads: int,
        alloc: Callable[..., MutationNode],
    ) -> None:
        self._max_threads = max_threads
        self._alloc = alloc
        # the sentinel has no enqueuer, hence no owner reference
        self._sentinel = alloc(_identity_mutation, 0, False)
        self._sentinel.ticket = 0
        self._tail = AtomicRef(self._sentinel)
        self._announce: list[AtomicRef] = [AtomicRef(None) for _ in range(max_threads)]
        # helping settles a pending announce within O(maxThreads) link
        # completions per turn cycle; O(maxThreads^2) iterations cover the
        # worst interleaving of stale helpers, see enqueue()
        self._max_iters = 4 * max_threads * max_threads + 8 * max_threads + 8

    @property
    def sentinel(self) -> MutationNode:
        return self._sentinel

    def tail(self) -> MutationNode:
        return self._tail.load()

    def tail_ticket(self) -> int:
        return self._tail.load().ticket

    def enqueue(self, mutation: Callable[[Any], Any], tid: int) -> MutationNode:
        """Append a node carrying ``mutation``; returns it with its ticket set.

        Bounded: each iteration either advances the global tail, completes a
        link (ours or a helped one), or observes someone else doing so.
        """
        if not 0 <= tid < self._max_threads:
            raise ValueError(f"tid {tid} out of range")
        node = self._alloc(mutation, tid, True)
        slot = self._announce[tid]
        slot.store(node)
        for _ in range(self._max_iters):
            if node.ticket != 0:
                break
            ltail = self._tail.load()
            lnext = ltail.next_ref.load()
            if lnext is not None:
                # tail is lagging: fill the successor's ticket and advance
                if lnext.ticket == 0:
                    lnext.ticket = ltail.ticket + 1
                self._tail.cas(ltail, lnext)
                continue
            cand = self._pick_candidate(ltail, tid)
            if cand is None or cand.ticket != 0:
                continue
            if ltail.next_ref.cas(None, cand):
                cand.ticket = ltail.ticket + 1
                self._tail.cas(ltail, cand)
        slot.store(None)
        if node.ticket == 0:
            raise RuntimeError("enqueue helping bound exhausted; wait-freedom broken")
        return node

    def _pick_candidate(self, ltail: MutationNode, tid: int) -> Optional[MutationNode]:
        """First pending announce at or after the turn for the next position."""
        mt = self._max_threads
        turn = (ltail.ticket + 1) % mt
        announce = self._announce
        for j in range(mt):
            cand = announce[(turn + j) % mt].load()
            if cand is not None and cand.ticket == 0:
                return cand
        return None

    def traverse_from(
        self,
        start: MutationNode,
        stop_ticket: int,
        protect: Callable[[MutationNode], Optional[MutationNode]] | None = None,
    ) -> Iterator[MutationNode]:
        """Yield start.next .. node with ticket == stop_ticket, in ticket order.

        The caller must hold protection on ``start`` (a slot-head pin or a
        hazard slot).  ``protect`` is applied to each successor before it is
        yielded; a None return from it, like a null or self-linked next,
        raises :class:`CopyInvalidated`.
        """
        if stop_ticket < start.ticket:
            raise ValueError("stop_ticket precedes the start node")
        cur = start
        while cur.ticket < stop_ticket:
            nxt = cur.next_ref.load()
            if nxt is None or nxt is cur:
                raise CopyInvalidated
            if protect is not None:
                nxt = protect(nxt)
                if nxt is None:
                    raise CopyInvalidated
            if nxt.ticket == 0:
                nxt.ticket = cur.ticket + 1
            yield nxt
            cur = nxt
