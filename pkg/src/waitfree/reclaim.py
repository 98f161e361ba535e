"""Safe memory reclamation: reference counts + hazard slots + retire buffers.

Lifecycle of a queue node:

* born with refcount 1 (the enqueuer's owner reference, dropped when its
  operation returns);
* each slot head pins its node with +1 while pointing at it;
* the decrement that reaches zero retires the node into the decrementing
  thread's circular buffer;
* a full buffer triggers a scan, which frees every buffered node that is
  not hazard-published and still has refcount zero.

Freeing self-links ``next`` (the tombstone stale traversals test for) and
poisons the payload.  The scan and traversal sides use a tombstone
handshake so a published node is never freed: the scan first self-links
every candidate, then reads the hazard table, then frees or rolls the
self-link back; a traverser publishes the successor and only then
re-checks the self-link.  Under sequentially consistent interleaving one
side always observes the other.

Replicas need none of this: a replica is only replaced under its slot's
exclusive lock, which proves no reader is inside, so it is freed on the
spot (:meth:`Reclaimer.retire_replica`).

The tracker doubles as the benchmark's memory instrument.  Tracked sizes
are deterministic constants modeling the equivalent C struct layouts
(Python object headers would drown the signal): 64 bytes per queue node,
per-element replica costs as reported by the structures themselves.
"""

from __future__ import annotations

import threading
from typing import Any, Callable, Iterable, Optional

from waitfree._atomics import AtomicInt, AtomicRef
from waitfree.debugging import ProbeLog
from waitfree.mutation_queue import MutationNode

NODE_BYTES = 64
DEFAULT_CIRCBUFF_SIZE = 1000

# hazard slot indices, two per thread
HP_CURCOMB = 0
HP_TRAVERSAL = 1
SLOTS_PER_THREAD = 2


class MemoryTracker:
    """Allocation ledger: live/peak counts and bytes, poison on free."""

    def __init__(self, probes: ProbeLog | None = None) -> None:
        self._lock = threading.Lock()
        self._probes = probes
        self.live_nodes = 0
        self.live_replicas = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.nodes_allocated = 0
        self.nodes_freed = 0
        self.replicas_allocated = 0
        self.replicas_freed = 0
        self._replica_bytes: dict[int, int] = {}

    def new_node(self, mutation: Callable[[Any], Any], tid: int, owner_ref: bool = True) -> MutationNode:
        node = MutationNode(mutation, tid)
        node.refcnt = AtomicInt(1 if owner_ref else 0)
        with self._lock:
            self.nodes_allocated += 1
            self.live_nodes += 1
            self._bump(NODE_BYTES)
        return node

    def free_node(self, node: MutationNode) -> None:
        if node.freed:
            if self._probes is not None:
                self._probes.violation("double-free", f"node t={node.ticket} freed twice")
            return
        node.freed = True
        with self._lock:
            self.nodes_freed += 1
            self.live_nodes -= 1
            self.live_bytes -= NODE_BYTES

    def alloc_replica(self, obj: Any, nbytes: int) -> None:
        with self._lock:
            self.replicas_allocated += 1
            self.live_replicas += 1
            self._replica_bytes[id(obj)] = nbytes
            self._bump(nbytes)

    def free_replica(self, obj: Any) -> None:
        with self._lock:
            nbytes = self._replica_bytes.pop(id(obj), None)
            if nbytes is None:
                if self._probes is not None:
                    self._probes.violation("bad-free", "replica free without matching alloc")
                return
            self.replicas_freed += 1
            self.live_replicas -= 1
            self.live_bytes -= nbytes

    def _bump(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes


class HazardSlots:
    """Per-thread published-node table; anything published survives scans."""

    def __init__(self, max_threads: int) -> None:
        self._slots = [
            [AtomicRef(None) for _ in range(SLOTS_PER_THREAD)] for _ in range(max_threads)
        ]

    def publish(self, tid: int, index: int, node: Optional[MutationNode]) -> None:
        self._slots[tid][index].store(node)

    def clear(self, tid: int, index: int) -> None:
        self._slots[tid][index].store(None)

    def clear_all(self, tid: int) -> None:
        for cell in self._slots[tid]:
            cell.store(None)

    def snapshot(self) -> set[MutationNode]:
        published: set[MutationNode] = set()
        for row in self._slots:
            for cell in row:
                node = cell.load()
                if node is not None:
                    published.add(node)
        return published


class Reclaimer:
    """Wires tracker, hazard slots and per-thread retire buffers together."""

    def __init__(
        self,
        max_threads: int,
        tracker: MemoryTracker,
        size_circbuff: int = DEFAULT_CIRCBUFF_SIZE,
        probes: ProbeLog | None = None,
    ) -> None:
        if size_circbuff < 1:
            raise ValueError("size_circbuff must be >= 1")
        self.size_circbuff = size_circbuff
        self.tracker = tracker
        self.hazards = HazardSlots(max_threads)
        self._probes = probes
        self._buffers: list[list[MutationNode]] = [[] for _ in range(max_threads)]
        self._orphans: list[MutationNode] = []
        self._orphan_lock = threading.Lock()

    # -- hazard protection -------------------------------------------------

    def protect(self, tid: int, index: int, node: MutationNode) -> Optional[MutationNode]:
        """Publish-and-revalidate.

        Returns the node once it is guaranteed to survive every later scan,
        or None when the node is already freed (or mid-scan), in which case
        the slot is cleared and the caller must treat its copy as invalid.
        """
        self.hazards.publish(tid, index, node)
        if node.next_ref.load() is node:
            self.hazards.clear(tid, index)
            return None
        return node

    def clear(self, tid: int, index: int) -> None:
        self.hazards.clear(tid, index)

    # -- reference counting --------------------------------------------------

    def pin(self, node: MutationNode) -> None:
        node.refcnt.add_and_fetch(1)

    def release(self, node: MutationNode, tid: Optional[int]) -> None:
        """Drop one reference; the reference that hits zero retires the node."""
        if node.refcnt.add_and_fetch(-1) == 0:
            self.retire(tid, node)

    # -- retirement ---------------------------------------------------------

    def retire(self, tid: Optional[int], node: MutationNode) -> None:
        """Buffer an unreferenced node; scan when the buffer is full."""
        if tid is None:
            with self._orphan_lock:
                self._orphans.append(node)
            return
        buf = self._buffers[tid]
        buf.append(node)
        if len(buf) >= self.size_circbuff:
            self._scan(buf)

    def retire_replica(self, obj: Any) -> None:
        # slot lock possession is the protection; free immediately
        self.tracker.free_replica(obj)

    def _scan(self, buf: list[MutationNode]) -> None:
        # tombstone every candidate first, then read the hazard table: a
        # traverser that missed all tombstones published before our read
        originals = [node.next_ref.load() for node in buf]
        for node in buf:
            node.next_ref.store(node)
        published = self.hazards.snapshot()
        survivors = []
        for node, orig in zip(buf, originals):
            if node in published or node.refcnt.load() != 0:
                node.next_ref.store(orig)
                survivors.append(node)
                if node.refcnt.load() != 0 and self._probes is not None:
                    self._probes.violation(
                        "retire-pinned", f"retired node t={node.ticket} has refcnt > 0"
                    )
            else:
                self.tracker.free_node(node)
        buf[:] = survivors

    # -- thread lifecycle -----------------------------------------------------

    def drain(self, tid: int) -> None:
        buf = self._buffers[tid]
        if buf:
            self._scan(buf)

    def deregister(self, tid: int) -> None:
        """Clear tid's hazard slots, scan its buffer, orphan the leftovers."""
        self.hazards.clear_all(tid)
        buf = self._buffers[tid]
        if buf:
            self._scan(buf)
        if buf:
            with self._orphan_lock:
                self._orphans.extend(buf)
            buf.clear()

    def drain_all(self) -> None:
        """Scan every buffer and the orphan list regardless of fullness."""
        for buf in self._buffers:
            if buf:
                self._scan(buf)
        with self._orphan_lock:
            orphans = self._orphans
            if orphans:
                self._scan(orphans)

    def stranded_nodes(self) -> int:
        return sum(len(b) for b in self._buffers) + len(self._orphans)
