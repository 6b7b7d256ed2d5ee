"""Deterministic discrete-event substrate.

A single global event queue drives everything: packet hops, link
failures/restores, and timers. Time is integer microseconds. Events with
equal fire time dequeue in insertion order, so a run is a pure function
of the topology and the scheduled inputs. There is no bandwidth or
queuing model: a packet crossing a link arrives exactly latency_us
later, unless the link goes down first, in which case it is dropped.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

from .topology import Link, LinkState, Topology


class SimulationError(Exception):
    pass


class EventKind(enum.Enum):
    PACKET_ARRIVAL = "PacketArrival"
    LINK_FAIL = "LinkFail"
    LINK_RESTORE = "LinkRestore"
    TIMER = "Timer"


@dataclass
class Event:
    fire_time_us: int
    kind: EventKind
    payload: Any = None
    detail: str = ""
    seq: int = -1
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class SimClock:
    now: int = 0

    def advance_to(self, t: int) -> None:
        if t < self.now:
            raise SimulationError(f"clock cannot go backwards: {t} < {self.now}")
        self.now = t


@dataclass
class SimStats:
    packets_sent: int = 0
    packets_delivered: int = 0
    packets_dropped: int = 0
    events_processed: int = 0


class Simulator:
    """Event loop over a topology, with failure injection and a trace log."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.clock = SimClock()
        self.stats = SimStats()
        self.log: list[str] = []
        self._heap: list[tuple[int, int, Event]] = []
        self._insert_seq = 0
        self._receivers: dict[str, Callable[[str, Any], None]] = {}
        self._link_listeners: list[Callable[[Link, bool], None]] = []

    # -- scheduling ---------------------------------------------------------

    def schedule(self, event: Event) -> Event:
        if event.fire_time_us < self.clock.now:
            raise SimulationError(
                f"cannot schedule event at {event.fire_time_us} before now "
                f"({self.clock.now})"
            )
        event.seq = self._insert_seq
        self._insert_seq += 1
        heapq.heappush(self._heap, (event.fire_time_us, event.seq, event))
        return event

    def schedule_timer(self, delay_us: int, fn: Callable[[], None], detail: str = "") -> Event:
        return self.schedule(
            Event(self.clock.now + delay_us, EventKind.TIMER, fn, detail)
        )

    # -- packet transport ---------------------------------------------------

    def register_receiver(self, node: str, fn: Callable[[str, Any], None]) -> None:
        """fn(node, packet) is invoked when a packet arrives at `node`."""
        self._receivers[node] = fn

    def send_on_link(self, from_node: str, to_node: str, packet: Any, detail: str = "") -> bool:
        """Put a packet on the (from,to) link; False if the link is down."""
        link = self.topology.link_between(from_node, to_node)
        self.stats.packets_sent += 1
        if link.state is not LinkState.UP:
            self.stats.packets_dropped += 1
            self.trace("DROP", "linkdown", from_node, to_node, detail)
            return False
        self.schedule(
            Event(
                self.clock.now + link.latency_us,
                EventKind.PACKET_ARRIVAL,
                (link.key, to_node, packet),
                detail or f"{from_node}->{to_node}",
            )
        )
        return True

    # -- failure injection --------------------------------------------------

    def fail_link(self, a: str, b: str, at_us: int | None = None) -> Event:
        link = self.topology.link_between(a, b)
        at = self.clock.now if at_us is None else at_us
        return self.schedule(
            Event(at, EventKind.LINK_FAIL, link, f"{link.key[0]}-{link.key[1]}")
        )

    def restore_link(self, a: str, b: str, at_us: int | None = None) -> Event:
        link = self.topology.link_between(a, b)
        at = self.clock.now if at_us is None else at_us
        return self.schedule(
            Event(at, EventKind.LINK_RESTORE, link, f"{link.key[0]}-{link.key[1]}")
        )

    def on_link_change(self, fn: Callable[[Link, bool], None]) -> None:
        self._link_listeners.append(fn)

    # -- event loop ---------------------------------------------------------

    def run_until(self, t_end_us: int) -> int:
        """Process every event with fire time <= t_end; clock ends at t_end."""
        if t_end_us < self.clock.now:
            raise SimulationError(f"t_end {t_end_us} is in the past")
        processed = 0
        while self._heap and self._heap[0][0] <= t_end_us:
            if self._step_one():
                processed += 1
        self.clock.advance_to(t_end_us)
        return processed

    def run_until_idle(self, horizon_us: int) -> int:
        """Process events until the queue is empty or the horizon is hit."""
        processed = 0
        while self._heap and self._heap[0][0] <= horizon_us:
            if self._step_one():
                processed += 1
        if not self._heap:
            return processed
        self.clock.advance_to(horizon_us)
        return processed

    def run_until_condition(self, cond: Callable[[], bool], t_limit_us: int) -> bool:
        """Pump events until cond() holds; False if the limit is reached first."""
        if cond():
            return True
        while self._heap and self._heap[0][0] <= t_limit_us:
            self._step_one()
            if cond():
                return True
        return cond()

    def pending_events(self) -> int:
        return sum(1 for _, _, e in self._heap if not e.cancelled)

    def _step_one(self) -> bool:
        _, _, event = heapq.heappop(self._heap)
        if event.cancelled:
            return False
        self.clock.advance_to(event.fire_time_us)
        self.stats.events_processed += 1
        self.log.append(f"{event.fire_time_us}\t{event.kind.value}\t{event.detail}")
        if event.kind is EventKind.PACKET_ARRIVAL:
            _, to_node, packet = event.payload
            self.stats.packets_delivered += 1
            receiver = self._receivers.get(to_node)
            if receiver is not None:
                receiver(to_node, packet)
        elif event.kind is EventKind.LINK_FAIL:
            self._apply_link_state(event.payload, LinkState.DOWN)
        elif event.kind is EventKind.LINK_RESTORE:
            self._apply_link_state(event.payload, LinkState.UP)
        elif event.kind is EventKind.TIMER:
            event.payload()
        return True

    def _apply_link_state(self, link: Link, state: LinkState) -> None:
        if link.state is state:
            return
        link.state = state
        if state is LinkState.DOWN:
            # In-flight packets on the failing link are lost, not rerouted.
            for _, _, ev in self._heap:
                if (
                    ev.kind is EventKind.PACKET_ARRIVAL
                    and not ev.cancelled
                    and ev.payload[0] == link.key
                ):
                    ev.cancel()
                    self.stats.packets_dropped += 1
                    self.trace("DROP", "inflight", *link.key, ev.detail)
        for listener in self._link_listeners:
            listener(link, state is LinkState.UP)

    # -- tracing ------------------------------------------------------------

    def trace(self, tag: str, *fields: Any) -> None:
        parts = "\t".join(str(f) for f in fields)
        self.log.append(f"{self.clock.now}\t{tag}\t{parts}")
