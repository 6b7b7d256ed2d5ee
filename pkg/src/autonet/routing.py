"""ID-based resilient routing over the simulated underlay.

Every node gets a flat 128-bit identifier hashed from its name. Nodes
discover each other by flooding announcements over the underlay; each
node keeps a contact table organized into XOR-metric buckets, where a
contact is a source route (node-name path) to another node. Packets are
routed by resolving a greedy walk in ID space: repeatedly jump to the
known contact strictly closest to the destination ID, splicing the
contacts' source routes together and erasing any loops, which yields a
simple underlay path (at most n-1 links). The payload then traverses
that path link by link through simulator events.

Link failures invalidate contacts whose source route crosses the dead
link; a change notice floods the component and every node re-announces
itself after a short settle delay, rebuilding tables on the residual
graph. Restores follow the same notice/re-announce cycle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .simulation import Simulator
from .topology import Link, LinkState, Topology

NodeId = int

K_BUCKET = 4
REPAIR_WINDOW_US = 50_000
ROUTE_SEND_ATTEMPTS = 3


class RoutingError(Exception):
    pass


class IdCollisionError(RoutingError):
    """Two distinct node names hashed to the same 128-bit id."""


class NoProgressError(RoutingError):
    """No known contact is strictly closer to the destination id."""


def derive_node_id(name: str) -> NodeId:
    """First 128 bits of SHA-256 of the UTF-8 name; stable everywhere."""
    if not name:
        raise ValueError("node name must be nonempty")
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:16], "big")


def xor_distance(a: NodeId, b: NodeId) -> int:
    return a ^ b

def bucket_index(owner: NodeId, other: NodeId) -> int:
    """Index of the highest differing bit, 0..127."""
    d = owner ^ other
    if d == 0:
        raise ValueError("bucket index undefined for identical ids")
    return d.bit_length() - 1


def format_node_id(node_id: NodeId) -> str:
    return f"{node_id:032x}"


def node_id_as_ipv6(node_id: NodeId) -> str:
    """Cosmetic IPv6-style rendering of an id, for logs only."""
    hx = f"{node_id:032x}"
    return ":".join(hx[i : i + 4] for i in range(0, 32, 4))


@dataclass(frozen=True)
class Contact:
    id: NodeId
    name: str
    path: tuple[str, ...]  # node names, owner first, contact last
    bucket: int

    @property
    def hops(self) -> int:
        return len(self.path) - 1


class RoutingTable:
    """Bucketed contacts of one node.

    Direct neighbors are always kept; other contacts compete for
    K_BUCKET slots per bucket, preferring shorter paths, then smaller
    ids. Within a bucket the view is sorted ascending by path length,
    ties by id.
    """

    def __init__(self, owner_name: str, owner_id: NodeId):
        self.owner_name = owner_name
        self.owner_id = owner_id
        self.neighbors: set[str] = set()
        self._contacts: dict[NodeId, Contact] = {}
        self._nonneighbor_count: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._contacts)

    def contacts(self) -> Iterable[Contact]:
        return self._contacts.values()

    def contact_for(self, node_id: NodeId) -> Contact | None:
        return self._contacts.get(node_id)

    def bucket_contacts(self, index: int) -> list[Contact]:
        members = [c for c in self._contacts.values() if c.bucket == index]
        members.sort(key=lambda c: (c.hops, c.id))
        return members

    def offer(self, node_id: NodeId, name: str, path: tuple[str, ...]) -> bool:
        """Insert or improve a contact; returns True if the table changed."""
        if node_id == self.owner_id:
            return False
        b = bucket_index(self.owner_id, node_id)
        candidate = Contact(node_id, name, path, b)
        existing = self._contacts.get(node_id)
        if existing is not None:
            if (candidate.hops, candidate.path) < (existing.hops, existing.path):
                self._contacts[node_id] = candidate
                if existing.hops > 1 and candidate.hops == 1:
                    self._nonneighbor_count[b] -= 1
                return True
            return False
        if candidate.hops == 1:
            # direct neighbors never compete for bucket slots
            self._contacts[node_id] = candidate
            return True
        count = self._nonneighbor_count.get(b, 0)
        if count < K_BUCKET:
            self._contacts[node_id] = candidate
            self._nonneighbor_count[b] = count + 1
            return True
        worst_key = None
        worst_id = None
        for cid, c in self._contacts.items():
            if c.bucket == b and c.hops > 1:
                key = (c.hops, cid)
                if worst_key is None or key > worst_key:
                    worst_key, worst_id = key, cid
        if worst_key is not None and (candidate.hops, node_id) < worst_key:
            del self._contacts[worst_id]
            self._contacts[node_id] = candidate
            return True
        return False

    def remove(self, node_id: NodeId) -> None:
        contact = self._contacts.pop(node_id, None)
        if contact is not None and contact.hops > 1:
            self._nonneighbor_count[contact.bucket] -= 1

    def prune_link(self, link_key: tuple[str, str]) -> list[NodeId]:
        """Drop all contacts whose source route crosses the given link."""
        dead = [
            cid for cid, c in self._contacts.items() if _path_uses(c.path, link_key)
        ]
        for cid in dead:
            self.remove(cid)
        return dead

    def next_hop(self, dst: NodeId) -> Contact:
        """Greedy step: the contact strictly XOR-closer to dst.

        Deterministic choice: smallest resulting distance, then shorter
        path, then smaller id. dst == owner yields a zero-length self
        contact. Raises NoProgressError when no contact makes progress.
        """
        if dst == self.owner_id:
            return Contact(self.owner_id, self.owner_name, (self.owner_name,), 0)
        own_d = self.owner_id ^ dst
        best: Contact | None = None
        best_key: tuple[int, int, NodeId] | None = None
        for cid, c in self._contacts.items():
            d = cid ^ dst
            if d >= own_d:
                continue
            key = (d, c.hops, cid)
            if best_key is None or key < best_key:
                best_key, best = key, c
        if best is None:
            raise NoProgressError(
                f"{self.owner_name}: no contact closer to {format_node_id(dst)}"
            )
        return best


def _path_uses(path: tuple[str, ...], link_key: tuple[str, str]) -> bool:
    a, b = link_key
    for x, y in zip(path, path[1:]):
        if (x == a and y == b) or (x == b and y == a):
            return True
    return False


@dataclass
class KnownOrigin:
    name: str
    path: tuple[str, ...]  # from this node to the origin
    latency_us: int
    seq: int = 1


@dataclass
class RouteResult:
    """Outcome holder for one routed payload."""

    status: str = "pending"  # pending | delivered | unreachable
    hops: int = -1
    latency_us: int = -1

    @property
    def done(self) -> bool:
        return self.status != "pending"

    @property
    def delivered(self) -> bool:
        return self.status == "delivered"


class _RouterNode:
    def __init__(self, name: str, node_id: NodeId):
        self.name = name
        self.id = node_id
        self.table = RoutingTable(name, node_id)
        self.known: dict[NodeId, KnownOrigin] = {
            node_id: KnownOrigin(name, (name,), 0)
        }
        self.announce_seq = 0
        self.path_cache: dict[NodeId, tuple[tuple[str, ...], int]] = {}
        self.seen_notices: set[tuple[tuple[str, str], int]] = set()


class _RoutedPayload:
    __slots__ = ("dst_id", "route", "idx", "latency_us", "service", "body",
                 "src_name", "result", "on_delivered")

    def __init__(self, src_name, dst_id, route, service, body, result, on_delivered):
        self.src_name = src_name
        self.dst_id = dst_id
        self.route = route
        self.idx = 0
        self.latency_us = 0
        self.service = service
        self.body = body
        self.result = result
        self.on_delivered = on_delivered


class RoutedNetwork:
    """All per-node routing daemons plus the glue to the simulator."""

    def __init__(
        self,
        sim: Simulator,
        repair_window_us: int = REPAIR_WINDOW_US,
        flood_ttl: int | None = None,
    ):
        self.sim = sim
        self.topology = sim.topology
        self.repair_window_us = repair_window_us
        names = self.topology.node_names()
        # diameter estimate for flood scoping: node count is always safe
        self.flood_ttl = flood_ttl if flood_ttl is not None else max(8, len(names))
        self.nodes: dict[str, _RouterNode] = {}
        self.ids: dict[str, NodeId] = {}
        self.names_by_id: dict[NodeId, str] = {}
        for name in names:
            nid = derive_node_id(name)
            if nid in self.names_by_id:
                raise IdCollisionError(
                    f"{name!r} and {self.names_by_id[nid]!r} share id "
                    f"{format_node_id(nid)}"
                )
            self.ids[name] = nid
            self.names_by_id[nid] = name
            self.nodes[name] = _RouterNode(name, nid)
        self._links: dict[tuple[str, str], Link] = {l.key: l for l in self.topology.links}
        max_latency = max((l.latency_us for l in self.topology.links), default=1000)
        self._settle_us = min(20_000, self.flood_ttl * max_latency)
        self._link_change_count: dict[tuple[str, str], int] = {}
        self._services: dict[tuple[str, str], Callable[[str, Any], None]] = {}
        self.converged = False
        self.convergence_time_us: int | None = None
        for name, neighbors in self.topology.up_adjacency().items():
            self.nodes[name].table.neighbors = set(neighbors)
        sim.on_link_change(self._handle_link_change)
        for name in names:
            sim.register_receiver(name, self._receive)

    # -- bootstrap ----------------------------------------------------------

    def bootstrap(self, horizon_us: int = 10_000_000) -> bool:
        """Flood announcements, pump to quiescence, set the convergence flag."""
        for name in self.topology.node_names():
            self._announce(name)
        self.sim.run_until_idle(horizon_us)
        self.converged = self.check_convergence()
        self.convergence_time_us = self.sim.clock.now
        self.sim.trace(
            "CONVERGED" if self.converged else "NOT-CONVERGED",
            self.sim.clock.now,
        )
        return self.converged

    def check_convergence(self) -> bool:
        """Greedy resolution succeeds for every pair known to each node."""
        for node in self.nodes.values():
            for dst_id in node.known:
                if dst_id == node.id:
                    continue
                if self.resolve_path(node.name, dst_id) is None:
                    return False
        return True

    def reconverge(self, horizon_us: int | None = None) -> bool:
        """Pump the repair machinery to quiescence after link changes."""
        budget = horizon_us if horizon_us is not None else self.repair_window_us
        self.sim.run_until_idle(self.sim.clock.now + budget)
        self.converged = self.check_convergence()
        return self.converged

    def live_view(self, node_name: str) -> set[NodeId]:
        """Ids this node currently believes are in its component."""
        return set(self.nodes[node_name].known)

    # -- discovery flooding -------------------------------------------------

    def _announce(self, origin_name: str) -> None:
        origin = self.nodes[origin_name]
        origin.announce_seq += 1
        seq = origin.announce_seq
        for neighbor in sorted(origin.table.neighbors):
            self.sim.send_on_link(
                origin_name,
                neighbor,
                ("ann", origin.id, origin_name, (origin_name, neighbor), 0, seq),
                f"ann:{origin_name}->{neighbor}",
            )

    def _receive(self, node_name: str, packet: tuple) -> None:
        kind = packet[0]
        if kind == "ann":
            self._on_announce(node_name, packet)
        elif kind == "notice":
            self._on_notice(node_name, packet)
        elif kind == "fwd":
            self._on_forward(node_name, packet[1])

    def _on_announce(self, node_name: str, packet: tuple) -> None:
        _, origin_id, origin_name, path, lat_before = packet
        node = self.nodes[node_name]
        if origin_id == node.id:
            return
        latency = lat_before + self._links[_edge_key(path[-2], path[-1])].latency_us
        hops = len(path) - 1
        current = node.known.get(origin_id)
        key = (latency, hops, path)
        if current is not None and key >= (
            current.latency_us,
            len(current.path) - 1,
            tuple(reversed(current.path)),
        ):
            return
        reverse = tuple(reversed(path))
        node.known[origin_id] = KnownOrigin(origin_name, reverse, latency)
        node.table.offer(origin_id, origin_name, reverse)
        if hops >= self.flood_ttl:
            return
        on_path = set(path)
        for neighbor in sorted(node.table.neighbors):
            if neighbor in on_path:
                continue
            self.sim.send_on_link(
                node_name,
                neighbor,
                ("ann", origin_id, origin_name, path + (neighbor,), latency),
                f"ann:{origin_name}~{node_name}->{neighbor}",
            )

    # -- failure handling ---------------------------------------------------

    def _handle_link_change(self, link: Link, up: bool) -> None:
        key = link.key
        change_id = self._link_change_count.get(key, 0) + 1
        self._link_change_count[key] = change_id
        self.converged = False
        for endpoint in key:
            self._process_notice(endpoint, key, up, change_id, local=True)

    def _on_notice(self, node_name: str, packet: tuple) -> None:
        _, key, up, change_id = packet
        self._process_notice(node_name, key, up, change_id, local=False)

    def _process_notice(
        self,
        node_name: str,
        key: tuple[str, str],
        up: bool,
        change_id: int,
        local: bool,
    ) -> None:
        node = self.nodes[node_name]
        stamp = (key, change_id * (1 if up else -1))
        if stamp in node.seen_notices:
            return
        node.seen_notices.add(stamp)
        if node_name in key:
            other = key[0] if node_name == key[1] else key[1]
            if up:
                node.table.neighbors.add(other)
            else:
                node.table.neighbors.discard(other)
        if not up:
            node.table.prune_link(key)
            for origin_id in [
                oid
                for oid, origin in node.known.items()
                if oid != node.id and _path_uses(origin.path, key)
            ]:
                del node.known[origin_id]
            for dst_id in [
                d for d, (p, _) in node.path_cache.items() if _path_uses(p, key)
            ]:
                del node.path_cache[dst_id]
        else:
            # restored link may enable better routes; drop stale cached paths
            node.path_cache.clear()
        for neighbor in sorted(node.table.neighbors):
            self.sim.send_on_link(
                node_name,
                neighbor,
                ("notice", key, up, change_id),
                f"notice:{key[0]}-{key[1]}:{node_name}->{neighbor}",
            )
        self.sim.schedule_timer(
            self._settle_us,
            lambda n=node_name: self._announce(n),
            f"reannounce:{node_name}",
        )

    # -- path resolution ----------------------------------------------------

    def resolve_path(
        self, src_name: str, dst_id: NodeId
    ) -> tuple[tuple[str, ...], int] | None:
        """Greedy ID-space walk spliced into one loop-erased underlay path.

        Returns (node-name path, total latency_us) or None when no
        progress is possible (different component or tables in repair).
        """
        src = self.nodes[src_name]
        if dst_id == src.id:
            return (src_name,), 0
        cached = src.path_cache.get(dst_id)
        if cached is not None:
            return cached
        limit = 6 * len(self.nodes) + 16
        cur = src
        trace = [src_name]
        segment: list[str] = []
        target_d: int | None = None
        for _ in range(limit):
            if cur.id == dst_id:
                path = _loop_erase(trace)
                latency = 0
                for x, y in zip(path, path[1:]):
                    latency += self._links[_edge_key(x, y)].latency_us
                resolved = (tuple(path), latency)
                src.path_cache[dst_id] = resolved
                return resolved
            direct = cur.table.contact_for(dst_id)
            if direct is not None:
                segment = list(direct.path[1:])
                target_d = 0
            else:
                try:
                    contact = cur.table.next_hop(dst_id)
                except NoProgressError:
                    return None
                d = contact.id ^ dst_id
                if not segment or target_d is None or d < target_d:
                    segment = list(contact.path[1:])
                    target_d = d
            nxt = segment.pop(0)
            trace.append(nxt)
            cur = self.nodes[nxt]
        return None

    # -- payload forwarding -------------------------------------------------

    def register_service(
        self, node_name: str, tag: str, handler: Callable[[str, Any], None]
    ) -> None:
        """handler(src_name, body) runs when a payload for `tag` arrives."""
        self._services[(node_name, tag)] = handler

    def route_packet(
        self,
        src_name: str,
        dst_id: NodeId,
        service: str,
        body: Any,
        on_delivered: Callable[[int, int], None] | None = None,
    ) -> RouteResult:
        """Deliver a payload to the node owning dst_id.

        Resolution failures are retried once per repair window; after
        ROUTE_SEND_ATTEMPTS windows the packet is reported unreachable.
        A packet lost in flight (link died under it) is NOT retried
        here: reliability above the routing layer is the caller's job.
        """
        result = RouteResult()
        self._try_send(src_name, dst_id, service, body, result, on_delivered, 1)
        return result

    def _try_send(self, src_name, dst_id, service, body, result, on_delivered, attempt):
        if dst_id == self.ids[src_name]:
            result.status, result.hops, result.latency_us = "delivered", 0, 0
            self.sim.trace("ROUTE", src_name, src_name, 0, 0)
            self._dispatch(src_name, service, src_name, body)
            if on_delivered is not None:
                on_delivered(0, 0)
            return
        resolved = self.resolve_path(src_name, dst_id)
        if resolved is None:
            if attempt >= ROUTE_SEND_ATTEMPTS:
                result.status = "unreachable"
                self.sim.trace(
                    "UNREACHABLE", src_name, self.names_by_id.get(dst_id, "?"), attempt
                )
                return
            self.sim.schedule_timer(
                self.repair_window_us,
                lambda: self._try_send(
                    src_name, dst_id, service, body, result, on_delivered, attempt + 1
                ),
                f"routeretry:{src_name}",
            )
            return
        route, _ = resolved
        payload = _RoutedPayload(
            src_name, dst_id, route, service, body, result, on_delivered
        )
        self._forward(src_name, payload)

    def _forward(self, node_name: str, payload: _RoutedPayload) -> None:
        nxt = payload.route[payload.idx + 1]
        link = self._links[_edge_key(node_name, nxt)]
        if link.state is not LinkState.UP:
            # path died mid-delivery; silent loss, upper layers retransmit
            self.sim.stats.packets_dropped += 1
            self.sim.trace("DROP", "stale-route", node_name, nxt, payload.service)
            return
        payload.idx += 1
        payload.latency_us += link.latency_us
        self.sim.send_on_link(
            node_name,
            nxt,
            ("fwd", payload),
            f"fwd:{payload.service}:{node_name}->{nxt}",
        )

    def _on_forward(self, node_name: str, payload: _RoutedPayload) -> None:
        if payload.route[payload.idx] != node_name:
            return
        if payload.idx == len(payload.route) - 1:
            result = payload.result
            result.status = "delivered"
            result.hops = payload.idx
            result.latency_us = payload.latency_us
            self.sim.trace(
                "ROUTE",
                payload.src_name,
                node_name,
                result.hops,
                result.latency_us,
            )
            self._dispatch(node_name, payload.service, payload.src_name, payload.body)
            if payload.on_delivered is not None:
                payload.on_delivered(result.hops, result.latency_us)
            return
        self._forward(node_name, payload)

    def _dispatch(self, node_name: str, tag: str, src_name: str, body: Any) -> None:
        handler = self._services.get((node_name, tag))
        if handler is not None:
            handler(src_name, body)


def _edge_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def _loop_erase(trace: list[str]) -> list[str]:
    path: list[str] = []
    pos: dict[str, int] = {}
    for node in trace:
        if node in pos:
            for cut in path[pos[node] + 1 :]:
                del pos[cut]
            del path[pos[node] + 1 :]
        else:
            pos[node] = len(path)
            path.append(node)
    return path
