"""Topology model and the line-oriented topology file format.

A topology file declares nodes and point-to-point links::

    # comment
    node <name> <router|rlnode|gateway>
    link <a> <b> <latency_us>

Nodes and links are kept in canonical name order so that everything built
on top (ID assignment, iteration, logs) is independent of declaration
order in the file.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources


class TopologyError(Exception):
    """Raised for malformed or inconsistent topology specifications."""


class Role(enum.Enum):
    ROUTER = "router"
    RL_NODE = "rlnode"
    GATEWAY = "gateway"


class LinkState(enum.Enum):
    UP = "up"
    DOWN = "down"


@dataclass
class Node:
    name: str
    role: Role


@dataclass
class Link:
    a: str
    b: str
    latency_us: int
    state: LinkState = LinkState.UP

    @property
    def key(self) -> tuple[str, str]:
        """Canonical unordered endpoint pair."""
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)

    def other(self, name: str) -> str:
        if name == self.a:
            return self.b
        if name == self.b:
            return self.a
        raise ValueError(f"{name!r} is not an endpoint of link {self.key}")


@dataclass
class Topology:
    """Named nodes plus latency-weighted links; Up links form the usable graph."""

    nodes: list[Node] = field(default_factory=list)
    links: list[Link] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        names = [n.name for n in self.nodes]
        if len(names) != len(set(names)):
            dup = sorted(n for n in set(names) if names.count(n) > 1)[0]
            raise TopologyError(f"duplicate node name {dup!r}")
        known = set(names)
        index: dict[tuple[str, str], Link] = {}
        for link in self.links:
            for end in (link.a, link.b):
                if end not in known:
                    raise TopologyError(f"link references undeclared node {end!r}")
            if link.a == link.b:
                raise TopologyError(f"self-link at node {link.a!r}")
            if link.latency_us <= 0:
                raise TopologyError(
                    f"link {link.key} has nonpositive latency {link.latency_us}"
                )
            if link.key in index:
                raise TopologyError(f"duplicate link {link.key}")
            index[link.key] = link
        self._link_index = index
        self._node_index = {n.name: n for n in self.nodes}

    def node(self, name: str) -> Node:
        node = self._node_index.get(name)
        if node is None:
            raise KeyError(name)
        return node

    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def nodes_with_role(self, role: Role) -> list[str]:
        return [n.name for n in self.nodes if n.role is role]

    def link_between(self, a: str, b: str) -> Link:
        key = (a, b) if a <= b else (b, a)
        link = self._link_index.get(key)
        if link is None:
            raise TopologyError(f"no link between {a!r} and {b!r}")
        return link

    def up_adjacency(self) -> dict[str, list[str]]:
        """Neighbor map over links currently Up, neighbors name-sorted."""
        adj: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for link in self.links:
            if link.state is LinkState.UP:
                adj[link.a].append(link.b)
                adj[link.b].append(link.a)
        for neighbors in adj.values():
            neighbors.sort()
        return adj


_ROLES = {r.value: r for r in Role}


def load_topology(spec_text: str) -> Topology:
    """Parse topology text into a canonically ordered :class:`Topology`.

    Raises :class:`TopologyError` with a line number for any malformed
    line, duplicate node, dangling link endpoint, or nonpositive latency.
    """
    nodes: list[Node] = []
    links: list[Link] = []
    for lineno, raw in enumerate(spec_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "node":
            if len(parts) != 3:
                raise TopologyError(f"line {lineno}: expected 'node <name> <role>'")
            name, role_text = parts[1], parts[2]
            if role_text not in _ROLES:
                raise TopologyError(
                    f"line {lineno}: unknown role {role_text!r} "
                    f"(expected one of {sorted(_ROLES)})"
                )
            nodes.append(Node(name, _ROLES[role_text]))
        elif parts[0] == "link":
            if len(parts) != 4:
                raise TopologyError(
                    f"line {lineno}: expected 'link <a> <b> <latency_us>'"
                )
            try:
                latency = int(parts[3])
            except ValueError:
                raise TopologyError(
                    f"line {lineno}: latency {parts[3]!r} is not an integer"
                ) from None
            links.append(Link(parts[1], parts[2], latency))
        else:
            raise TopologyError(f"line {lineno}: unknown directive {parts[0]!r}")

    nodes.sort(key=lambda n: n.name)
    links.sort(key=lambda l: l.key)
    try:
        return Topology(nodes, links)
    except TopologyError:
        raise


def load_topology_file(path: str) -> Topology:
    with open(path, encoding="utf-8") as f:
        return load_topology(f.read())


def demo_topology_text() -> str:
    """Text of the bundled 8-node demo topology."""
    return resources.files("autonet.data").joinpath("demo.topo").read_text("utf-8")


def demo_topology() -> Topology:
    return load_topology(demo_topology_text())
