"""Incrementally built topological map of the explored graph.

The map distinguishes the current node, fully observed visited nodes and
frontier "ghost" nodes that were only glimpsed from adjacent viewpoints.
Ghosts carry the running mean of every partial view pointed at them; once
stepped on they graduate to visited and keep their own panorama instead.
Hop distances are computed on the known subgraph only, so planning never
peeks at unexplored structure.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .env import NavGraph, Slot, slot_vector

STATUS_STOP, STATUS_CURRENT, STATUS_VISITED, STATUS_GHOST = 0, 1, 2, 3


class MapError(RuntimeError):
    """Raised when the map is queried in an inconsistent way."""


class TopoMap:
    def __init__(self):
        self.current: int | None = None
        self.visit_order: list[int] = []
        self.panoramas: dict[int, list[Slot]] = {}
        self.ghost_order: list[int] = []
        self._ghost_sum: dict[int, np.ndarray] = {}
        self._ghost_count: dict[int, int] = {}
        self.edges: set[tuple[int, int]] = set()

    # -- queries ------------------------------------------------------------

    @property
    def visited(self) -> list[int]:
        return list(self.visit_order)

    @property
    def ghosts(self) -> list[int]:
        return list(self.ghost_order)

    def status(self, node: int) -> int:
        if node == self.current:
            return STATUS_CURRENT
        if node in self.panoramas:
            return STATUS_VISITED
        if node in self._ghost_sum:
            return STATUS_GHOST
        raise MapError(f"node {node} is not on the map")

    def ghost_view(self, node: int) -> np.ndarray:
        """Mean of all partial views observed toward a ghost node."""
        if node not in self._ghost_sum:
            raise MapError(f"node {node} is not a ghost")
        return self._ghost_sum[node] / self._ghost_count[node]

    def node_order(self) -> list[int]:
        """Stable sequence order: visited nodes by first visit, then ghosts."""
        return self.visit_order + self.ghost_order

    # -- updates ------------------------------------------------------------

    def observe(self, node: int, slots: list[Slot]) -> None:
        """Arrive at a node and take in its full panorama."""
        if node in self.panoramas:
            # Revisits add no information: panoramas are static.
            self.current = node
            return
        if node in self._ghost_sum:
            del self._ghost_sum[node]
            del self._ghost_count[node]
            self.ghost_order.remove(node)
        if node not in self.panoramas:
            self.visit_order.append(node)
            self.panoramas[node] = slots
        self.current = node
        for slot in slots:
            v = slot.neighbor
            if v is None:
                continue
            self.edges.add((min(node, v), max(node, v)))
            if v in self.panoramas:
                continue
            if v not in self._ghost_sum:
                self.ghost_order.append(v)
                self._ghost_sum[v] = np.zeros_like(slot_vector(slot))
                self._ghost_count[v] = 0
            self._ghost_sum[v] += slot_vector(slot)
            self._ghost_count[v] += 1

    # -- planning -----------------------------------------------------------

    def _known_adj(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {}
        for u, v in self.edges:
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
        return {u: sorted(vs) for u, vs in adj.items()}

    def hop_matrix(self, order: list[int] | None = None) -> np.ndarray:
        """Pairwise hop counts over known edges for the given node order."""
        if order is None:
            order = self.node_order()
        adj = self._known_adj()
        index = {u: i for i, u in enumerate(order)}
        out = np.zeros((len(order), len(order)), dtype=int)
        for src in order:
            dist = {src: 0}
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in adj.get(u, []):
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        queue.append(v)
            for v, d in dist.items():
                if v in index:
                    out[index[src], index[v]] = d
        return out

    def plan_to(self, target: int) -> list[int]:
        """Shortest known-edge path from the current node to target.

        Ties break toward lower node ids, matching the demonstrator policy.
        Returns the node sequence excluding the current node.
        """
        if self.current is None:
            raise MapError("map is empty")
        if target == self.current:
            return []
        adj = self._known_adj()
        if target not in adj:
            raise MapError(f"node {target} is not on the map")
        dist = {target: 0}
        queue = deque([target])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        if self.current not in dist:
            raise MapError(f"no known path from {self.current} to {target}")
        path = []
        node = self.current
        while node != target:
            node = min(v for v in adj[node] if dist.get(v, 1 << 30) == dist[node] - 1)
            path.append(node)
        return path


def observe_current(topo: TopoMap, graph: NavGraph, node: int) -> None:
    topo.observe(node, graph.slots[node])
