"""Synthetic graph-navigation worlds with templated instructions.

A world is a set of connected undirected graphs embedded in the unit
square.  Every node exposes six view slots; each edge occupies one slot at
either endpoint, chosen by heading, and every slot shows a landmark drawn
without replacement within the node.  View features are noisy copies of
per-world landmark embeddings, so following an instruction means matching
landmark mentions to view features and keeping track of progress.

Instructions come in two styles: "fine" spells out one clause per hop of
the expert path, "coarse" only names the goal object and landmarks near
the goal.  The expert policy walks breadth-first shortest paths with
lowest-node-id tie-breaking.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

N_SLOTS = 6
MIN_DEG, MAX_DEG = 2, 5
STOP = -1
WORLD_FORMAT_VERSION = 1

LANDMARKS = [
    "archway", "awning", "barrel", "bench", "billboard", "bin", "bookshelf",
    "cabinet", "chair", "clock", "counter", "crate", "curtain", "desk",
    "doorway", "drawer", "easel", "fern", "fireplace", "fountain", "gate",
    "hammock", "heater", "kettle", "ladder", "lamp", "lantern", "mirror",
    "painting", "piano", "pillar", "planter", "railing", "rug", "shelf",
    "sofa", "statue", "stool", "table", "vase",
]

GLUE_WORDS = ["<pad>", "and", "at", "find", "go", "head", "near", "past",
              "stop", "the", "then", "to", "toward", "walk"]


class WorldGenError(RuntimeError):
    """Raised when graph constraints cannot be satisfied."""


class IllegalActionError(ValueError):
    """Raised on actions outside the current action set."""


class Vocab:
    """Fixed instruction vocabulary: glue words then landmark names."""

    def __init__(self):
        self.words = GLUE_WORDS + LANDMARKS
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]


@dataclass
class Slot:
    """One of six directional views at a node."""
    landmark: int
    direction: int
    neighbor: int | None
    feat: np.ndarray | None = None


class NavGraph:
    """Undirected navigation graph with per-node view slots."""

    def __init__(self, graph_id: int, split: str, positions: np.ndarray,
                 adj: dict[int, list[int]], slots: list[list[Slot]],
                 objects: list[int], feature_seed: list[int]):
        self.graph_id = graph_id
        self.split = split
        self.positions = positions
        self.adj = adj
        self.slots = slots
        self.objects = objects
        self.feature_seed = feature_seed
        self._dist_cache: dict[int, np.ndarray] = {}

    @property
    def n_nodes(self) -> int:
        return len(self.adj)

    def neighbors(self, u: int) -> list[int]:
        return self.adj[u]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adj[u]

    def edge_len(self, u: int, v: int) -> float:
        return float(np.linalg.norm(self.positions[u] - self.positions[v]))

    def hops_from(self, src: int) -> np.ndarray:
        """BFS hop counts from src to every node (cached)."""
        if src not in self._dist_cache:
            dist = np.full(self.n_nodes, -1, dtype=int)
            dist[src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in self.adj[u]:
                    if dist[v] < 0:
                        dist[v] = dist[u] + 1
                        queue.append(v)
            self._dist_cache[src] = dist
        return self._dist_cache[src]

    def slot_toward(self, u: int, v: int) -> Slot:
        for slot in self.slots[u]:
            if slot.neighbor == v:
                return slot
        raise KeyError(f"no edge {u}->{v} in graph {self.graph_id}")


@dataclass
class Episode:
    graph_id: int
    split: str
    style: str
    start: int
    goal: int
    target_object: int
    path: list[int]
    tokens: list[int]
    words: list[str]


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_train_graphs: int = 200
    n_unseen_graphs: int = 40
    nodes: int = 24
    landmark_dim: int = 24
    noise_sigma: float = 0.1
    min_hops: int = 4
    max_hops: int = 7
    step_limit: int = 15


def direction_encoding(direction: int) -> np.ndarray:
    """Planar heading features (sin, cos, sin-elev, cos-elev) for a slot index."""
    theta = 2.0 * np.pi * direction / N_SLOTS
    return np.array([np.sin(theta), np.cos(theta), 0.0, 1.0], dtype=np.float32)


def view_dim(cfg: WorldConfig) -> int:
    return cfg.landmark_dim + 4


def slot_vector(slot: Slot) -> np.ndarray:
    """Raw model input for one view: landmark feature plus heading encoding."""
    return np.concatenate([slot.feat, direction_encoding(slot.direction)])


# ---------------------------------------------------------------------------
# generation


def _graph_rng(cfg: WorldConfig, tag: int, idx: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag, idx])


def _build_structure(cfg: WorldConfig, graph_id: int, split: str) -> NavGraph:
    rng = _graph_rng(cfg, 1, graph_id)
    k = cfg.nodes
    positions = rng.uniform(0.0, 1.0, size=(k, 2))
    adj: dict[int, set[int]] = {u: set() for u in range(k)}

    def degree(u):
        return len(adj[u])

    def connect(u, v):
        adj[u].add(v)
        adj[v].add(u)

    # Spanning tree: each node joins its nearest earlier node with capacity.
    for u in range(1, k):
        order = np.argsort(np.linalg.norm(positions[:u] - positions[u], axis=1))
        for v in order:
            if degree(int(v)) < MAX_DEG:
                connect(u, int(v))
                break
        else:
            raise WorldGenError("no earlier node with spare degree")

    # Raise minimum degree by connecting leaves to nearby non-neighbors.
    for u in range(k):
        while degree(u) < MIN_DEG:
            order = np.argsort(np.linalg.norm(positions - positions[u], axis=1))
            for v in order:
                v = int(v)
                if v != u and v not in adj[u] and degree(v) < MAX_DEG:
                    connect(u, v)
                    break
            else:
                raise WorldGenError("cannot satisfy minimum degree")

    # A few extra short edges for route diversity, respecting the cap.
    for _ in range(k // 3):
        u = int(rng.integers(k))
        if degree(u) >= MAX_DEG:
            continue
        order = np.argsort(np.linalg.norm(positions - positions[u], axis=1))
        for v in order:
            v = int(v)
            if v != u and v not in adj[u] and degree(v) < MAX_DEG:
                connect(u, v)
                break

    adj_sorted = {u: sorted(adj[u]) for u in range(k)}

    # Slot assignment by heading, falling back to the next free slot.
    slots: list[list[Slot]] = []
    for u in range(k):
        lms = rng.choice(len(LANDMARKS), size=N_SLOTS, replace=False)
        node_slots = [Slot(landmark=int(lms[i]), direction=i, neighbor=None)
                      for i in range(N_SLOTS)]
        taken = [False] * N_SLOTS
        for v in adj_sorted[u]:
            dx, dy = positions[v] - positions[u]
            want = int(np.round(np.arctan2(dy, dx) / (2 * np.pi / N_SLOTS))) % N_SLOTS
            for off in range(N_SLOTS):
                s = (want + off) % N_SLOTS
                if not taken[s]:
                    taken[s] = True
                    node_slots[s].neighbor = v
                    break
        slots.append(node_slots)

    objects = [int(o) for o in rng.integers(0, len(LANDMARKS), size=k)]
    return NavGraph(graph_id, split, positions, adj_sorted, slots, objects,
                    feature_seed=[cfg.seed, 2, graph_id])


def _fill_features(graph: NavGraph, landmark_vecs: np.ndarray, sigma: float) -> None:
    rng = np.random.default_rng(graph.feature_seed)
    for node_slots in graph.slots:
        for slot in node_slots:
            noise = rng.normal(0.0, sigma, size=landmark_vecs.shape[1])
            slot.feat = (landmark_vecs[slot.landmark] + noise).astype(np.float32)


class World:
    """All graphs of one data generation run plus shared landmark embeddings."""

    def __init__(self, cfg: WorldConfig, graphs: dict[int, NavGraph],
                 landmark_vecs: np.ndarray):
        self.cfg = cfg
        self.graphs = graphs
        self.landmark_vecs = landmark_vecs
        self.vocab = Vocab()

    def graph_ids(self, split: str) -> list[int]:
        if split == "val_seen":
            split = "train"
        ids = [g.graph_id for g in self.graphs.values() if g.split == split]
        if not ids:
            raise ValueError(f"no graphs in split {split!r}")
        return sorted(ids)

    def save(self, path: str) -> None:
        doc = {
            "format_version": WORLD_FORMAT_VERSION,
            "config": asdict(self.cfg),
            "graphs": [
                {
                    "graph_id": g.graph_id,
                    "split": g.split,
                    "positions": g.positions.tolist(),
                    "edges": sorted({tuple(sorted((u, v)))
                                     for u in g.adj for v in g.adj[u]}),
                    "slots": [[{"landmark": s.landmark, "direction": s.direction,
                                "neighbor": s.neighbor} for s in node]
                              for node in g.slots],
                    "objects": g.objects,
                    "feature_seed": g.feature_seed,
                }
                for g in self.graphs.values()
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path: str) -> "World":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format_version") != WORLD_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported world format")
        cfg = WorldConfig(**doc["config"])
        landmark_vecs = _landmark_vecs(cfg)
        graphs = {}
        for g in doc["graphs"]:
            k = len(g["positions"])
            adj: dict[int, list[int]] = {u: [] for u in range(k)}
            for u, v in g["edges"]:
                adj[u].append(v)
                adj[v].append(u)
            adj = {u: sorted(set(vs)) for u, vs in adj.items()}
            slots = [[Slot(landmark=s["landmark"], direction=s["direction"],
                           neighbor=s["neighbor"]) for s in node]
                     for node in g["slots"]]
            graph = NavGraph(g["graph_id"], g["split"],
                             np.asarray(g["positions"]), adj, slots,
                             list(g["objects"]), list(g["feature_seed"]))
            _fill_features(graph, landmark_vecs, cfg.noise_sigma)
            graphs[graph.graph_id] = graph
        return cls(cfg, graphs, landmark_vecs)


def _landmark_vecs(cfg: WorldConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    vecs = rng.normal(size=(len(LANDMARKS), cfg.landmark_dim))
    return (vecs / np.linalg.norm(vecs, axis=1, keepdims=True)).astype(np.float32)


def generate_world(cfg: WorldConfig) -> World:
    """Build all train and unseen graphs plus features, fully seed-determined."""
    landmark_vecs = _landmark_vecs(cfg)
    graphs: dict[int, NavGraph] = {}
    total = cfg.n_train_graphs + cfg.n_unseen_graphs
    for gid in range(total):
        split = "train" if gid < cfg.n_train_graphs else "val_unseen"
        graph = _build_structure(cfg, gid, split)
        _fill_features(graph, landmark_vecs, cfg.noise_sigma)
        graphs[gid] = graph
    return World(cfg, graphs, landmark_vecs)


# ---------------------------------------------------------------------------
# expert policy


def expert_action(graph: NavGraph, node: int, goal: int) -> int:
    """Next hop on the lowest-id shortest path to goal, or STOP at the goal."""
    if node == goal:
        return STOP
    dist = graph.hops_from(goal)
    here = dist[node]
    return min(v for v in graph.neighbors(node) if dist[v] == here - 1)


def expert_path(graph: NavGraph, start: int, goal: int) -> list[int]:
    path = [start]
    node = start
    while node != goal:
        node = expert_action(graph, node, goal)
        path.append(node)
    return path


# ---------------------------------------------------------------------------
# instructions


def _fine_instruction(graph: NavGraph, path: list[int], target_object: int,
                      rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    for u, v in zip(path[:-1], path[1:]):
        lm = LANDMARKS[graph.slot_toward(u, v).landmark]
        verb = ["go", "walk", "head"][int(rng.integers(3))]
        joiner = "toward" if verb == "head" else "to"
        words += [verb, joiner, "the", lm, "then"]
    words += ["stop", "at", "the", LANDMARKS[target_object]]
    return words


def _coarse_instruction(graph: NavGraph, path: list[int], target_object: int,
                        rng: np.random.Generator) -> list[str]:
    goal = path[-1]
    lms = [s.landmark for s in graph.slots[goal]]
    picks = rng.choice(len(lms), size=2, replace=False)
    a, b = (LANDMARKS[lms[int(p)]] for p in picks)
    return ["find", "the", LANDMARKS[target_object], "near", "the", a,
            "and", "the", b]


def make_instruction(graph: NavGraph, path: list[int], target_object: int,
                     style: str, rng: np.random.Generator) -> list[str]:
    if style == "fine":
        return _fine_instruction(graph, path, target_object, rng)
    if style == "coarse":
        return _coarse_instruction(graph, path, target_object, rng)
    raise ValueError(f"unknown instruction style {style!r}")


# ---------------------------------------------------------------------------
# episodes


def sample_episode(world: World, graph: NavGraph, rng: np.random.Generator,
                   style: str) -> Episode:
    cfg = world.cfg
    for _ in range(64):
        start = int(rng.integers(graph.n_nodes))
        hops = graph.hops_from(start)
        ok = np.flatnonzero((hops >= cfg.min_hops) & (hops <= cfg.max_hops))
        if ok.size:
            goal = int(rng.choice(ok))
            break
    else:
        raise WorldGenError(
            f"graph {graph.graph_id}: no goal within [{cfg.min_hops}, {cfg.max_hops}] hops")
    path = expert_path(graph, start, goal)
    target_object = graph.objects[goal]
    words = make_instruction(graph, path, target_object, style, rng)
    split = graph.split if graph.split != "train" else "train"
    return Episode(graph_id=graph.graph_id, split=split, style=style,
                   start=start, goal=goal, target_object=target_object,
                   path=path, tokens=world.vocab.encode(words), words=words)


def make_episodes(world: World, split: str, count: int, seed: int,
                  style: str = "fine") -> list[Episode]:
    """Deterministic episode list; split selects which graphs are eligible."""
    rng = np.random.default_rng([world.cfg.seed, 3, seed])
    ids = world.graph_ids(split)
    episodes = []
    for _ in range(count):
        graph = world.graphs[ids[int(rng.integers(len(ids)))]]
        ep = sample_episode(world, graph, rng, style)
        ep.split = split
        episodes.append(ep)
    return episodes


# ---------------------------------------------------------------------------
# stepping


@dataclass
class NavState:
    graph_id: int
    node: int
    steps: int = 0
    path: list[int] = field(default_factory=list)
    path_len: float = 0.0
    done: bool = False
    stopped: bool = False


def reset(episode: Episode) -> NavState:
    return NavState(graph_id=episode.graph_id, node=episode.start,
                    path=[episode.start])


def step(world: World, state: NavState, action: int) -> NavState:
    """Apply one move or STOP; enforces adjacency and the step limit."""
    if state.done:
        raise IllegalActionError("episode already finished")
    graph = world.graphs[state.graph_id]
    if action == STOP:
        state.done = True
        state.stopped = True
        return state
    if action not in graph.adj[state.node]:
        raise IllegalActionError(
            f"node {action} is not adjacent to {state.node} in graph {state.graph_id}")
    state.path_len += graph.edge_len(state.node, action)
    state.node = action
    state.path.append(action)
    state.steps += 1
    if state.steps >= world.cfg.step_limit:
        state.done = True
    return state
