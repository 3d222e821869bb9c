"""Navigation world generation, expert policy and stepping semantics."""

import heapq
import itertools

import numpy as np
import pytest

from ssmnav import env
from ssmnav.env import (
    STOP, Episode, IllegalActionError, NavGraph, Slot, Vocab, World,
    WorldConfig, expert_action, expert_path, generate_world, make_episodes,
    reset, step,
)

SMALL = WorldConfig(seed=7, n_train_graphs=6, n_unseen_graphs=3, nodes=18)


@pytest.fixture(scope="module")
def world():
    return generate_world(SMALL)


# --------------------------------------------------------------------------
# independent oracles


def dijkstra_hops(graph, src):
    """Unit-weight Dijkstra, independent of the BFS in the package."""
    dist = {src: 0}
    heap = [(0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, np.inf):
            continue
        for v in graph.neighbors(u):
            if d + 1 < dist.get(v, np.inf):
                dist[v] = d + 1
                heapq.heappush(heap, (d + 1, v))
    return dist


def union_find_components(graph):
    parent = list(range(graph.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u in range(graph.n_nodes):
        for v in graph.neighbors(u):
            parent[find(u)] = find(v)
    return len({find(u) for u in range(graph.n_nodes)})


def all_shortest_paths(graph, start, goal):
    """Exhaustive enumeration of shortest paths (small graphs only)."""
    target = graph.hops_from(start)[goal]
    out = []
    stack = [[start]]
    while stack:
        path = stack.pop()
        if path[-1] == goal and len(path) - 1 == target:
            out.append(path)
            continue
        if len(path) - 1 >= target:
            continue
        for v in graph.neighbors(path[-1]):
            if v not in path:
                stack.append(path + [v])
    return out


# --------------------------------------------------------------------------
# structure


def test_graphs_connected_and_degree_bounded(world):
    for graph in world.graphs.values():
        assert union_find_components(graph) == 1
        for u in range(graph.n_nodes):
            assert env.MIN_DEG <= len(graph.neighbors(u)) <= env.MAX_DEG


def test_bfs_matches_dijkstra(world):
    for graph in world.graphs.values():
        for src in range(0, graph.n_nodes, 5):
            want = dijkstra_hops(graph, src)
            got = graph.hops_from(src)
            for v in range(graph.n_nodes):
                assert got[v] == want[v]


def test_adjacency_symmetric_and_sorted(world):
    for graph in world.graphs.values():
        for u, vs in graph.adj.items():
            assert vs == sorted(vs)
            assert u not in vs
            for v in vs:
                assert u in graph.adj[v]


def test_slots_cover_all_edges_once(world):
    for graph in world.graphs.values():
        for u in range(graph.n_nodes):
            slot_neighbors = [s.neighbor for s in graph.slots[u]
                              if s.neighbor is not None]
            assert sorted(slot_neighbors) == graph.neighbors(u)
            assert len(graph.slots[u]) == env.N_SLOTS
            directions = [s.direction for s in graph.slots[u]]
            assert directions == list(range(env.N_SLOTS))


def test_slot_landmarks_unique_within_node(world):
    for graph in world.graphs.values():
        for node_slots in graph.slots:
            lms = [s.landmark for s in node_slots]
            assert len(set(lms)) == len(lms)


def test_features_near_landmark_vectors(world):
    sigma = world.cfg.noise_sigma
    bound = 6.0 * sigma * np.sqrt(world.cfg.landmark_dim)
    for graph in world.graphs.values():
        for node_slots in graph.slots:
            for slot in node_slots:
                delta = slot.feat - world.landmark_vecs[slot.landmark]
                assert np.linalg.norm(delta) < bound


def test_generation_deterministic():
    a = generate_world(SMALL)
    b = generate_world(SMALL)
    for gid in a.graphs:
        ga, gb = a.graphs[gid], b.graphs[gid]
        assert ga.adj == gb.adj
        assert np.array_equal(ga.positions, gb.positions)
        for sa, sb in zip(itertools.chain(*ga.slots), itertools.chain(*gb.slots)):
            assert sa.landmark == sb.landmark and sa.neighbor == sb.neighbor
            assert np.array_equal(sa.feat, sb.feat)


def test_splits_disjoint_and_sized(world):
    train = set(world.graph_ids("train"))
    unseen = set(world.graph_ids("val_unseen"))
    assert train.isdisjoint(unseen)
    assert len(train) == SMALL.n_train_graphs
    assert len(unseen) == SMALL.n_unseen_graphs
    assert set(world.graph_ids("val_seen")) == train


def test_save_load_roundtrip(world, tmp_path):
    path = tmp_path / "world.json"
    world.save(str(path))
    loaded = World.load(str(path))
    assert loaded.cfg == world.cfg
    for gid, graph in world.graphs.items():
        other = loaded.graphs[gid]
        assert other.adj == graph.adj
        assert other.split == graph.split
        assert other.objects == graph.objects
        assert np.allclose(other.positions, graph.positions)
        for sa, sb in zip(itertools.chain(*graph.slots),
                          itertools.chain(*other.slots)):
            assert (sa.landmark, sa.direction, sa.neighbor) == \
                   (sb.landmark, sb.direction, sb.neighbor)
            assert np.array_equal(sa.feat, sb.feat)


def test_load_rejects_bad_version(world, tmp_path):
    import json
    path = tmp_path / "world.json"
    world.save(str(path))
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format"):
        World.load(str(path))


# --------------------------------------------------------------------------
# expert policy


def test_expert_path_is_shortest(world):
    rng = np.random.default_rng(0)
    for _ in range(100):
        gid = int(rng.choice(list(world.graphs)))
        graph = world.graphs[gid]
        start, goal = rng.choice(graph.n_nodes, size=2, replace=False)
        path = expert_path(graph, int(start), int(goal))
        assert path[0] == start and path[-1] == goal
        assert len(path) - 1 == graph.hops_from(int(start))[int(goal)]
        for u, v in zip(path[:-1], path[1:]):
            assert graph.has_edge(u, v)


def test_expert_path_lexicographically_smallest(world):
    graph = world.graphs[0]
    rng = np.random.default_rng(1)
    for _ in range(20):
        start, goal = rng.choice(graph.n_nodes, size=2, replace=False)
        candidates = all_shortest_paths(graph, int(start), int(goal))
        want = min(candidates)
        assert expert_path(graph, int(start), int(goal)) == want


def test_expert_action_stop_at_goal(world):
    graph = world.graphs[0]
    assert expert_action(graph, 3, 3) == STOP


# --------------------------------------------------------------------------
# instructions and episodes


def test_episode_hops_within_bounds(world):
    for ep in make_episodes(world, "train", 50, seed=0):
        hops = len(ep.path) - 1
        assert world.cfg.min_hops <= hops <= world.cfg.max_hops
        assert ep.path == expert_path(world.graphs[ep.graph_id], ep.start, ep.goal)
        assert ep.target_object == world.graphs[ep.graph_id].objects[ep.goal]


def test_fine_instruction_mentions_each_hop_landmark(world):
    for ep in make_episodes(world, "train", 20, seed=1, style="fine"):
        graph = world.graphs[ep.graph_id]
        mentioned = [w for w in ep.words if w in env.LANDMARKS]
        hop_lms = [env.LANDMARKS[graph.slot_toward(u, v).landmark]
                   for u, v in zip(ep.path[:-1], ep.path[1:])]
        assert mentioned[:-1] == hop_lms
        assert mentioned[-1] == env.LANDMARKS[ep.target_object]


def test_instruction_lengths(world):
    fine = make_episodes(world, "train", 30, seed=2, style="fine")
    coarse = make_episodes(world, "train", 30, seed=3, style="coarse")
    fine_lens = [len(ep.tokens) for ep in fine]
    coarse_lens = [len(ep.tokens) for ep in coarse]
    assert min(fine_lens) >= 5 * world.cfg.min_hops + 4
    assert max(fine_lens) <= 5 * world.cfg.max_hops + 4 <= 40
    assert all(n == 9 for n in coarse_lens)
    assert max(coarse_lens) < min(fine_lens)


def test_instruction_words_in_vocab(world):
    vocab = Vocab()
    for style in ("fine", "coarse"):
        for ep in make_episodes(world, "train", 10, seed=4, style=style):
            assert vocab.decode(ep.tokens) == ep.words


def test_coarse_names_goal_slots(world):
    for ep in make_episodes(world, "train", 20, seed=5, style="coarse"):
        graph = world.graphs[ep.graph_id]
        goal_lms = {env.LANDMARKS[s.landmark] for s in graph.slots[ep.goal]}
        near = [w for w in ep.words[3:] if w in env.LANDMARKS]
        assert set(near) <= goal_lms
        assert len(near) == 2 and near[0] != near[1]


def test_episodes_deterministic(world):
    a = make_episodes(world, "val_unseen", 15, seed=9)
    b = make_episodes(world, "val_unseen", 15, seed=9)
    assert [(e.graph_id, e.start, e.goal, tuple(e.tokens)) for e in a] == \
           [(e.graph_id, e.start, e.goal, tuple(e.tokens)) for e in b]
    c = make_episodes(world, "val_unseen", 15, seed=10)
    assert [(e.graph_id, e.start, e.goal) for e in a] != \
           [(e.graph_id, e.start, e.goal) for e in c]


def test_episode_split_uses_right_graphs(world):
    unseen = set(world.graph_ids("val_unseen"))
    for ep in make_episodes(world, "val_unseen", 20, seed=6):
        assert ep.graph_id in unseen
        assert ep.split == "val_unseen"
    train = set(world.graph_ids("train"))
    for ep in make_episodes(world, "val_seen", 20, seed=7):
        assert ep.graph_id in train
        assert ep.split == "val_seen"


def test_unknown_style_raises(world):
    graph = world.graphs[0]
    with pytest.raises(ValueError, match="style"):
        env.make_instruction(graph, [0, 1], 0, "vague", np.random.default_rng(0))


# --------------------------------------------------------------------------
# stepping


def test_step_accumulates_euclidean_length(world):
    ep = make_episodes(world, "train", 1, seed=8)[0]
    graph = world.graphs[ep.graph_id]
    state = reset(ep)
    want = 0.0
    for node in ep.path[1:]:
        state = step(world, state, node)
        want += graph.edge_len(state.path[-2], node)
    assert state.node == ep.goal
    assert state.path == ep.path
    assert abs(state.path_len - want) < 1e-12
    state = step(world, state, STOP)
    assert state.done and state.stopped


def test_step_rejects_non_neighbor(world):
    ep = make_episodes(world, "train", 1, seed=8)[0]
    graph = world.graphs[ep.graph_id]
    state = reset(ep)
    bad = next(v for v in range(graph.n_nodes)
               if v != state.node and not graph.has_edge(state.node, v))
    with pytest.raises(IllegalActionError, match="adjacent"):
        step(world, state, bad)


def test_step_after_done_raises(world):
    ep = make_episodes(world, "train", 1, seed=8)[0]
    state = reset(ep)
    step(world, state, STOP)
    with pytest.raises(IllegalActionError, match="finished"):
        step(world, state, STOP)


def test_step_limit_truncates(world):
    ep = make_episodes(world, "train", 1, seed=8)[0]
    graph = world.graphs[ep.graph_id]
    state = reset(ep)
    # Bounce along one edge until the per-episode move budget runs out.
    other = graph.neighbors(state.node)[0]
    pair = (state.node, other)
    while not state.done:
        state = step(world, state, pair[state.steps % 2 == 0])
    assert state.steps == world.cfg.step_limit
    assert not state.stopped


def test_expert_rollout_never_truncates(world):
    for ep in make_episodes(world, "train", 30, seed=11):
        graph = world.graphs[ep.graph_id]
        state = reset(ep)
        while True:
            act = expert_action(graph, state.node, ep.goal)
            state = step(world, state, act)
            if state.done:
                break
        assert state.stopped and state.node == ep.goal
        assert state.steps <= world.cfg.max_hops < world.cfg.step_limit
