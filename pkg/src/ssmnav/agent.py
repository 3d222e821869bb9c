"""Hybrid navigation agent over a topological map.

Three encoders feed a fused two-branch policy.  The instruction is encoded
once per episode with self-attention.  The coarse branch encodes every
mapped node (stop token, visited nodes, frontier ghosts) with a stack that
interleaves distance-aware attention and instruction-conditioned selective
scans; the fine branch encodes only the current panorama.  A learned scalar
gate mixes the two branch scores over the shared action set, which is stop
plus every ghost node.  Visited nodes are never actions: revisiting happens
implicitly by selecting a ghost whose known-graph path backtracks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env
from .attention import AttnBlock
from .autodiff import (
    Tensor, add, concat_axis, log_softmax_lastdim, matmul, mean_axis,
    mean_lastdim, mul, reshape, sigmoid, silu, slice_axis, tensor, transpose,
)
from .cs3 import BiScanFusionBlock, Cs3Block
from .env import STOP, Episode, NavGraph, World, slot_vector
from .params import Embedding, FeedForward, LayerNorm, Linear, ParamStore
from .rss import RssBlock
from .topomap import STATUS_CURRENT, STATUS_GHOST, STATUS_STOP, TopoMap

ARCHS = ("hybrid", "trans_first", "pure_ssm", "pure_trans")
RSS_MODES = ("round", "causal", "bidir", "attn")
CS3_MODES = ("cs3", "bimamba", "crossattn")
MAX_STEP_EMB = 16

# Layer stacks per architecture; "cs3" and "rss" entries are swapped out by
# the corresponding ablation mode at build time.
GLOBAL_STACKS = {
    "hybrid": ("gasa", "cs3", "gasa", "cross", "gasa"),
    "trans_first": ("gasa", "cross", "gasa", "cs3", "gasa"),
    "pure_ssm": ("rss", "cs3", "rss", "cs3", "rss"),
    "pure_trans": ("gasa", "cross", "gasa", "cross", "gasa"),
}
LOCAL_STACKS = {
    "hybrid": ("cs3", "rss", "cross", "sa"),
    "trans_first": ("cross", "sa", "cs3", "rss"),
    "pure_ssm": ("cs3", "rss", "cs3", "rss"),
    "pure_trans": ("cross", "sa", "cross", "sa"),
}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    view_dim: int
    d_model: int = 64
    heads: int = 4
    expand: int = 128
    state: int = 8
    ffn: int = 128
    n_text_layers: int = 2
    n_view_layers: int = 1
    dt_rank: int = 4
    conv_width: int = 3
    max_dist: int = 5
    max_len: int = 48
    arch: str = "hybrid"
    rss_mode: str = "round"
    cs3_mode: str = "cs3"
    scan_impl: str = "par"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.rss_mode not in RSS_MODES:
            raise ValueError(f"unknown rss_mode {self.rss_mode!r}")
        if self.cs3_mode not in CS3_MODES:
            raise ValueError(f"unknown cs3_mode {self.cs3_mode!r}")


def resolve_kind(kind: str, cfg: ModelConfig) -> str:
    """Apply the component-swap ablation modes to a stack entry."""
    if kind == "cs3":
        return {"cs3": "cs3", "bimamba": "bimamba", "crossattn": "cross"}[cfg.cs3_mode]
    if kind == "rss":
        return "sa" if cfg.rss_mode == "attn" else "rss"
    return kind


def resolved_stacks(cfg: ModelConfig) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Global and local layer kinds after ablation substitutions."""
    g = tuple(resolve_kind(k, cfg) for k in GLOBAL_STACKS[cfg.arch])
    l = tuple(resolve_kind(k, cfg) for k in LOCAL_STACKS[cfg.arch])
    return g, l


def _build_stack(store: ParamStore, prefix: str, kinds: tuple[str, ...],
                 cfg: ModelConfig) -> list[tuple[str, object]]:
    layers: list[tuple[str, object]] = []
    for i, kind in enumerate(kinds):
        name = f"{prefix}.layer{i}"
        kind = resolve_kind(kind, cfg)
        if kind == "cs3":
            block = Cs3Block(store, name, cfg.d_model, cfg.expand, cfg.state,
                             conv_width=cfg.conv_width)
        elif kind == "bimamba":
            block = BiScanFusionBlock(store, name, cfg.d_model, cfg.expand,
                                      cfg.state, conv_width=cfg.conv_width)
        elif kind == "rss":
            block = RssBlock(store, name, cfg.d_model, cfg.expand, cfg.state,
                             conv_width=cfg.conv_width, dt_rank=cfg.dt_rank,
                             scan_mode=cfg.rss_mode)
        elif kind in ("sa", "cross"):
            block = AttnBlock(store, name, cfg.d_model, cfg.heads, cfg.ffn)
        elif kind == "gasa":
            block = AttnBlock(store, name, cfg.d_model, cfg.heads, cfg.ffn,
                              max_dist=cfg.max_dist)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append((kind, block))
    return layers


def _apply_stack(layers, x: Tensor, instr: Tensor, dist: np.ndarray | None,
                 scan_impl: str) -> Tensor:
    for kind, block in layers:
        if kind == "gasa":
            if dist is None:
                raise ValueError("distance-biased layer in a stack without distances")
            x = block(x, dist=dist)
        elif kind == "sa":
            x = block(x)
        elif kind == "cross":
            x = block(x, kv=instr)
        elif kind in ("cs3", "bimamba"):
            x = block(x, instr, scan_impl=scan_impl)
        elif kind == "rss":
            x = block(x, scan_impl=scan_impl)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x


class TextEncoder:
    """Token and position embeddings followed by self-attention blocks."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        d = cfg.d_model
        self.max_len = cfg.max_len
        self.tok = Embedding(store, "text.tok", cfg.vocab_size, d)
        self.pos = Embedding(store, "text.pos", cfg.max_len, d)
        self.norm = LayerNorm(store, "text.norm", d)
        self.blocks = [AttnBlock(store, f"text.block{i}", d, cfg.heads, cfg.ffn)
                       for i in range(cfg.n_text_layers)]

    def embed(self, tokens: list[int]) -> Tensor:
        """Word-plus-position embeddings before any mixing.

        Post-norm attention blocks trade word identity for context; the
        pointer heads key on this pre-mix form, where each position still
        is its word.
        """
        if not 0 < len(tokens) <= self.max_len:
            raise ValueError(f"instruction length {len(tokens)} outside [1, {self.max_len}]")
        ids = np.asarray(tokens, dtype=int)[None, :]
        return self.norm(add(self.tok(ids), self.pos(np.arange(len(tokens))[None, :])))

    def __call__(self, tokens: list[int]) -> Tensor:
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x)
        return x


class PointerScore:
    """Bilinear candidate-word match read out as a score, pointer style.

    Routing a match through attention values, a residual norm, and a
    feed-forward head dilutes it; here the query-key logit itself is the
    evidence.  Pooling sums a rectified copy of each logit so per-word
    gradient does not shrink with instruction length; an untrained model
    scores zero.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int):
        self.q = Linear(store, f"{prefix}.q", d, d, bias=False)
        self.k = Linear(store, f"{prefix}.k", d, d, bias=False)
        self.scale = 1.0 / math.sqrt(d)

    def __call__(self, x: Tensor, instr: Tensor) -> Tensor:
        logits = mul(matmul(self.q(x), transpose(self.k(instr), (0, 2, 1))),
                     tensor(self.scale, dtype=x.dtype))
        return mul(mean_lastdim(silu(logits)),
                   tensor(float(logits.shape[-1]), dtype=x.dtype))


class NavModel:
    """All parameters plus per-decision score computation."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        d = cfg.d_model
        self.store = store
        self.cfg = cfg
        self.dtype = store.dtype
        self.text = TextEncoder(store, cfg)
        self.view_proj = Linear(store, "views.proj", cfg.view_dim, d)
        self.view_norm = LayerNorm(store, "views.norm", d)
        self.view_blocks = [AttnBlock(store, f"views.block{i}", d, cfg.heads, cfg.ffn)
                            for i in range(cfg.n_view_layers)]
        self.status = Embedding(store, "map.status", 4, d)
        # Visit-order / decision-step encoding; index clips at the table end.
        self.step = Embedding(store, "map.step", MAX_STEP_EMB, d)
        self.stop_global = store.uniform("map.stop_global", (1, 1, d), 0.1)
        self.stop_local = store.uniform("map.stop_local", (1, 1, d), 0.1)
        self.back_local = store.uniform("map.back_local", (1, 1, d), 0.1)
        self.global_layers = _build_stack(store, "global", GLOBAL_STACKS[cfg.arch], cfg)
        self.local_layers = _build_stack(store, "local", LOCAL_STACKS[cfg.arch], cfg)
        self.head_global = FeedForward(store, "heads.global", d, cfg.ffn, d_out=1)
        self.head_local = FeedForward(store, "heads.local", d, cfg.ffn, d_out=1)
        self.point_global = PointerScore(store, "heads.point_global", d)
        self.point_local = PointerScore(store, "heads.point_local", d)
        self.head_sigma = FeedForward(store, "heads.sigma", d, cfg.ffn, d_out=1)

    # -- node features ------------------------------------------------------

    def encode_panorama(self, slots) -> tuple[Tensor, Tensor]:
        """Per-view vectors [1, S, D] and their pooled mean [1, 1, D]."""
        raw = np.stack([slot_vector(s) for s in slots])[None, :, :]
        x = self.view_norm(self.view_proj(tensor(raw, dtype=self.dtype)))
        for block in self.view_blocks:
            x = block(x)
        pooled = reshape(mean_axis(x, axis=1), (1, 1, self.cfg.d_model))
        return x, pooled

    def encode_ghost(self, mean_view: np.ndarray) -> Tensor:
        x = self.view_norm(self.view_proj(
            tensor(mean_view[None, None, :], dtype=self.dtype)))
        return x

    def _status_vec(self, status: int) -> Tensor:
        return self.status(np.array([[status]]))

    def _step_vec(self, t: int) -> Tensor:
        return self.step(np.array([[min(t, MAX_STEP_EMB - 1)]]))


@dataclass
class Decision:
    """One policy evaluation: actions[i] scored by log_probs[0, i]."""
    actions: list[int]
    log_probs: Tensor
    sigma: Tensor
    global_scores: Tensor
    local_scores: Tensor


@dataclass
class AgentState:
    world: World
    episode: Episode
    graph: NavGraph
    topo: TopoMap
    nav: env.NavState
    instr: Tensor
    instr_raw: Tensor
    pano_cache: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)


class NavAgent:
    """Binds a NavModel to episode rollout state."""

    def __init__(self, model: NavModel):
        self.model = model

    def start(self, world: World, episode: Episode) -> AgentState:
        graph = world.graphs[episode.graph_id]
        nav = env.reset(episode)
        topo = TopoMap()
        state = AgentState(world=world, episode=episode, graph=graph,
                           topo=topo, nav=nav,
                           instr=self.model.text(episode.tokens),
                           instr_raw=self.model.text.embed(episode.tokens))
        self._arrive(state, episode.start)
        return state

    def _arrive(self, state: AgentState, node: int) -> None:
        state.topo.observe(node, state.graph.slots[node])
        if node not in state.pano_cache:
            state.pano_cache[node] = self.model.encode_panorama(state.graph.slots[node])

    # -- scoring ------------------------------------------------------------

    def _global_scores(self, state: AgentState, order: list[int]) -> tuple[Tensor, Tensor]:
        m = self.model
        t_now = len(state.topo.visit_order) - 1
        parts = [add(add(m.stop_global, m._status_vec(STATUS_STOP)),
                     m._step_vec(t_now))]
        visit_idx = {n: i for i, n in enumerate(state.topo.visit_order)}
        for node in order:
            status = state.topo.status(node)
            if status == STATUS_GHOST:
                emb = m.encode_ghost(state.topo.ghost_view(node))
            else:
                emb = state.pano_cache[node][1]
            emb = add(emb, m._status_vec(status))
            if node in visit_idx:
                emb = add(emb, m._step_vec(visit_idx[node]))
            parts.append(emb)
        seq = concat_axis(parts, axis=1)
        hops = state.topo.hop_matrix(order)
        dist = np.zeros((1, len(order) + 1, len(order) + 1), dtype=int)
        dist[0, 1:, 1:] = hops
        out = _apply_stack(m.global_layers, seq, state.instr, dist, m.cfg.scan_impl)
        scores = add(reshape(m.head_global(out), (1, len(order) + 1)),
                     m.point_global(out, state.instr_raw))
        return scores, out

    def _local_scores(self, state: AgentState) -> Tensor:
        # Column 1 is the shared detour score: ghosts not reachable in one
        # step have no view here, and folding them onto the stop column
        # would pit frontier learning against the stop decision.
        m = self.model
        views, _ = state.pano_cache[state.nav.node]
        step = m._step_vec(len(state.topo.visit_order) - 1)
        stop = add(add(m.stop_local, m._status_vec(STATUS_STOP)), step)
        back = add(add(m.back_local, m._status_vec(STATUS_GHOST)), step)
        cur = add(add(views, m._status_vec(STATUS_CURRENT)), step)
        seq = concat_axis([stop, back, cur], axis=1)
        out = _apply_stack(m.local_layers, seq, state.instr, None, m.cfg.scan_impl)
        return add(reshape(m.head_local(out), (1, seq.shape[1])),
                   m.point_local(out, state.instr_raw))

    def decide(self, state: AgentState) -> Decision:
        if state.nav.done:
            raise env.IllegalActionError("episode already finished")
        m = self.model
        order = state.topo.node_order()
        g_scores, g_out = self._global_scores(state, order)
        l_scores = self._local_scores(state)
        sigma = sigmoid(m.head_sigma(slice_axis(g_out, 1, 0, 1)))
        sigma = reshape(sigma, (1, 1))

        actions = [STOP] + state.topo.ghosts
        pos_in_order = {node: i + 1 for i, node in enumerate(order)}
        slot_of = {s.neighbor: i + 2 for i, s in
                   enumerate(state.graph.slots[state.nav.node])
                   if s.neighbor is not None}

        g_parts, l_parts = [], []
        for action in actions:
            gi = 0 if action == STOP else pos_in_order[action]
            li = slot_of.get(action, 1) if action != STOP else 0
            g_parts.append(slice_axis(g_scores, 1, gi, gi + 1))
            l_parts.append(slice_axis(l_scores, 1, li, li + 1))
        g_sel = concat_axis(g_parts, axis=1)
        l_sel = concat_axis(l_parts, axis=1)
        dt = self.model.dtype
        one_minus = add(tensor(np.ones((1, 1)), dtype=dt),
                        mul(sigma, tensor(-1.0, dtype=dt)))
        fused = add(mul(sigma, g_sel), mul(one_minus, l_sel))
        return Decision(actions=actions, log_probs=log_softmax_lastdim(fused),
                        sigma=sigma, global_scores=g_sel, local_scores=l_sel)

    # -- acting -------------------------------------------------------------

    def apply(self, state: AgentState, action: int) -> None:
        """Execute stop or walk to a ghost along known edges."""
        if action == STOP:
            env.step(state.world, state.nav, STOP)
            return
        for node in state.topo.plan_to(action):
            env.step(state.world, state.nav, node)
            if state.nav.done:
                break
        self._arrive(state, state.nav.node)

    def expert_target(self, state: AgentState) -> int:
        """Demonstrator action: cheapest ghost detour toward the goal.

        Cost of a ghost is the walk length over known edges plus the true
        remaining hops from the ghost; ties prefer the nearer ghost, then
        the lower node id.  Stops exactly at the goal.
        """
        goal = state.episode.goal
        if state.nav.node == goal:
            return STOP
        remaining = state.graph.hops_from(goal)
        best, best_key = None, None
        for g in state.topo.ghosts:
            walk = len(state.topo.plan_to(g))
            key = (walk + remaining[g], walk, g)
            if best_key is None or key < best_key:
                best, best_key = g, key
        if best is None:
            return STOP
        return best


def new_model(cfg: ModelConfig, seed: int = 0) -> NavModel:
    return NavModel(ParamStore(seed=seed), cfg)


def model_config_for(world: World, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=len(world.vocab),
                       view_dim=env.view_dim(world.cfg), **overrides)


def save_checkpoint(model: NavModel, path: str, extra: dict | None = None) -> None:
    """Write weights next to a JSON sidecar holding config and metadata."""
    import json
    model.store.save(path)
    doc = {"model_config": asdict(model.cfg), "extra": extra or {}}
    with open(path + ".json", "w") as fh:
        json.dump(doc, fh, indent=2)


def load_checkpoint(path: str) -> tuple[NavModel, dict]:
    import json
    with open(path + ".json") as fh:
        doc = json.load(fh)
    cfg = ModelConfig(**doc["model_config"])
    loaded = ParamStore.load(path)
    model = NavModel(ParamStore(seed=loaded.seed), cfg)
    fresh, incoming = set(model.store.names()), set(loaded.names())
    if fresh != incoming:
        missing = sorted(fresh ^ incoming)[:5]
        raise ValueError(f"checkpoint does not match config, e.g. {missing}")
    for name, t in model.store.items():
        src = loaded[name]
        if src.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
        t.data[...] = src.data
    return model, doc["extra"]
