"""Behavior-cloning trainer and navigation metrics.

Training is episode-at-a-time: each decision on the rollout is scored
against a demonstrator that picks the cheapest ghost detour toward the
goal, and the mean cross-entropy over the episode's decisions is one
optimizer step.  Scheduled sampling anneals the probability of executing
the demonstrator's action instead of the policy's own argmax, so later
episodes train on self-inflicted states.  Evaluation is greedy and
gradient-free.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import NavAgent, NavModel, save_checkpoint
from .autodiff import (
    NumericsError, concat_axis, mul, no_grad, slice_axis, sum_all, tensor,
)
from .env import Episode, World, make_episodes

LEN_BUCKET_EDGES = (25, 30, 35)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with global-norm clipping and linear learning-rate warmup."""

    def __init__(self, store, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 1.0,
                 warmup_steps: int = 0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.warmup_steps = warmup_steps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum())
                                 for _, p in self.store.items())))

    def step(self) -> dict:
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NumericsError("non-finite gradient norm")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        lr = self.lr * min(1.0, self.t / max(1, self.warmup_steps))
        for name, p in self.store.items():
            g = p.grad * scale
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
        self.store.zero_grads()
        return {"grad_norm": norm, "lr": lr}


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpisodeResult:
    graph_id: int
    start: int
    goal: int
    n_tokens: int
    path: list[int]
    stopped: bool
    ne: float
    sr: float
    osr: float
    spl: float


def euclid_path_length(graph, path: list[int]) -> float:
    return float(sum(graph.edge_len(u, v) for u, v in zip(path[:-1], path[1:])))


def score_episode(world: World, episode: Episode, nav_state) -> EpisodeResult:
    """Navigation-quality metrics for one finished rollout.

    Success means ending within one hop of the goal; oracle success relaxes
    that to the closest node ever visited.  Path-weighted success divides
    the demonstration's Euclidean length by the longer of it and the
    agent's traveled length, and is zero on failure.
    """
    graph = world.graphs[episode.graph_id]
    hops = graph.hops_from(episode.goal)
    final = nav_state.node
    ne = float(np.linalg.norm(graph.positions[final] - graph.positions[episode.goal]))
    sr = 1.0 if hops[final] <= 1 else 0.0
    osr = 1.0 if min(hops[v] for v in nav_state.path) <= 1 else 0.0
    l_demo = euclid_path_length(graph, episode.path)
    spl = sr * l_demo / max(l_demo, nav_state.path_len)
    return EpisodeResult(graph_id=episode.graph_id, start=episode.start,
                         goal=episode.goal, n_tokens=len(episode.tokens),
                         path=list(nav_state.path), stopped=nav_state.stopped,
                         ne=ne, sr=sr, osr=osr, spl=spl)


def _bucket(n_tokens: int) -> str:
    lo = 0
    for edge in LEN_BUCKET_EDGES:
        if n_tokens < edge:
            return f"[{lo},{edge})"
        lo = edge
    return f"[{lo},inf)"


def corpus_length_table(episodes: list[Episode]) -> dict[int, dict]:
    """Mean instruction length for each demonstration path length, in hops."""
    by_hops: dict[int, list[int]] = {}
    for ep in episodes:
        by_hops.setdefault(len(ep.path) - 1, []).append(len(ep.tokens))
    return {hops: {"count": len(v), "mean_tokens": float(np.mean(v))}
            for hops, v in sorted(by_hops.items())}


def aggregate(results: list[EpisodeResult]) -> dict:
    def summarize(rs):
        return {
            "count": len(rs),
            "ne": float(np.mean([r.ne for r in rs])),
            "sr": float(np.mean([r.sr for r in rs])),
            "osr": float(np.mean([r.osr for r in rs])),
            "spl": float(np.mean([r.spl for r in rs])),
        }

    if not results:
        raise ValueError("no episodes to aggregate")
    out = summarize(results)
    by_len: dict[str, list[EpisodeResult]] = {}
    for r in results:
        by_len.setdefault(_bucket(r.n_tokens), []).append(r)
    out["by_len"] = {k: summarize(v) for k, v in sorted(by_len.items())}
    return out


def rollout(nav: NavAgent, world: World, episode: Episode,
            max_decisions: int | None = None) -> EpisodeResult:
    """Greedy gradient-free rollout of one episode."""
    limit = max_decisions if max_decisions is not None else world.cfg.step_limit
    with no_grad():
        st = nav.start(world, episode)
        for _ in range(limit):
            if st.nav.done:
                break
            dec = nav.decide(st)
            nav.apply(st, dec.actions[int(np.argmax(dec.log_probs.data[0]))])
    # A rollout that exhausts its decision budget is scored where it stands.
    return score_episode(world, episode, st.nav)


def evaluate(model: NavModel, world: World, episodes: list[Episode],
             trace_path: str | None = None) -> dict:
    nav = NavAgent(model)
    results = [rollout(nav, world, ep) for ep in episodes]
    if trace_path:
        with open(trace_path, "w") as fh:
            for r in results:
                fh.write(json.dumps(asdict(r)) + "\n")
    return aggregate(results)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    episodes: int = 1500
    lr: float = 1e-3
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    tf_start: float = 1.0
    tf_end: float = 0.5
    seed: int = 0
    style: str = "fine"
    eval_every: int = 0
    eval_episodes: int = 60


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best: dict | None = None
    wall_seconds: float = 0.0


def _nan_dump(path: str | None, payload: dict) -> None:
    if path:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, default=str)


def train_episode(nav: NavAgent, world: World, episode: Episode,
                  tf_prob: float, rng: np.random.Generator,
                  max_decisions: int | None = None):
    """Accumulate behavior-cloning loss along one scheduled-sampling rollout."""
    limit = max_decisions if max_decisions is not None else world.cfg.step_limit
    st = nav.start(world, episode)
    losses = []
    hits = 0
    for _ in range(limit):
        if st.nav.done:
            break
        dec = nav.decide(st)
        target = nav.expert_target(st)
        idx = dec.actions.index(target)
        losses.append(mul(slice_axis(dec.log_probs, 1, idx, idx + 1),
                          tensor(-1.0, dtype=nav.model.dtype)))
        greedy = int(np.argmax(dec.log_probs.data[0]))
        hits += int(greedy == idx)
        take = idx if rng.uniform() < tf_prob else greedy
        nav.apply(st, dec.actions[take])
    loss = mul(sum_all(concat_axis(losses, axis=1)),
               tensor(1.0 / len(losses), dtype=nav.model.dtype))
    return loss, len(losses), hits


def train(model: NavModel, world: World, tcfg: TrainConfig,
          trace_path: str | None = None,
          checkpoint_path: str | None = None,
          log_every: int = 100, quiet: bool = False) -> TrainResult:
    nav = NavAgent(model)
    opt = Adam(model.store, lr=tcfg.lr, clip_norm=tcfg.clip_norm,
               warmup_steps=max(1, int(tcfg.warmup_frac * tcfg.episodes)))
    rng = np.random.default_rng([tcfg.seed, 17])
    train_eps = make_episodes(world, "train", tcfg.episodes, seed=tcfg.seed,
                              style=tcfg.style)
    val_seen = val_unseen = None
    if tcfg.eval_every:
        val_seen = make_episodes(world, "val_seen", tcfg.eval_episodes,
                                 seed=tcfg.seed + 101, style=tcfg.style)
        val_unseen = make_episodes(world, "val_unseen", tcfg.eval_episodes,
                                   seed=tcfg.seed + 202, style=tcfg.style)

    result = TrainResult()
    trace = open(trace_path, "w") if trace_path else None
    t0 = time.time()
    try:
        for i, episode in enumerate(train_eps):
            u = i / max(1, tcfg.episodes - 1)
            tf_prob = tcfg.tf_start + (tcfg.tf_end - tcfg.tf_start) * u
            loss, n_dec, hits = train_episode(nav, world, episode, tf_prob, rng)
            loss_val = float(loss.data.reshape(()))
            if not np.isfinite(loss_val):
                _nan_dump(trace_path and trace_path + ".nan",
                          {"episode": i, "loss": loss_val,
                           "episode_spec": asdict(episode)})
                raise NumericsError(f"non-finite loss at episode {i}")
            loss.backward()
            stats = opt.step()
            result.losses.append(loss_val)
            if trace:
                trace.write(json.dumps({
                    "episode": i, "loss": round(loss_val, 6),
                    "tf": round(tf_prob, 4), "decisions": n_dec,
                    "acc": round(hits / n_dec, 4),
                    "grad_norm": round(stats["grad_norm"], 4),
                    "lr": stats["lr"]}) + "\n")
            if not quiet and (i + 1) % log_every == 0:
                recent = float(np.mean(result.losses[-log_every:]))
                print(f"episode {i + 1}/{tcfg.episodes} loss={recent:.4f} "
                      f"tf={tf_prob:.2f}", flush=True)
            if tcfg.eval_every and ((i + 1) % tcfg.eval_every == 0
                                    or i + 1 == tcfg.episodes):
                snap = {
                    "episode": i + 1,
                    "val_seen": evaluate(model, world, val_seen),
                    "val_unseen": evaluate(model, world, val_unseen),
                }
                result.evals.append(snap)
                if trace:
                    trace.write(json.dumps({"eval": snap}) + "\n")
                if not quiet:
                    print(f"  eval@{i + 1}: "
                          f"seen sr={snap['val_seen']['sr']:.2f} "
                          f"spl={snap['val_seen']['spl']:.2f} | "
                          f"unseen sr={snap['val_unseen']['sr']:.2f} "
                          f"spl={snap['val_unseen']['spl']:.2f}", flush=True)
                score = snap["val_unseen"]["sr"] + snap["val_unseen"]["spl"]
                if result.best is None or score > result.best["score"]:
                    result.best = {"score": score, **snap}
                    if checkpoint_path:
                        save_checkpoint(model, checkpoint_path,
                                        extra={"snapshot": snap})
    finally:
        if trace:
            trace.close()
    result.wall_seconds = time.time() - t0
    return result


# ---------------------------------------------------------------------------
# ablations


VARIANT_OVERRIDES = {
    "hybrid": {},
    "trans_first": {"arch": "trans_first"},
    "pure_ssm": {"arch": "pure_ssm"},
    "pure_trans": {"arch": "pure_trans"},
    "rss_causal": {"rss_mode": "causal"},
    "rss_bidir": {"rss_mode": "bidir"},
    "rss_attn": {"rss_mode": "attn"},
    "cs3_bimamba": {"cs3_mode": "bimamba"},
    "cs3_crossattn": {"cs3_mode": "crossattn"},
}


def ablate(world: World, variants: list[str], seeds: list[int],
           tcfg: TrainConfig, model_kwargs: dict | None = None,
           quiet: bool = True) -> dict:
    """Train each variant from each seed and tabulate validation metrics."""
    from .agent import model_config_for, new_model

    rows = []
    for variant in variants:
        if variant not in VARIANT_OVERRIDES:
            raise ValueError(f"unknown variant {variant!r}")
        for seed in seeds:
            cfg = model_config_for(world, **(model_kwargs or {}),
                                   **VARIANT_OVERRIDES[variant])
            model = new_model(cfg, seed=seed)
            run_cfg = TrainConfig(**{**asdict(tcfg), "seed": seed})
            train(model, world, run_cfg, quiet=quiet)
            seen = evaluate(model, world, make_episodes(
                world, "val_seen", tcfg.eval_episodes, seed=9001, style=tcfg.style))
            unseen = evaluate(model, world, make_episodes(
                world, "val_unseen", tcfg.eval_episodes, seed=9002, style=tcfg.style))
            rows.append({"variant": variant, "seed": seed,
                         "sr_seen": seen["sr"], "spl_seen": seen["spl"],
                         "sr_unseen": unseen["sr"], "spl_unseen": unseen["spl"]})
            if not quiet:
                print(f"{variant} seed={seed}: unseen sr={unseen['sr']:.2f}",
                      flush=True)
    summary = {}
    for variant in variants:
        vs = [r for r in rows if r["variant"] == variant]
        summary[variant] = {k: float(np.mean([r[k] for r in vs]))
                            for k in ("sr_seen", "spl_seen", "sr_unseen", "spl_unseen")}
    return {"rows": rows, "summary": summary}


def format_ablation_table(report: dict) -> str:
    lines = [f"{'variant':<14} {'SR seen':>8} {'SPL seen':>9} "
             f"{'SR unseen':>10} {'SPL unseen':>11}"]
    for variant, m in report["summary"].items():
        lines.append(f"{variant:<14} {m['sr_seen']:>8.3f} {m['spl_seen']:>9.3f} "
                     f"{m['sr_unseen']:>10.3f} {m['spl_unseen']:>11.3f}")
    return "\n".join(lines)
