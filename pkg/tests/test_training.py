"""Optimizer behavior, navigation metrics and the training loop."""

import json

import numpy as np
import pytest

from ssmnav import agent, training
from ssmnav.agent import NavAgent, model_config_for, new_model
from ssmnav.autodiff import NumericsError
from ssmnav.env import NavState, WorldConfig, generate_world, make_episodes
from ssmnav.params import ParamStore
from ssmnav.training import (
    Adam, TrainConfig, aggregate, corpus_length_table, evaluate,
    format_ablation_table, rollout, score_episode, train,
)

TINY_WORLD = WorldConfig(seed=11, n_train_graphs=3, n_unseen_graphs=2,
                         nodes=12, min_hops=2, max_hops=4)
TINY_MODEL = dict(d_model=32, heads=4, expand=64, state=4, ffn=48)


@pytest.fixture(scope="module")
def world():
    return generate_world(TINY_WORLD)


@pytest.fixture(scope="module")
def model(world):
    return new_model(model_config_for(world, **TINY_MODEL), seed=0)


# --------------------------------------------------------------------------
# optimizer


def quadratic_store(target):
    store = ParamStore(seed=0)
    store.add("x", np.zeros_like(target))
    return store


def test_adam_minimizes_quadratic():
    target = np.array([3.0, -2.0, 0.5], dtype=np.float32)
    store = quadratic_store(target)
    opt = Adam(store, lr=0.05, clip_norm=None)
    for _ in range(400):
        x = store["x"]
        # grad of 0.5 * ||x - target||^2
        x._grad = (x.data - target).astype(np.float32)
        opt.step()
    assert np.allclose(store["x"].data, target, atol=1e-3)


def test_adam_warmup_scales_lr():
    store = quadratic_store(np.zeros(1, dtype=np.float32))
    opt = Adam(store, lr=1.0, warmup_steps=10, clip_norm=None)
    store["x"]._grad = np.ones(1, dtype=np.float32)
    stats = opt.step()
    assert abs(stats["lr"] - 0.1) < 1e-12
    for _ in range(20):
        store["x"]._grad = np.ones(1, dtype=np.float32)
        stats = opt.step()
    assert abs(stats["lr"] - 1.0) < 1e-12


def test_adam_clips_global_norm():
    store = quadratic_store(np.zeros(4, dtype=np.float32))
    opt = Adam(store, lr=0.1, clip_norm=1.0)
    store["x"]._grad = np.full(4, 100.0, dtype=np.float32)
    before = store["x"].data.copy()
    stats = opt.step()
    assert stats["grad_norm"] == pytest.approx(200.0)
    # First Adam step moves by at most lr per element regardless of scale.
    assert np.all(np.abs(store["x"].data - before) <= 0.1 + 1e-6)


def test_adam_rejects_nonfinite_grads():
    store = quadratic_store(np.zeros(2, dtype=np.float32))
    opt = Adam(store)
    store["x"]._grad = np.array([np.nan, 1.0], dtype=np.float32)
    with pytest.raises(NumericsError):
        opt.step()


# --------------------------------------------------------------------------
# metrics


def test_expert_rollout_metrics_are_exact(world, model):
    nav = NavAgent(model)
    for ep in make_episodes(world, "train", 10, seed=1):
        st = nav.start(world, ep)
        while not st.nav.done:
            nav.apply(st, nav.expert_target(st))
        r = score_episode(world, ep, st.nav)
        assert r.sr == 1.0 and r.osr == 1.0
        assert r.ne == 0.0
        assert r.spl == 1.0


def test_spl_formula_cases(world):
    ep = make_episodes(world, "train", 1, seed=2)[0]
    graph = world.graphs[ep.graph_id]
    l_demo = training.euclid_path_length(graph, ep.path)

    # Success with a longer traveled path shrinks the score.
    wander = NavState(graph_id=ep.graph_id, node=ep.goal,
                      path=[ep.start, ep.goal], path_len=2.5 * l_demo,
                      done=True, stopped=True)
    r = score_episode(world, ep, wander)
    assert r.sr == 1.0
    assert r.spl == pytest.approx(l_demo / (2.5 * l_demo))

    # Failure zeroes the score regardless of distance walked.
    far = max(range(graph.n_nodes), key=lambda v: graph.hops_from(ep.goal)[v])
    lost = NavState(graph_id=ep.graph_id, node=far, path=[ep.start, far],
                    path_len=0.1, done=True, stopped=True)
    r = score_episode(world, ep, lost)
    assert r.sr == 0.0 and r.spl == 0.0
    assert r.ne > 0.0


def test_success_within_one_hop(world):
    ep = make_episodes(world, "train", 1, seed=3)[0]
    graph = world.graphs[ep.graph_id]
    near = min(graph.neighbors(ep.goal))
    state = NavState(graph_id=ep.graph_id, node=near, path=[ep.start, near],
                     path_len=1.0, done=True, stopped=True)
    r = score_episode(world, ep, state)
    assert r.sr == 1.0
    assert r.ne == pytest.approx(graph.edge_len(near, ep.goal))


def test_osr_counts_passing_through(world):
    ep = make_episodes(world, "train", 1, seed=4)[0]
    # Visit the goal mid-path, end far away: oracle success without success.
    graph = world.graphs[ep.graph_id]
    far = max(range(graph.n_nodes), key=lambda v: graph.hops_from(ep.goal)[v])
    state = NavState(graph_id=ep.graph_id, node=far,
                     path=[ep.start, ep.goal, far], path_len=1.0,
                     done=True, stopped=True)
    r = score_episode(world, ep, state)
    assert r.osr == 1.0 and r.sr == 0.0


def test_metric_ordering_random_policy(world, model):
    results = [rollout(NavAgent(model), world, ep)
               for ep in make_episodes(world, "train", 20, seed=5)]
    agg = aggregate(results)
    assert agg["osr"] >= agg["sr"] >= agg["spl"]
    assert agg["count"] == 20
    assert sum(b["count"] for b in agg["by_len"].values()) == 20


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_corpus_length_table_counts_and_growth(world):
    episodes = make_episodes(world, "train", 60, seed=7)
    table = corpus_length_table(episodes)
    assert sum(row["count"] for row in table.values()) == 60
    for ep in episodes:
        hops = len(ep.path) - 1
        assert world.cfg.min_hops <= hops <= world.cfg.max_hops
    means = [row["mean_tokens"] for row in table.values()]
    # Fine-style instructions narrate every hop, so length tracks hops.
    assert means == sorted(means)


def test_rollout_deterministic(world, model):
    ep = make_episodes(world, "val_unseen", 1, seed=6)[0]
    nav = NavAgent(model)
    a = rollout(nav, world, ep)
    b = rollout(nav, world, ep)
    assert a.path == b.path and a.spl == b.spl


# --------------------------------------------------------------------------
# training loop


def test_uniform_scores_at_init_give_log_n_actions(world):
    # A fresh model's fused scores should be near-uniform: CE close to ln(A).
    model = new_model(model_config_for(world, **TINY_MODEL), seed=7)
    nav = NavAgent(model)
    ep = make_episodes(world, "train", 1, seed=7)[0]
    st = nav.start(world, ep)
    dec = nav.decide(st)
    n_actions = len(dec.actions)
    ce = -float(np.max(dec.log_probs.data))
    assert abs(ce - np.log(n_actions)) < 1.0


def test_train_reduces_loss_and_writes_artifacts(world, tmp_path):
    model = new_model(model_config_for(world, **TINY_MODEL), seed=8)
    trace = str(tmp_path / "trace.jsonl")
    ckpt = str(tmp_path / "ckpt.params")
    tcfg = TrainConfig(episodes=120, lr=2e-3, eval_every=60, eval_episodes=6,
                       seed=8)
    result = train(model, world, tcfg, trace_path=trace,
                   checkpoint_path=ckpt, quiet=True)
    head = float(np.mean(result.losses[:30]))
    tail = float(np.mean(result.losses[-30:]))
    assert tail < head
    assert result.best is not None
    assert len(result.evals) == 2
    rows = [json.loads(line) for line in open(trace)]
    step_rows = [r for r in rows if "episode" in r and "loss" in r]
    assert len(step_rows) == 120
    assert all(np.isfinite(r["loss"]) for r in step_rows)
    loaded, extra = agent.load_checkpoint(ckpt)
    assert "snapshot" in extra


def test_train_detects_nonfinite_loss(world, tmp_path):
    model = new_model(model_config_for(world, **TINY_MODEL), seed=9)
    model.store["heads.sigma.lin2.weight"].data[:] = np.nan
    tcfg = TrainConfig(episodes=3, seed=9)
    trace = str(tmp_path / "t.jsonl")
    with pytest.raises(NumericsError, match="non-finite"):
        train(model, world, tcfg, trace_path=trace, quiet=True)
    dump = json.load(open(trace + ".nan"))
    assert dump["episode"] == 0


def test_scheduled_sampling_uses_policy_actions(world):
    model = new_model(model_config_for(world, **TINY_MODEL), seed=10)
    nav = NavAgent(model)
    ep = make_episodes(world, "train", 1, seed=10)[0]
    rng = np.random.default_rng(0)
    loss_tf, n_tf, _ = training.train_episode(nav, world, ep, 1.0, rng)
    # With teacher forcing the number of decisions matches the expert path.
    assert n_tf == len(ep.path)
    loss_free, n_free, _ = training.train_episode(nav, world, ep, 0.0, rng)
    assert np.isfinite(float(loss_free.data.reshape(())))


def test_small_overfit_reaches_full_success(world):
    model = new_model(model_config_for(world, **TINY_MODEL), seed=11)
    nav = NavAgent(model)
    eps = make_episodes(world, "train", 6, seed=11)
    opt = Adam(model.store, lr=2e-3, clip_norm=1.0, warmup_steps=10)
    rng = np.random.default_rng(1)
    for it in range(60):
        for ep in eps:
            loss, _, _ = training.train_episode(nav, world, ep, 1.0, rng)
            loss.backward()
            opt.step()
        if it >= 10 and it % 5 == 0:
            sr = np.mean([rollout(nav, world, ep).sr for ep in eps])
            if sr == 1.0:
                return
    sr = np.mean([rollout(nav, world, ep).sr for ep in eps])
    assert sr == 1.0, f"failed to overfit 6 episodes, SR={sr}"


def test_ablate_plumbing(world):
    tcfg = TrainConfig(episodes=4, eval_episodes=3, seed=0)
    report = training.ablate(world, ["hybrid", "pure_trans"], [0],
                             tcfg, model_kwargs=TINY_MODEL)
    assert {r["variant"] for r in report["rows"]} == {"hybrid", "pure_trans"}
    assert set(report["summary"]) == {"hybrid", "pure_trans"}
    table = format_ablation_table(report)
    assert "hybrid" in table and "SR unseen" in table
    with pytest.raises(ValueError, match="variant"):
        training.ablate(world, ["quantum"], [0], tcfg)
