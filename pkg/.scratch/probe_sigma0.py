# Full action set (stop + ghosts), but scores come only from the local branch:
# decide() with sigma pinned to zero. Isolates the fusion/global coupling.
import numpy as np
from ssmnav import agent, env
from ssmnav.agent import NavAgent
from ssmnav.env import WorldConfig, generate_world, make_episodes, expert_action, STOP
from ssmnav.training import Adam
from ssmnav.autodiff import concat_axis, log_softmax_lastdim, mul, slice_axis, sum_all, tensor

world = generate_world(WorldConfig(seed=0))
cfg = agent.model_config_for(world, d_model=64, heads=4, expand=128, state=8, ffn=128)
model = agent.new_model(cfg, seed=0)
nav = NavAgent(model)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=100)
eps = make_episodes(world, "train", 3000, seed=0, style="fine")

hits = {}; n = {}
for i, ep in enumerate(eps):
    st = nav.start(world, ep)
    losses = []
    t = 0
    while not st.nav.done:
        exp = expert_action(st.graph, st.nav.node, ep.goal)
        l_scores = nav._local_scores(st)
        actions = [STOP] + st.topo.ghosts
        slot_of = {s.neighbor: j + 2 for j, s in enumerate(st.graph.slots[st.nav.node])}
        cols = [0] + [slot_of.get(g, 1) for g in st.topo.ghosts]
        sel = concat_axis([slice_axis(l_scores, 1, c, c + 1) for c in cols], axis=1)
        lp = log_softmax_lastdim(sel)
        target = actions.index(exp)
        losses.append(mul(slice_axis(lp, 1, target, target + 1), tensor(-1.0)))
        key = "stop" if exp == STOP else f"hop{min(t,5)}"
        hits[key] = hits.get(key, 0) + int(np.argmax(lp.data[0]) == target)
        n[key] = n.get(key, 0) + 1
        st.nav = env.step(world, st.nav, exp)
        if exp != STOP:
            nav._arrive(st, exp)
        t += 1
    sum_all(sum(losses[1:], losses[0])).backward(); opt.step()
    if (i + 1) % 300 == 0:
        line = " ".join(f"{k}:{hits[k]/n[k]:.2f}" for k in sorted(n))
        print(f"ep {i+1}: {line}", flush=True)
        hits = {}; n = {}
