# Local branch in isolation on real teacher-forced episodes: loss is CE over
# [stop]+current-slot scores only, no fusion, no global branch.
import numpy as np
from ssmnav import agent, env
from ssmnav.agent import NavAgent
from ssmnav.env import WorldConfig, generate_world, make_episodes, expert_action, STOP
from ssmnav.params import ParamStore
from ssmnav.training import Adam
from ssmnav.autodiff import log_softmax_lastdim, mul, slice_axis, sum_all, tensor

world = generate_world(WorldConfig(seed=0))
cfg = agent.model_config_for(world, d_model=64, heads=4, expand=128, state=8, ffn=128)
model = agent.new_model(cfg, seed=0)
nav = NavAgent(model)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=100)
eps = make_episodes(world, "train", 2000, seed=0, style="fine")

hits = np.zeros(3); n = np.zeros(3)
for i, ep in enumerate(eps):
    st = nav.start(world, ep)
    losses = []
    while not st.nav.done:
        exp = expert_action(st.graph, st.nav.node, ep.goal)
        scores = nav._local_scores(st)
        slot_of = {s.neighbor: j + 1 for j, s in enumerate(st.graph.slots[st.nav.node])}
        target = 0 if exp == STOP else slot_of[exp]
        lp = log_softmax_lastdim(scores)
        losses.append(mul(slice_axis(lp, 1, target, target + 1), tensor(-1.0)))
        k = 0 if target == 0 else (1 if len(st.topo.visit_order) == 1 else 2)
        hits[k] += int(np.argmax(lp.data[0]) == target); n[k] += 1
        st.nav = env.step(world, st.nav, exp)
        if exp != STOP:
            nav._arrive(st, exp)
    sum_all(sum(losses[1:], losses[0])).backward(); opt.step()
    if (i + 1) % 200 == 0:
        accs = np.divide(hits, np.maximum(n, 1))
        print(f"ep {i+1}: stop={accs[0]:.2f} first_hop={accs[1]:.2f} later_hops={accs[2]:.2f}", flush=True)
        hits[:] = 0; n[:] = 0
