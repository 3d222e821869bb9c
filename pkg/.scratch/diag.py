import numpy as np
from collections import defaultdict
from ssmnav import agent, training
from ssmnav.env import WorldConfig, generate_world, make_episodes
from ssmnav.training import Adam
from ssmnav.agent import NavAgent, STOP

world = generate_world(WorldConfig(seed=0))
cfg = agent.model_config_for(world, d_model=64, heads=4, expand=128, state=8, ffn=128)
model = agent.new_model(cfg, seed=0)
nav = NavAgent(model)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=75)
rng = np.random.default_rng(0)
eps = make_episodes(world, "train", 1500, seed=0)

stats = defaultdict(lambda: [0, 0])
for i, ep in enumerate(eps):
    st = nav.start(world, ep)
    losses = []
    k = 0
    from ssmnav.autodiff import mul, slice_axis, sum_all, concat_axis, tensor
    while not st.nav.done:
        dec = nav.decide(st)
        tgt = nav.expert_target(st)
        idx = dec.actions.index(tgt)
        losses.append(mul(slice_axis(dec.log_probs, 1, idx, idx+1), tensor(-1.0)))
        greedy = int(np.argmax(dec.log_probs.data[0]))
        kind = "stop" if tgt == STOP else f"hop{min(k,9)}"
        stats[kind][0] += int(greedy == idx); stats[kind][1] += 1
        nav.apply(st, tgt)
        k += 1
    loss = mul(sum_all(concat_axis(losses, 1)), tensor(1.0/len(losses)))
    loss.backward(); opt.step()
    if (i+1) % 300 == 0:
        line = " ".join(f"{kk}:{a}/{b}={a/b:.2f}" for kk, (a, b) in sorted(stats.items()))
        print(f"ep{i+1}: {line}", flush=True)
        stats = defaultdict(lambda: [0, 0])
