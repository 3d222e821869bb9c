import numpy as np, time
from ssmnav import agent
from ssmnav.env import WorldConfig, generate_world
from ssmnav.training import TrainConfig, train

world = generate_world(WorldConfig(seed=0))
cfg = agent.model_config_for(world, d_model=64, heads=4, expand=128, state=8, ffn=128)
model = agent.new_model(cfg, seed=0)
print("params:", model.store.total_params(), flush=True)
tcfg = TrainConfig(episodes=6000, lr=1e-3, eval_every=1000, eval_episodes=60, seed=0)
res = train(model, world, tcfg, quiet=False, log_every=200)
print("wall:", res.wall_seconds)
print("best:", res.best)
