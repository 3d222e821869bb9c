import json, time
from ssmnav.env import WorldConfig, generate_world
from ssmnav.training import TrainConfig, ablate, format_ablation_table

world = generate_world(WorldConfig(seed=0))
tcfg = TrainConfig(episodes=3000, lr=1e-3, tf_end=0.9, eval_every=0, eval_episodes=60)
t0 = time.time()
report = ablate(world, ["hybrid", "pure_ssm"], seeds=[0, 1, 2], tcfg=tcfg,
                model_kwargs=dict(d_model=64, heads=4, expand=128, state=8, ffn=128),
                quiet=False)
print(format_ablation_table(report))
print("wall:", time.time() - t0)
print(json.dumps(report["summary"]))
