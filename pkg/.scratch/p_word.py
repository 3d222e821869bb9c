import numpy as np
from ssmnav.agent import ModelConfig, NavModel, _apply_stack
from ssmnav.params import ParamStore
from ssmnav.training import Adam
from ssmnav.autodiff import log_softmax_lastdim, mul, reshape, slice_axis, sum_all, tensor
from ssmnav.env import LANDMARKS, Vocab, direction_encoding

rng = np.random.default_rng(0)
vocab = Vocab()
lm_vecs = np.eye(40)

cfg = ModelConfig(vocab_size=len(vocab), view_dim=44, d_model=64, heads=4,
                  expand=128, state=8, ffn=128, n_text_layers=2, n_view_layers=1)
model = NavModel(ParamStore(seed=0), cfg)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=50)

def sample():
    lms = rng.choice(40, size=6, replace=False)
    target = int(rng.integers(6))
    words = [LANDMARKS[lms[target]]]
    feats = np.stack([np.concatenate([lm_vecs[l] + rng.normal(0, 0.1, 40),
                                      direction_encoding(i)]) for i, l in enumerate(lms)])
    return vocab.encode(words), feats.astype(np.float32), target

hits, n = 0, 0
for step in range(3000):
    toks, feats, target = sample()
    W = model.text(toks)
    x = model.view_norm(model.view_proj(tensor(feats[None])))
    for b in model.view_blocks: x = b(x)
    out = _apply_stack(model.local_layers, x, W, None, "par")
    scores = reshape(model.head_local(out), (1, 6))
    lp = log_softmax_lastdim(scores)
    loss = mul(slice_axis(lp, 1, target, target+1), tensor(-1.0))
    hits += int(np.argmax(lp.data[0]) == target); n += 1
    sum_all(loss).backward(); opt.step()
    if (step+1) % 500 == 0:
        print(f"step {step+1}: acc(last500)={hits/n:.3f}", flush=True)
        hits, n = 0, 0
