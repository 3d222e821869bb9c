# Difficulty ladder between the clean matching probe and the real local branch.
import sys
import numpy as np
from ssmnav.agent import ModelConfig, NavModel, _apply_stack
from ssmnav.params import ParamStore
from ssmnav.training import Adam
from ssmnav.autodiff import add, log_softmax_lastdim, mul, reshape, slice_axis, sum_all, tensor
from ssmnav.env import LANDMARKS, Vocab, direction_encoding

LEVEL = int(sys.argv[1])
rng = np.random.default_rng(0)
vocab = Vocab()
lm_vecs = rng.normal(size=(40, 24)); lm_vecs /= np.linalg.norm(lm_vecs, axis=1, keepdims=True)

cfg = ModelConfig(vocab_size=len(vocab), view_dim=28, d_model=64, heads=4,
                  expand=128, state=8, ffn=128, n_text_layers=2, n_view_layers=1)
model = NavModel(ParamStore(seed=0), cfg)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=50)

def clause(lm):
    return ["go", "to", "the", LANDMARKS[lm]]

def sample():
    # 7 clause landmarks, distinct
    clause_lms = rng.choice(40, size=7, replace=False)
    words = []
    for i, lm in enumerate(clause_lms):
        words += clause(lm) + (["then"] if i < 6 else [])
    k = 0 if LEVEL < 2 else int(rng.integers(7))
    target = int(rng.integers(6))
    # view landmarks: target carries clause k's; distractors avoid/instr-draw
    if LEVEL >= 3:
        pool = np.delete(clause_lms, k)
        d_lms = rng.choice(pool, size=5, replace=False)   # all collide
    else:
        pool = np.setdiff1d(np.arange(40), clause_lms)
        d_lms = rng.choice(pool, size=5, replace=False)
    view_lms = np.insert(d_lms, target, clause_lms[k])
    feats = np.stack([np.concatenate([lm_vecs[l] + rng.normal(0, 0.1, 24),
                                      direction_encoding(i)]) for i, l in enumerate(view_lms)])
    return vocab.encode(words), feats.astype(np.float32), target, k

hits, n = 0, 0
for step in range(4000):
    toks, feats, target, k = sample()
    W = model.text(toks)
    Wraw = model.text.embed(toks)
    x = model.view_norm(model.view_proj(tensor(feats[None])))
    for b in model.view_blocks: x = b(x)
    if LEVEL >= 2:
        x = add(x, model._step_vec(k))
    out = _apply_stack(model.local_layers, x, W, None, "par")
    scores = add(reshape(model.head_local(out), (1, 6)), model.point_local(out, Wraw))
    lp = log_softmax_lastdim(scores)
    loss = mul(slice_axis(lp, 1, target, target+1), tensor(-1.0))
    hits += int(np.argmax(lp.data[0]) == target); n += 1
    sum_all(loss).backward(); opt.step()
    if (step+1) % 500 == 0:
        print(f"L{LEVEL} step {step+1}: acc(last500)={hits/n:.3f}", flush=True)
        hits, n = 0, 0
