# Length-failure bisection: MODE in {fixedothers, pads, notextblocks}
import sys
import numpy as np
from ssmnav.agent import ModelConfig, NavModel, _apply_stack
from ssmnav.params import ParamStore
from ssmnav.training import Adam
from ssmnav.autodiff import add, log_softmax_lastdim, mul, reshape, slice_axis, sum_all, tensor
from ssmnav.env import LANDMARKS, Vocab, direction_encoding

MODE = sys.argv[1]
rng = np.random.default_rng(0)
vocab = Vocab()
lm_vecs = rng.normal(size=(40, 24)); lm_vecs /= np.linalg.norm(lm_vecs, axis=1, keepdims=True)

cfg = ModelConfig(vocab_size=len(vocab), view_dim=28, d_model=64, heads=4,
                  expand=128, state=8, ffn=128, n_text_layers=2, n_view_layers=1)
model = NavModel(ParamStore(seed=0), cfg)
opt = Adam(model.store, lr=1e-3, clip_norm=1.0, warmup_steps=50)

FIXED = np.arange(33, 40)  # reserved landmark ids for fixed filler clauses

def clause(lm):
    return ["go", "to", "the", LANDMARKS[lm]]

def sample():
    tgt_lm = int(rng.integers(33)) if MODE == "fixedothers" else int(rng.choice(40))
    words = clause(tgt_lm)
    if MODE == "pads":
        words = words + ["<pad>"] * 31
        used = {tgt_lm}
    elif MODE == "fixedothers":
        for lm in FIXED[:6]:
            words += ["then"] + clause(lm)
        used = {tgt_lm, *FIXED[:6]}
    else:  # notextblocks: varying clauses, raw embeddings
        others = rng.choice(np.setdiff1d(np.arange(40), [tgt_lm]), size=6, replace=False)
        for lm in others:
            words += ["then"] + clause(lm)
        used = {tgt_lm, *others}
    target = int(rng.integers(6))
    pool = np.setdiff1d(np.arange(40), list(used))
    d_lms = rng.choice(pool, size=5, replace=False)
    view_lms = np.insert(d_lms, target, tgt_lm)
    feats = np.stack([np.concatenate([lm_vecs[l] + rng.normal(0, 0.1, 24),
                                      direction_encoding(i)]) for i, l in enumerate(view_lms)])
    return vocab.encode(words), feats.astype(np.float32), target

def encode_text(toks):
    if MODE == "notextblocks":
        ids = np.asarray(toks, dtype=int)[None, :]
        return model.text.norm(add(model.text.tok(ids),
                                   model.text.pos(np.arange(len(toks))[None, :])))
    return model.text(toks)

hits, n = 0, 0
for step in range(4000):
    toks, feats, target = sample()
    W = encode_text(toks)
    x = model.view_norm(model.view_proj(tensor(feats[None])))
    for b in model.view_blocks: x = b(x)
    out = _apply_stack(model.local_layers, x, W, None, "par")
    scores = add(reshape(model.head_local(out), (1, 6)), model.point_local(out, W))
    lp = log_softmax_lastdim(scores)
    loss = mul(slice_axis(lp, 1, target, target+1), tensor(-1.0))
    hits += int(np.argmax(lp.data[0]) == target); n += 1
    sum_all(loss).backward(); opt.step()
    if (step+1) % 500 == 0:
        print(f"{MODE} step {step+1}: acc(last500)={hits/n:.3f}", flush=True)
        hits, n = 0, 0
