"""Multi-head attention blocks, with an optional graph-distance score bias.

Post-norm residual layout throughout: x + sublayer first, layer norm
second.  The distance-aware variant adds a learned scalar per (head,
hop-distance) to the attention logits before softmax, with distances
clipped to a small table; that is the only difference from plain
self-attention.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    dropout,
    embedding,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
)
from .params import FeedForward, LayerNorm, Linear, ParamStore

NEG_INF = -1e9


class MaskError(ValueError):
    """Raised when a query row has no unmasked key to attend to."""


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, s, d = t.shape
    return transpose(reshape(t, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, s, dh = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, s, h * dh))


class AttnBlock:
    """Attention + feed-forward block with residuals and post-norms.

    ``max_dist`` switches on the graph-distance bias table ((max_dist + 1)
    rows, one scalar column per head); pass hop distances at call time.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 ffn_dim: int, max_dist: int | None = None):
        if d % heads != 0:
            raise ValueError(f"head count {heads} must divide width {d}")
        self.d, self.heads = d, heads
        self.scale = 1.0 / np.sqrt(d // heads)
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)
        self.ffn = FeedForward(store, f"{name}.ffn", d, ffn_dim)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.max_dist = max_dist
        self.dist_bias = (store.zeros(f"{name}.dist_bias", (max_dist + 1, heads))
                          if max_dist is not None else None)

    def __call__(self, x: Tensor, kv: Tensor | None = None,
                 mask: np.ndarray | None = None,
                 dist: np.ndarray | None = None,
                 drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        """x [B, S, D] attends to kv (itself when None); returns [B, S, D].

        ``mask`` is a boolean [B, S_kv] validity map over keys; a query row
        with every key masked is an error, not a silent NaN.  ``dist`` is an
        integer [B, S, S_kv] hop-distance array, required exactly when the
        block has a distance table.
        """
        if x.ndim != 3 or x.shape[2] != self.d:
            raise ShapeError(f"attention input must be [B, S, {self.d}], got {x.shape}")
        source = x if kv is None else kv
        if source.shape[0] != x.shape[0] or source.shape[2] != self.d:
            raise ShapeError(f"kv shape {source.shape} incompatible with x {x.shape}")
        s_q, s_kv = x.shape[1], source.shape[1]

        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(source), self.heads)
        v = _split_heads(self.v(source), self.heads)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), self.scale)

        if self.dist_bias is not None:
            if dist is None:
                raise ValueError("distance-biased attention needs a dist array")
            dist = np.asarray(dist)
            if dist.shape != (x.shape[0], s_q, s_kv):
                raise ShapeError(
                    f"dist must be [{x.shape[0]}, {s_q}, {s_kv}], got {dist.shape}")
            if np.any(dist < 0):
                raise ValueError("hop distances must be non-negative")
            clipped = np.minimum(dist, self.max_dist)
            bias = transpose(embedding(self.dist_bias, clipped), (0, 3, 1, 2))
            scores = add(scores, bias)
        elif dist is not None:
            raise ValueError("this block has no distance table; dist given")

        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (x.shape[0], s_kv):
                raise ShapeError(f"mask must be [{x.shape[0]}, {s_kv}], got {mask.shape}")
            if np.any(~mask.any(axis=1)):
                raise MaskError("a batch row masks out every key")
            addend = np.where(mask, 0.0, NEG_INF).astype(x.data.dtype)
            scores = add(scores, Tensor(addend[:, None, None, :]))

        attn = softmax_lastdim(scores)
        mixed = self.o(_merge_heads(matmul(attn, v)))
        if drop_rate > 0.0:
            mixed = dropout(mixed, drop_rate, rng)
        h = self.norm1(add(x, mixed))
        f = self.ffn(h)
        if drop_rate > 0.0:
            f = dropout(f, drop_rate, rng)
        return self.norm2(add(h, f))


def self_attention(block: AttnBlock, x: Tensor, mask: np.ndarray | None = None,
                   **kw) -> Tensor:
    return block(x, mask=mask, **kw)


def cross_attention(block: AttnBlock, x: Tensor, kv: Tensor,
                    mask: np.ndarray | None = None, **kw) -> Tensor:
    return block(x, kv=kv, mask=mask, **kw)


def gasa(block: AttnBlock, x: Tensor, dist: np.ndarray,
         mask: np.ndarray | None = None, **kw) -> Tensor:
    """Self-attention with hop-distance score biases (see AttnBlock)."""
    return block(x, mask=mask, dist=dist, **kw)
