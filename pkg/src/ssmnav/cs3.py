"""Cross-modal selective scan: condition one token set on another sequence.

The conditioning sequence y (e.g. instruction tokens) is concatenated with
its reversal and scanned selectively; only the final state survives, read
out through a projection of the target set's class token.  That single
summary vector then gates every target token multiplicatively before a
projected residual update.  The two inputs play asymmetric roles on
purpose: y drives the state, x chooses what to read and receives it.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat_axis,
    expand,
    flip_axis,
    mul,
    reshape,
    silu,
    slice_axis,
    softplus,
)
from .params import LayerNorm, Linear, ParamStore
from .ssm import SsmParams, discretize, run_ssm, scan
from .rss import baseline_scan, conv_same_safe


class GateInspection(NamedTuple):
    """Intermediate views of the cross-modal gate, for analysis and tests."""
    y_out: Tensor   # [B, 1, E] final-state readout
    x_z: Tensor     # [B, S, E] target-side gate branch
    gated: Tensor   # [B, S, E] broadcast product


class Cs3Block:
    """Parameters of the cross-modal selective scan.

    The state transition A is shared with the plain scan blocks in form
    (diagonal, log(-A) storage); the step-size head here is a full E to E
    map with its own bias.  The readout C comes from the class token of x,
    time-invariant across the scanned sequence.  No skip path runs inside
    the scan; the block residual is the only bypass.
    """

    def __init__(self, store: ParamStore, name: str, d: int, e: int, n: int,
                 conv_width: int = 3):
        self.d, self.e, self.n = d, e, n
        self.linear_y = Linear(store, f"{name}.linear_y", d, e)
        self.conv_w = store.uniform(f"{name}.conv.weight", (e, conv_width),
                                    1.0 / np.sqrt(conv_width))
        self.conv_b = store.zeros(f"{name}.conv.bias", (e,))
        self.linear_b = Linear(store, f"{name}.linear_b", e, n)
        self.linear_dt = Linear(store, f"{name}.linear_dt", e, e)
        dt = np.exp(store.rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
        self.param_dt = store.add(f"{name}.param_dt", np.log(np.expm1(dt)))
        neg_a = np.geomspace(1.0, n, n)
        self.log_neg_a = store.add(f"{name}.log_neg_a", np.tile(np.log(neg_a), (e, 1)))
        self.linear_c = Linear(store, f"{name}.linear_c", d, n)
        self.linear_x = Linear(store, f"{name}.linear_x", d, e)
        self.linear_out = Linear(store, f"{name}.linear_out", e, d)
        self.norm = LayerNorm(store, f"{name}.norm", d)

    def a(self) -> Tensor:
        from .autodiff import exp
        return mul(exp(self.log_neg_a), -1.0)

    def __call__(self, x: Tensor, y: Tensor, scan_impl: str = "par") -> Tensor:
        return cs3_forward(self, x, y, scan_impl)


def _gate(block: Cs3Block, x: Tensor, y: Tensor, scan_impl: str) -> GateInspection:
    if x.ndim != 3 or x.shape[2] != block.d:
        raise ShapeError(f"x must be [B, S, {block.d}], got {x.shape}")
    if y.ndim != 3 or y.shape[2] != block.d:
        raise ShapeError(f"y must be [B, L, {block.d}], got {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch mismatch: x {x.shape} vs y {y.shape}")
    bsz, s = x.shape[0], x.shape[1]

    y2 = concat_axis([y, flip_axis(y, 1)], axis=1)
    y_in = silu(conv_same_safe(block.linear_y(y2), block.conv_w, block.conv_b))
    b = block.linear_b(y_in)
    delta = softplus(add(block.linear_dt(y_in), block.param_dt))
    cls = slice_axis(x, 1, 0, 1)                      # [B, 1, D]
    c = reshape(block.linear_c(cls), (bsz, 1, block.n))
    steps = discretize(block.a(), b, delta)
    y_scan, _ = scan(steps, c, y_in, d=None, mode=scan_impl)
    two_l = y_scan.shape[1]
    y_out = slice_axis(y_scan, 1, two_l - 1, two_l)   # [B, 1, E]
    x_z = silu(block.linear_x(x))                     # [B, S, E]
    gated = mul(expand(y_out, (bsz, s, block.e)), x_z)
    return GateInspection(y_out=y_out, x_z=x_z, gated=gated)


def cs3_forward(block: Cs3Block, x: Tensor, y: Tensor, scan_impl: str = "par") -> Tensor:
    """Cross-modal update of x by the scanned summary of y; [B, S, D] out."""
    ins = _gate(block, x, y, scan_impl)
    return block.norm(add(block.linear_out(ins.gated), x))


def cs3_gate_inspect(block: Cs3Block, x: Tensor, y: Tensor,
                     scan_impl: str = "par") -> GateInspection:
    """Expose the gate internals without the output projection or residual."""
    return _gate(block, x, y, scan_impl)


class BiScanFusionBlock:
    """Ablation stand-in for the cross-modal scan: concatenate then bi-scan.

    y and x are joined into one sequence (conditioning tokens first), a
    bidirectional selective scan mixes them, and the positions belonging to
    x are kept.  Same residual-and-normalize shell as the cross-modal block.
    """

    def __init__(self, store: ParamStore, name: str, d: int, e: int, n: int,
                 conv_width: int = 3, dt_rank: int = 4):
        self.d, self.e = d, e
        self.in_proj = Linear(store, f"{name}.in_proj", d, e)
        self.conv_w = store.uniform(f"{name}.conv.weight", (e, conv_width),
                                    1.0 / np.sqrt(conv_width))
        self.conv_b = store.zeros(f"{name}.conv.bias", (e,))
        self.ssm = SsmParams(store, f"{name}.ssm", e, e, n, dt_rank=dt_rank)
        self.ssm_bw = SsmParams(store, f"{name}.ssm_bw", e, e, n, dt_rank=dt_rank)
        self.gate = Linear(store, f"{name}.gate", d, e)
        self.out = Linear(store, f"{name}.out", e, d)
        self.norm = LayerNorm(store, f"{name}.norm", d)

    def __call__(self, x: Tensor, y: Tensor, scan_impl: str = "par") -> Tensor:
        s = x.shape[1]
        joined = concat_axis([y, x], axis=1)
        u = silu(conv_same_safe(self.in_proj(joined), self.conv_w, self.conv_b))
        mixed = baseline_scan(u, self.ssm, "bidir", p_bw=self.ssm_bw, mode=scan_impl)
        kept = slice_axis(mixed, 1, mixed.shape[1] - s, mixed.shape[1])
        z = silu(self.gate(x))
        return self.norm(add(self.out(mul(kept, z)), x))
