"""Round selective scan and directional baselines.

A causal scan starves early positions of global context.  The round trip
fixes that with one pass: the sequence is concatenated with its own
reversal, a single selective scan runs over the doubled sequence, and the
two halves are folded back together by adding the second half reversed.
Every output position then carries state from the whole sequence.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat_axis,
    conv1d_depthwise,
    flip_axis,
    mul,
    silu,
    slice_axis,
)
from .params import LayerNorm, Linear, ParamStore
from .ssm import SsmParams, run_ssm

SCAN_MODES = ("round", "causal", "bidir")


def conv_same_safe(x: Tensor, kernel: Tensor, bias: Tensor,
                   causal: bool = False) -> Tensor:
    """Depthwise conv that also accepts sequences shorter than the kernel.

    Zero "same" padding makes the result on a right-padded sequence equal
    to the unpadded result position for position, so short inputs are
    padded up to the kernel width and sliced back.
    """
    l, w = x.shape[1], kernel.shape[1]
    if l >= w:
        return conv1d_depthwise(x, kernel, bias, causal=causal)
    pad = Tensor(np.zeros((x.shape[0], w - l, x.shape[2]), dtype=x.data.dtype))
    padded = concat_axis([x, pad], axis=1)
    return slice_axis(conv1d_depthwise(padded, kernel, bias, causal=causal), 1, 0, l)


def round_combine(y2: Tensor) -> Tensor:
    """Fold a doubled sequence [B, 2S, E] into [B, S, E].

    First half kept in order, second half reversed back into place, the
    two added elementwise.
    """
    two_s = y2.shape[1]
    if two_s % 2 != 0:
        raise ShapeError(f"round_combine needs an even length, got {two_s}")
    s = two_s // 2
    fwd = slice_axis(y2, 1, 0, s)
    rev = flip_axis(slice_axis(y2, 1, s, two_s), 1)
    return add(fwd, rev)


def round_scan(x_prime: Tensor, p: SsmParams, mode: str = "par") -> Tensor:
    """One selective scan over [x', flip(x')], folded to the original length."""
    x2 = concat_axis([x_prime, flip_axis(x_prime, 1)], axis=1)
    y2, _ = run_ssm(x2, p, mode=mode)
    return round_combine(y2)


def baseline_scan(x: Tensor, p: SsmParams, direction: str,
                  p_bw: SsmParams | None = None, mode: str = "par") -> Tensor:
    """Directional reference scans: plain causal, or forward+backward summed.

    The bidirectional variant runs two scans with separate parameter sets
    (``p_bw`` defaults to sharing ``p``); any class-token placement is the
    caller's arrangement.
    """
    if direction == "causal":
        y, _ = run_ssm(x, p, mode=mode)
        return y
    if direction == "bidir":
        fw, _ = run_ssm(x, p, mode=mode)
        bw, _ = run_ssm(flip_axis(x, 1), p_bw if p_bw is not None else p, mode=mode)
        return add(fw, flip_axis(bw, 1))
    raise ValueError(f"unknown scan direction {direction!r}")


class RssBlock:
    """Gated sequence-mixing block around a selective scan.

    Project in, depthwise-convolve, scan (round trip by default), gate with
    a parallel branch, project out, add the residual, and normalize.  The
    ``scan_mode`` field swaps the scan pattern without touching any other
    plumbing, so directional ablations share every other parameter shape.
    """

    def __init__(self, store: ParamStore, name: str, d: int, e: int, n: int,
                 conv_width: int = 3, dt_rank: int = 4, scan_mode: str = "round"):
        if scan_mode not in SCAN_MODES:
            raise ValueError(f"scan_mode must be one of {SCAN_MODES}, got {scan_mode!r}")
        self.d, self.e, self.scan_mode = d, e, scan_mode
        self.in_seq = Linear(store, f"{name}.in_seq", d, e)
        self.in_gate = Linear(store, f"{name}.in_gate", d, e)
        self.conv_w = store.uniform(f"{name}.conv.weight", (e, conv_width),
                                    1.0 / np.sqrt(conv_width))
        self.conv_b = store.zeros(f"{name}.conv.bias", (e,))
        self.ssm = SsmParams(store, f"{name}.ssm", e, e, n, dt_rank=dt_rank)
        self.ssm_bw = (SsmParams(store, f"{name}.ssm_bw", e, e, n, dt_rank=dt_rank)
                       if scan_mode == "bidir" else None)
        self.out = Linear(store, f"{name}.out", e, d)
        self.norm = LayerNorm(store, f"{name}.norm", d)

    def _mix(self, x: Tensor, scan_impl: str) -> Tensor:
        if self.scan_mode == "round":
            xf = concat_axis([x, flip_axis(x, 1)], axis=1)
            u = silu(conv_same_safe(self.in_seq(xf), self.conv_w, self.conv_b))
            y2, _ = run_ssm(u, self.ssm, mode=scan_impl)
            return round_combine(y2)
        if self.scan_mode == "causal":
            u = silu(conv_same_safe(self.in_seq(x), self.conv_w, self.conv_b,
                                    causal=True))
            y, _ = run_ssm(u, self.ssm, mode=scan_impl)
            return y
        u = silu(conv_same_safe(self.in_seq(x), self.conv_w, self.conv_b))
        return baseline_scan(u, self.ssm, "bidir", p_bw=self.ssm_bw, mode=scan_impl)

    def __call__(self, x: Tensor, scan_impl: str = "par") -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.d:
            raise ShapeError(f"RssBlock expects [B, S, {self.d}], got {x.shape}")
        y = self._mix(x, scan_impl)
        z = silu(self.in_gate(x))
        return self.norm(add(self.out(mul(y, z)), x))


def rss_block(block: RssBlock, x: Tensor, scan_impl: str = "par") -> Tensor:
    return block(x, scan_impl)
