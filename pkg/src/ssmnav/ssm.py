"""Selective state space scan kernels.

The recurrence h_t = a_t * h_{t-1} + b_t * x_t with data-dependent step
sizes is the workhorse of every sequence block here.  Two evaluation
strategies share one hand-derived backward pass: a plain sequential loop
and a work-efficient parallel prefix scan over fixed-size chunks.  The
scan is registered with the autodiff graph as a single primitive, so
backpropagation through a length-L scan costs one reverse recurrence
instead of L graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat_axis,
    exp,
    expand,
    mul,
    reciprocal,
    reshape,
    slice_axis,
    softplus,
)
from .params import Linear, ParamStore

CHUNK = 64


# ---------------------------------------------------------------------------
# step composition


def compose_steps(later, earlier):
    """Compose affine steps h -> a*h + b; ``earlier`` is applied first.

    Works on (a, b) pairs of equal-shape arrays.  Associativity of this
    composition is what makes the parallel prefix scan valid.
    """
    a2, b2 = later
    a1, b1 = earlier
    return (a2 * a1, a2 * b1 + b2)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _recurrence_seq(coef: np.ndarray, addend: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """All states of h_t = coef_t * h_{t-1} + addend_t, by a plain loop."""
    out = np.empty_like(addend)
    h = h0
    for t in range(addend.shape[1]):
        h = coef[:, t] * h + addend[:, t]
        out[:, t] = h
    return out


def _blelloch_inclusive(p0: np.ndarray, q0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive prefix composition along axis 2 (a power of two).

    Up-sweep then down-sweep of the classic work-efficient scan, vectorized
    over all leading and trailing axes.  (p, q) pairs compose left to right
    with ``compose_steps``; the exclusive result of the down-sweep is folded
    with the original elements to produce the inclusive prefix.
    """
    cs = p0.shape[2]
    p, q = p0.copy(), q0.copy()
    levels = cs.bit_length() - 1
    for lev in range(levels):
        s = 1 << lev
        i = (slice(None), slice(None), slice(2 * s - 1, cs, 2 * s))
        j = (slice(None), slice(None), slice(s - 1, cs, 2 * s))
        pi, qi = p[i], q[i]
        p[i], q[i] = pi * p[j], pi * q[j] + qi
    p[:, :, -1] = 1.0
    q[:, :, -1] = 0.0
    for lev in reversed(range(levels)):
        s = 1 << lev
        i = (slice(None), slice(None), slice(2 * s - 1, cs, 2 * s))
        j = (slice(None), slice(None), slice(s - 1, cs, 2 * s))
        pj, qj = p[j].copy(), q[j].copy()
        p[j], q[j] = p[i], q[i]
        p[i] = pj * p[j]
        q[i] = pj * q[j] + qj
    return p0 * p, p0 * q + q0


def _recurrence_par(coef: np.ndarray, addend: np.ndarray, h0: np.ndarray,
                    chunk: int = CHUNK) -> np.ndarray:
    """Same recurrence as ``_recurrence_seq`` via chunked parallel prefix.

    The sequence is cut into power-of-two chunks whose inclusive prefixes
    (p, q) are computed in parallel; chunk carries are then propagated
    sequentially, so cross-chunk state costs one combine per chunk.
    """
    b, l, e, n = coef.shape
    cs = min(chunk, _next_pow2(l))
    nc = -(-l // cs)
    pad = nc * cs - l
    if pad:
        # Identity steps (a=1, b=0) leave the running state untouched.
        coef = np.concatenate([coef, np.ones((b, pad, e, n), dtype=coef.dtype)], axis=1)
        addend = np.concatenate([addend, np.zeros((b, pad, e, n), dtype=addend.dtype)], axis=1)
    p0 = coef.reshape(b, nc, cs, e, n)
    q0 = addend.reshape(b, nc, cs, e, n)
    p, q = _blelloch_inclusive(p0, q0)
    h = np.empty_like(q)
    carry = h0
    for k in range(nc):
        h[:, k] = p[:, k] * carry[:, None] + q[:, k]
        carry = h[:, k, -1]
    return h.reshape(b, nc * cs, e, n)[:, :l]


# ---------------------------------------------------------------------------
# the autodiff primitive


def _run_recurrence(coef, addend, h0, parallel):
    if parallel:
        return _recurrence_par(coef, addend, h0)
    return _recurrence_seq(coef, addend, h0)


def _scan_core(a_bar: Tensor, b_bar: Tensor, c: Tensor, x: Tensor,
               d: Tensor | None, h0: Tensor | None, parallel: bool) -> tuple[Tensor, Tensor]:
    """Selective scan forward plus its adjoint, as one graph node.

    Backward: with g_t = dL/dh_t, the reverse recurrence
    g_t = dH_t + a_{t+1} * g_{t+1} (dH_t the direct readout gradient)
    runs through the same recurrence kernel on time-flipped arrays, then
    dA_t = g_t h_{t-1}, dB_t = g_t x_t, dx_t = sum_n b_t g_t + D dy_t,
    dC_t = sum_e dy_t h_t, dD = sum dy_t x_t.
    """
    if a_bar.ndim != 4:
        raise ShapeError(f"a_bar must be [B, L, E, N], got {a_bar.shape}")
    bsz, l, e, n = a_bar.shape
    if b_bar.shape != (bsz, l, e, n):
        raise ShapeError(f"b_bar shape {b_bar.shape} != a_bar shape {a_bar.shape}")
    if x.shape != (bsz, l, e):
        raise ShapeError(f"x must be [{bsz}, {l}, {e}], got {x.shape}")
    if c.shape not in ((bsz, l, n), (bsz, 1, n)):
        raise ShapeError(f"c must be [{bsz}, {l}|1, {n}], got {c.shape}")
    if d is not None and d.shape != (e,):
        raise ShapeError(f"d must be [{e}], got {d.shape}")
    if h0 is not None and h0.shape != (bsz, e, n):
        raise ShapeError(f"h0 must be [{bsz}, {e}, {n}], got {h0.shape}")

    ad_, bd, cd, xd = a_bar.data, b_bar.data, c.data, x.data
    h0d = h0.data if h0 is not None else np.zeros((bsz, e, n), dtype=ad_.dtype)
    h_all = _run_recurrence(ad_, bd * xd[..., None], h0d, parallel)
    if cd.shape[1] == 1:
        y = np.einsum("blen,bn->ble", h_all, cd[:, 0])
    else:
        y = np.einsum("blen,bln->ble", h_all, cd)
    if d is not None:
        y = y + xd * d.data
    packed = np.concatenate(
        [y.reshape(bsz, l * e), h_all[:, -1].reshape(bsz, e * n)], axis=1)

    parents: list[Tensor] = [a_bar, b_bar, c, x]
    if d is not None:
        parents.append(d)
    if h0 is not None:
        parents.append(h0)

    def backward(g):
        dy = g[:, :l * e].reshape(bsz, l, e)
        dhf = g[:, l * e:].reshape(bsz, e, n)
        dh = dy[..., None] * cd[:, :, None, :]
        dh[:, -1] += dhf
        ones_head = np.ones((bsz, 1, e, n), dtype=ad_.dtype)
        coef_rev = np.concatenate([ones_head, ad_[:, :0:-1]], axis=1)
        gadj = _run_recurrence(coef_rev, dh[:, ::-1],
                               np.zeros_like(h0d), parallel)[:, ::-1]
        h_prev = np.concatenate([h0d[:, None], h_all[:, :-1]], axis=1)
        grads = [gadj * h_prev, gadj * xd[..., None]]
        if cd.shape[1] == 1:
            grads.append(np.einsum("ble,blen->bn", dy, h_all)[:, None])
        else:
            grads.append(np.einsum("ble,blen->bln", dy, h_all))
        dx = (bd * gadj).sum(-1)
        if d is not None:
            dx = dx + dy * d.data
        grads.append(dx)
        if d is not None:
            grads.append((dy * xd).sum((0, 1)))
        if h0 is not None:
            grads.append(ad_[:, 0] * gadj[:, 0])
        return tuple(grads)

    from .autodiff import _out
    node = _out(packed, tuple(parents), backward)
    y_t = reshape(slice_axis(node, 1, 0, l * e), (bsz, l, e))
    h_t = reshape(slice_axis(node, 1, l * e, l * e + e * n), (bsz, e, n))
    return y_t, h_t


# ---------------------------------------------------------------------------
# public scan API


@dataclass
class DiscreteStep:
    """Zero-order-hold discretized transition: a_bar, b_bar of [B, L, E, N]."""
    a_bar: Tensor
    b_bar: Tensor


def discretize(a: Tensor, b_t: Tensor, delta: Tensor, exact: bool = False) -> DiscreteStep:
    """Turn continuous (A, B_t) and step sizes into per-step transitions.

    a_bar = exp(delta * A).  The default b_bar = delta * B_t is the standard
    first-order simplification; ``exact=True`` uses the full zero-order-hold
    expression (a_bar - 1) / A * B_t instead.
    """
    if a.ndim != 2:
        raise ShapeError(f"a must be [E, N], got {a.shape}")
    e, n = a.shape
    if delta.ndim != 3 or delta.shape[2] != e:
        raise ShapeError(f"delta must be [B, L, {e}], got {delta.shape}")
    bsz, l = delta.shape[0], delta.shape[1]
    if b_t.shape != (bsz, l, n):
        raise ShapeError(f"b_t must be [{bsz}, {l}, {n}], got {b_t.shape}")
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step sizes must be strictly positive")
    d4 = reshape(delta, (bsz, l, e, 1))
    a_bar = exp(mul(d4, a))
    b4 = reshape(b_t, (bsz, l, 1, n))
    if exact:
        gain = mul(add(a_bar, -1.0), reciprocal(a))
        b_bar = mul(gain, b4)
    else:
        b_bar = mul(expand(d4, (bsz, l, e, n)), b4)
    return DiscreteStep(a_bar, b_bar)


def scan_sequential(steps: DiscreteStep, c: Tensor, x: Tensor,
                    d: Tensor | None = None, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run the recurrence step by step; returns (y [B, L, E], h_final [B, E, N])."""
    return _scan_core(steps.a_bar, steps.b_bar, c, x, d, h0, parallel=False)


def scan_parallel(steps: DiscreteStep, c: Tensor, x: Tensor,
                  d: Tensor | None = None, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Chunked parallel-prefix evaluation; same contract as ``scan_sequential``."""
    return _scan_core(steps.a_bar, steps.b_bar, c, x, d, h0, parallel=True)


def scan(steps: DiscreteStep, c: Tensor, x: Tensor, d: Tensor | None = None,
         h0: Tensor | None = None, mode: str = "par") -> tuple[Tensor, Tensor]:
    if mode == "par":
        return scan_parallel(steps, c, x, d, h0)
    if mode == "seq":
        return scan_sequential(steps, c, x, d, h0)
    raise ValueError(f"unknown scan mode {mode!r}")


# ---------------------------------------------------------------------------
# selective parameterization


class SsmParams:
    """Learned maps producing per-step (b, c, delta) plus the transition A.

    A is stored as log(-A) per (channel, state), initialized so -A spans
    [1, N] logarithmically, which keeps every pole strictly stable.  The
    step-size head projects to a low rank and broadcasts up to E channels;
    its bias starts at inverse-softplus of log-uniform steps in [1e-3, 1e-1].
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, e: int, n: int,
                 dt_rank: int = 4, skip: bool = True):
        if e % dt_rank != 0:
            raise ValueError(f"dt_rank {dt_rank} must divide channel count {e}")
        self.d_in, self.e, self.n, self.dt_rank = d_in, e, n, dt_rank
        neg_a = np.geomspace(1.0, n, n)
        self.log_neg_a = store.add(f"{name}.log_neg_a",
                                   np.tile(np.log(neg_a), (e, 1)))
        self.proj_b = Linear(store, f"{name}.proj_b", d_in, n)
        self.proj_c = Linear(store, f"{name}.proj_c", d_in, n)
        self.proj_dt = Linear(store, f"{name}.proj_dt", d_in, dt_rank)
        dt = np.exp(store.rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
        self.dt_bias = store.add(f"{name}.dt_bias", np.log(np.expm1(dt)))
        self.skip = store.ones(f"{name}.skip", (e,)) if skip else None

    def a(self) -> Tensor:
        return mul(exp(self.log_neg_a), -1.0)


def selective_params(u: Tensor, p: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-step (b [B,L,N], c [B,L,N], delta [B,L,E]) read off the sequence u."""
    if u.ndim != 3 or u.shape[2] != p.d_in:
        raise ShapeError(f"u must be [B, L, {p.d_in}], got {u.shape}")
    bsz, l = u.shape[0], u.shape[1]
    b = p.proj_b(u)
    c = p.proj_c(u)
    dt = p.proj_dt(u)
    rep = p.e // p.dt_rank
    dt = reshape(expand(reshape(dt, (bsz, l, p.dt_rank, 1)),
                        (bsz, l, p.dt_rank, rep)), (bsz, l, p.e))
    delta = softplus(add(dt, p.dt_bias))
    return b, c, delta


def run_ssm(u: Tensor, p: SsmParams, mode: str = "par",
            c_override: Tensor | None = None,
            x_override: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Condition on u, discretize, and scan.  Returns (y, h_final).

    ``c_override`` swaps in an external readout (time-invariant [B, 1, N]
    included); ``x_override`` scans a different value sequence than the one
    that produced the selective parameters.
    """
    if x_override is None and p.d_in != p.e:
        raise ShapeError(
            f"run_ssm scans its input; channel counts differ ({p.d_in} vs {p.e}), "
            "pass x_override")
    b, c, delta = selective_params(u, p)
    if c_override is not None:
        c = c_override
    x = u if x_override is None else x_override
    steps = discretize(p.a(), b, delta)
    return scan(steps, c, x, d=p.skip, mode=mode)
