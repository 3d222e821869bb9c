"""Analytic parameter and FLOP accounting for the navigation model.

Parameter counts are exact: the manifest enumerates every weight a config
creates, and tests hold it equal to the parameter store.  FLOP counts
follow fixed conventions chosen to match common profiler output within
small constant factors:

* a matmul of [s, i] by [i, o] costs 2*s*i*o, a bias adds s*o;
* transcendentals (exp, sigmoid pieces) cost 1 each, so silu is 5 and
  softplus 5 per element, softmax 5 per score;
* a depthwise convolution of width w costs 2*w per output element;
* the selective scan costs 8 per (step, channel, state) pair: three for
  discretizing the transition and input, three for the recurrence
  multiply-accumulate, two for the readout dot product, plus 5 per
  (step, channel) for the step-size softplus and 2 more when a skip
  connection is counted.

The scan is billed at its recurrence work; the parallel schedule does the
same algebra in a different order and is not billed extra.  Index
bookkeeping (argmax, map updates, shortest-path searches) is not counted.
Multiply-accumulate counts (MACs) are FLOPs/2, matching profilers that
bill one fused multiply-add per matmul cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import GLOBAL_STACKS, ModelConfig, resolved_stacks

REFERENCE_PARAMS = 28.0e6
REFERENCE_MACS = 0.46e9


def paper_scale_config() -> ModelConfig:
    """Model dimensions matching the full-scale configuration."""
    return ModelConfig(vocab_size=30522, view_dim=768, max_len=512,
                       d_model=312, heads=12, expand=624, state=16,
                       ffn=1200, n_text_layers=9, n_view_layers=2,
                       dt_rank=16)


# ---------------------------------------------------------------------------
# parameters


def _linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def _attn_params(cfg: ModelConfig, gasa: bool = False) -> int:
    d, h = cfg.d_model, cfg.ffn
    n = 4 * _linear_params(d, d)          # q, k, v, o
    n += _linear_params(d, h) + _linear_params(h, d)
    n += 4 * d                            # two layer norms
    if gasa:
        n += (cfg.max_dist + 1) * cfg.heads
    return n


def _ssm_params(cfg: ModelConfig, d_in: int, skip: bool = True) -> int:
    e, s, r = cfg.expand, cfg.state, cfg.dt_rank
    n = 2 * _linear_params(d_in, s)       # input and readout projections
    n += _linear_params(d_in, r)          # step-size projection
    n += e * s                            # transition poles
    n += e                                # step-size bias
    n += e if skip else 0
    return n


def _rss_params(cfg: ModelConfig) -> int:
    d, e, w = cfg.d_model, cfg.expand, cfg.conv_width
    n = 2 * _linear_params(d, e)          # sequence and gate inputs
    n += e * w + e                        # depthwise conv
    n += _ssm_params(cfg, e)
    if cfg.rss_mode == "bidir":
        n += _ssm_params(cfg, e)
    n += _linear_params(e, d) + 2 * d
    return n


def _cs3_params(cfg: ModelConfig) -> int:
    d, e, s, w = cfg.d_model, cfg.expand, cfg.state, cfg.conv_width
    n = _linear_params(d, e)              # conditioning input
    n += e * w + e                        # depthwise conv
    n += _linear_params(e, s)             # input projection
    n += _linear_params(e, e) + e         # step-size projection and bias
    n += e * s                            # transition poles
    n += _linear_params(d, s)             # readout from the query stream
    n += _linear_params(d, e)             # gate branch
    n += _linear_params(e, d) + 2 * d
    return n


def _bimamba_params(cfg: ModelConfig) -> int:
    d, e, w = cfg.d_model, cfg.expand, cfg.conv_width
    n = _linear_params(d, e)
    n += e * w + e
    n += 2 * _ssm_params(cfg, e)
    n += _linear_params(d, e)
    n += _linear_params(e, d) + 2 * d
    return n


_PARAMS_BY_KIND = {
    "sa": lambda cfg: _attn_params(cfg),
    "cross": lambda cfg: _attn_params(cfg),
    "gasa": lambda cfg: _attn_params(cfg, gasa=True),
    "rss": _rss_params,
    "cs3": _cs3_params,
    "bimamba": _bimamba_params,
}


def params_manifest(cfg: ModelConfig) -> dict[str, int]:
    """Exact per-component parameter counts for one model config."""
    d, h = cfg.d_model, cfg.ffn
    g_kinds, l_kinds = resolved_stacks(cfg)
    out = {
        "text": (cfg.vocab_size * d + cfg.max_len * d + 2 * d
                 + cfg.n_text_layers * _attn_params(cfg)),
        "views": (_linear_params(cfg.view_dim, d) + 2 * d
                  + cfg.n_view_layers * _attn_params(cfg)),
        "map": 4 * d + 16 * d + 3 * d,    # status/step tables, stop/back tokens
        "global": sum(_PARAMS_BY_KIND[k](cfg) for k in g_kinds),
        "local": sum(_PARAMS_BY_KIND[k](cfg) for k in l_kinds),
        "heads": 3 * (_linear_params(d, h) + _linear_params(h, 1)) + 4 * d * d,
    }
    out["total"] = sum(out.values())
    return out


def count_params(cfg: ModelConfig) -> int:
    return params_manifest(cfg)["total"]


# ---------------------------------------------------------------------------
# flops


def _f_linear(s: int, d_in: int, d_out: int) -> int:
    return 2 * s * d_in * d_out + s * d_out


def _f_norm(s: int, d: int) -> int:
    return 8 * s * d


def _f_pointer(s: int, l: int, d: int) -> int:
    # bias-free q/k projections, logits, rectified-sum pooling
    f = 2 * s * d * d + 2 * l * d * d
    f += 2 * s * l * d + 6 * s * l + s
    return f


def _f_attn(cfg: ModelConfig, s: int, s_kv: int, gasa: bool = False) -> int:
    d, h = cfg.d_model, cfg.ffn
    f = 2 * _f_linear(s, d, d) + 2 * _f_linear(s_kv, d, d)
    f += 2 * s * s_kv * d                 # scores
    f += 5 * cfg.heads * s * s_kv         # softmax
    if gasa:
        f += cfg.heads * s * s_kv         # distance bias add
    f += 2 * s * s_kv * d                 # value mix
    f += _f_linear(s, d, h) + s * h + _f_linear(s, h, d)
    f += 2 * (s * d + _f_norm(s, d))      # residual adds and norms
    return f


def scan_flops(t: int, e: int, n: int, skip: bool = True) -> int:
    """Model cost of one selective scan over t steps, e channels, n states."""
    return _f_scan(t, e, n, skip)


def _f_scan(t: int, e: int, n: int, skip: bool = True) -> int:
    f = 8 * t * e * n + 5 * t * e
    if skip:
        f += 2 * t * e
    return f


def _f_ssm_proj(t: int, cfg: ModelConfig) -> int:
    e = cfg.expand
    return (2 * _f_linear(t, e, cfg.state) + _f_linear(t, e, cfg.dt_rank)
            + 5 * t * e)


def _f_rss(cfg: ModelConfig, s: int) -> int:
    d, e, w = cfg.d_model, cfg.expand, cfg.conv_width
    t = 2 * s if cfg.rss_mode == "round" else s
    scans = 2 if cfg.rss_mode == "bidir" else 1
    f = _f_linear(t, d, e)                # sequence input
    f += 2 * t * e * w + 5 * t * e        # conv and silu
    f += scans * (_f_ssm_proj(t, cfg) + _f_scan(t, e, cfg.state))
    if cfg.rss_mode == "round":
        f += s * e                        # fold the return trip
    if cfg.rss_mode == "bidir":
        f += s * e                        # combine directions
    f += _f_linear(s, d, e) + 5 * s * e   # gate branch
    f += s * e                            # gate multiply
    f += _f_linear(s, e, d)
    f += s * d + _f_norm(s, d)
    return f


def _f_cs3(cfg: ModelConfig, s: int, l: int) -> int:
    d, e, n, w = cfg.d_model, cfg.expand, cfg.state, cfg.conv_width
    t = 2 * l                             # conditioning round trip
    f = _f_linear(t, d, e)
    f += 2 * t * e * w + 5 * t * e
    f += _f_linear(t, e, n)               # input projection
    f += _f_linear(t, e, e) + 5 * t * e   # step sizes
    f += _f_linear(1, d, n)               # readout projection
    f += _f_scan(t, e, n, skip=False)
    f += _f_linear(s, d, e) + 5 * s * e   # gate branch
    f += s * e
    f += _f_linear(s, e, d)
    f += s * d + _f_norm(s, d)
    return f


def _f_bimamba(cfg: ModelConfig, s: int, l: int) -> int:
    d, e, w = cfg.d_model, cfg.expand, cfg.conv_width
    t = s + l
    f = _f_linear(t, d, e)
    f += 2 * t * e * w + 5 * t * e
    f += 2 * (_f_ssm_proj(t, cfg) + _f_scan(t, e, cfg.state))
    f += s * e
    f += _f_linear(s, d, e) + 5 * s * e
    f += s * e
    f += _f_linear(s, e, d)
    f += s * d + _f_norm(s, d)
    return f


def _f_layer(kind: str, cfg: ModelConfig, s: int, l_instr: int) -> int:
    if kind == "sa":
        return _f_attn(cfg, s, s)
    if kind == "gasa":
        return _f_attn(cfg, s, s, gasa=True)
    if kind == "cross":
        return _f_attn(cfg, s, l_instr)
    if kind == "rss":
        return _f_rss(cfg, s)
    if kind == "cs3":
        return _f_cs3(cfg, s, l_instr)
    if kind == "bimamba":
        return _f_bimamba(cfg, s, l_instr)
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class Scenario:
    """Map and instruction sizes for one action decision.

    The default ghost count assumes each visited node contributes its mean
    degree minus the two edges consumed by the traversal itself, plus the
    two frontier nodes of the first and latest expansion; override it when
    profiling a concrete rollout.
    """
    l_instr: int = 60
    n_visited: int = 8
    n_ghosts: int | None = None
    n_views: int = 6

    @property
    def ghosts(self) -> int:
        return self.n_ghosts if self.n_ghosts is not None else 2 * self.n_visited + 2

    @property
    def s_global(self) -> int:
        return 1 + self.n_visited + self.ghosts

    @property
    def s_local(self) -> int:
        return 2 + self.n_views


def flops_text(cfg: ModelConfig, l: int) -> int:
    f = l * cfg.d_model + _f_norm(l, cfg.d_model)
    f += cfg.n_text_layers * _f_attn(cfg, l, l)
    return f


def flops_decision(cfg: ModelConfig, sc: Scenario) -> dict[str, int]:
    """FLOPs for one action decision, excluding the per-episode text pass."""
    d = cfg.d_model
    g_kinds, l_kinds = resolved_stacks(cfg)

    pano = _f_linear(sc.n_views, cfg.view_dim, d) + _f_norm(sc.n_views, d)
    pano += cfg.n_view_layers * _f_attn(cfg, sc.n_views, sc.n_views)
    pano += sc.n_views * d                # pool

    ghosts = sc.ghosts * (_f_linear(1, cfg.view_dim, d) + _f_norm(1, d))

    s_g, s_l = sc.s_global, sc.s_local
    glob = s_g * d                        # status embedding adds
    glob += sum(_f_layer(k, cfg, s_g, sc.l_instr) for k in g_kinds)
    loc = s_l * d
    loc += sum(_f_layer(k, cfg, s_l, sc.l_instr) for k in l_kinds)

    def head(s):
        return _f_linear(s, d, cfg.ffn) + s * cfg.ffn + _f_linear(s, cfg.ffn, 1)

    heads = head(s_g) + head(s_l) + head(1)
    heads += _f_pointer(s_g, sc.l_instr, d) + _f_pointer(s_l, sc.l_instr, d)
    fusion = 10 * (1 + sc.ghosts)
    out = {"panorama": pano, "ghosts": ghosts, "global": glob,
           "local": loc, "heads": heads, "fusion": fusion}
    out["total"] = sum(out.values())
    return out


def profile(cfg: ModelConfig, sc: Scenario | None = None) -> dict:
    """Parameters plus per-decision FLOPs/MACs for one configuration."""
    sc = sc or Scenario()
    params = params_manifest(cfg)
    flops = flops_decision(cfg, sc)
    return {
        "params": params,
        "flops": flops,
        "macs": flops["total"] // 2,
        "text_flops": flops_text(cfg, sc.l_instr),
        "scenario": {"l_instr": sc.l_instr, "n_visited": sc.n_visited,
                     "n_ghosts": sc.ghosts},
    }


# ---------------------------------------------------------------------------
# scaling


SWEEP_COMPONENTS = ("rss", "attention", "cs3")


def component_flops(cfg: ModelConfig, component: str, length: int) -> int:
    if component == "rss":
        return _f_rss(cfg, length)
    if component == "attention":
        return _f_attn(cfg, length, length)
    if component == "cs3":
        return _f_cs3(cfg, 8, length)
    raise ValueError(f"unknown component {component!r}; "
                     f"expected one of {SWEEP_COMPONENTS}")


def scaling_sweep(cfg: ModelConfig, component: str,
                  lengths: list[int] | None = None) -> dict:
    """Fit the asymptotic cost exponent of one component in sequence length.

    The slope is the log-log least-squares fit over the last three lengths,
    where lower-order terms have died off.
    """
    if lengths is None:
        lengths = [2 ** k for k in range(12, 19)]
    if len(lengths) < 3:
        raise ValueError("need at least three lengths to fit a slope")
    flops = [component_flops(cfg, component, n) for n in lengths]
    tail = slice(-3, None)
    slope = float(np.polyfit(np.log(np.asarray(lengths[tail], dtype=float)),
                             np.log(np.asarray(flops[tail], dtype=float)), 1)[0])
    return {"component": component, "lengths": list(lengths),
            "flops": flops, "slope": slope}


def format_profile_table(cfg: ModelConfig, sc: Scenario | None = None) -> str:
    """Side-by-side cost of the architecture variants at one scenario."""
    from dataclasses import replace

    sc = sc or Scenario()
    lines = [f"{'arch':<12} {'params (M)':>11} {'decision MFLOPs':>16} "
             f"{'decision MMACs':>15}"]
    for arch in GLOBAL_STACKS:
        r = profile(replace(cfg, arch=arch), sc)
        lines.append(f"{arch:<12} {r['params']['total'] / 1e6:>11.2f} "
                     f"{r['flops']['total'] / 1e6:>16.2f} "
                     f"{r['macs'] / 1e6:>15.2f}")
    return "\n".join(lines)
