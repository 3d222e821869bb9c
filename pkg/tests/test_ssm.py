"""Scan kernel checks against independent reference implementations.

The oracles here deliberately avoid the package's vectorized kernels: a
per-batch python loop for the general case, and the closed-form
convolution kernel k_j = C a^j b for the time-invariant case.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmnav import ssm
from ssmnav.autodiff import ShapeError, Tensor, check_gradients, sum_all, tensor
from ssmnav.params import ParamStore
from ssmnav.ssm import (
    DiscreteStep,
    SsmParams,
    compose_steps,
    discretize,
    run_ssm,
    scan_parallel,
    scan_sequential,
    selective_params,
)


def reference_scan(a_bar, b_bar, c, x, d=None, h0=None):
    """Unvectorized scan: one batch element and one step at a time."""
    bsz, l, e, n = a_bar.shape
    y = np.zeros((bsz, l, e), dtype=a_bar.dtype)
    h_fin = np.zeros((bsz, e, n), dtype=a_bar.dtype)
    for bi in range(bsz):
        h = np.zeros((e, n), dtype=a_bar.dtype) if h0 is None else h0[bi].copy()
        for t in range(l):
            h = a_bar[bi, t] * h + b_bar[bi, t] * x[bi, t][:, None]
            ct = c[bi, 0] if c.shape[1] == 1 else c[bi, t]
            y[bi, t] = h @ ct
            if d is not None:
                y[bi, t] += d * x[bi, t]
        h_fin[bi] = h
    return y, h_fin


def rel_err(got, want):
    """Max absolute difference normalized by the larger overall magnitude."""
    scale = max(1.0, float(np.abs(got).max(initial=0.0)),
                float(np.abs(want).max(initial=0.0)))
    return float(np.abs(got - want).max(initial=0.0)) / scale


def random_case(rng, bsz, l, e, n, dtype=np.float64, c_shared=False, with_d=True,
                with_h0=False):
    a_bar = rng.uniform(0.1, 0.99, size=(bsz, l, e, n)).astype(dtype)
    b_bar = rng.standard_normal((bsz, l, e, n)).astype(dtype) * 0.5
    c = rng.standard_normal((bsz, 1 if c_shared else l, n)).astype(dtype)
    x = rng.standard_normal((bsz, l, e)).astype(dtype)
    d = rng.standard_normal(e).astype(dtype) if with_d else None
    h0 = rng.standard_normal((bsz, e, n)).astype(dtype) if with_h0 else None
    return a_bar, b_bar, c, x, d, h0


def run_mode(mode, a_bar, b_bar, c, x, d, h0):
    fn = scan_parallel if mode == "par" else scan_sequential
    y, h = fn(DiscreteStep(tensor(a_bar, dtype=a_bar.dtype), tensor(b_bar, dtype=b_bar.dtype)),
              tensor(c, dtype=c.dtype), tensor(x, dtype=x.dtype),
              None if d is None else tensor(d, dtype=d.dtype),
              None if h0 is None else tensor(h0, dtype=h0.dtype))
    return y.data, h.data


# ---------------------------------------------------------------------------
# composition


def test_compose_matches_two_steps():
    rng = np.random.default_rng(0)
    a1, b1, a2, b2 = (rng.standard_normal(5) for _ in range(4))
    h = rng.standard_normal(5)
    ac, bc = compose_steps((a2, b2), (a1, b1))
    assert np.allclose(ac * h + bc, a2 * (a1 * h + b1) + b2)


def test_compose_associative():
    rng = np.random.default_rng(1)
    s1, s2, s3 = ((rng.standard_normal(7), rng.standard_normal(7)) for _ in range(3))
    left = compose_steps(s3, compose_steps(s2, s1))
    right = compose_steps(compose_steps(s3, s2), s1)
    assert np.allclose(left[0], right[0], atol=1e-12)
    assert np.allclose(left[1], right[1], atol=1e-12)


def test_identity_step_is_neutral():
    rng = np.random.default_rng(2)
    s = (rng.standard_normal(4), rng.standard_normal(4))
    ident = (np.ones(4), np.zeros(4))
    for got in (compose_steps(s, ident), compose_steps(ident, s)):
        assert np.allclose(got[0], s[0]) and np.allclose(got[1], s[1])


# ---------------------------------------------------------------------------
# scans against the reference


@pytest.mark.parametrize("mode", ["seq", "par"])
@pytest.mark.parametrize("l", [1, 2, 3, 64, 65, 130])
def test_scan_matches_reference(mode, l):
    rng = np.random.default_rng(l)
    case = random_case(rng, 2, l, 3, 4, with_h0=True)
    y, h = run_mode(mode, *case)
    y_ref, h_ref = reference_scan(*case)
    assert rel_err(y, y_ref) < 1e-12
    assert rel_err(h, h_ref) < 1e-12


@pytest.mark.parametrize("mode", ["seq", "par"])
def test_scan_shared_c_matches_reference(mode):
    rng = np.random.default_rng(9)
    case = random_case(rng, 2, 37, 3, 4, c_shared=True, with_d=False)
    y, h = run_mode(mode, *case)
    y_ref, h_ref = reference_scan(*case)
    assert rel_err(y, y_ref) < 1e-12


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 130), bsz=st.integers(1, 3), e=st.integers(1, 4),
       n=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_parallel_equals_sequential(l, bsz, e, n, seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, bsz, l, e, n, with_h0=(seed % 2 == 0),
                       c_shared=(seed % 3 == 0), with_d=(seed % 5 != 0))
    ys, hs = run_mode("seq", *case)
    yp, hp = run_mode("par", *case)
    assert rel_err(ys, yp) < 1e-12
    assert rel_err(hs, hp) < 1e-12


def test_lti_scan_equals_convolution_kernel():
    """Frozen (a, b, c): the scan must equal convolution with k_j = c a^j b."""
    rng = np.random.default_rng(42)
    l, e, n = 16, 3, 4
    a0 = rng.uniform(0.2, 0.95, size=(e, n))
    b0 = rng.standard_normal((e, n)) * 0.4
    c0 = rng.standard_normal(n)
    x = rng.standard_normal((1, l, e))
    kernel = np.zeros((l, e))
    for j in range(l):
        kernel[j] = (a0 ** j * b0) @ c0
    y_conv = np.zeros((1, l, e))
    for t in range(l):
        for j in range(t + 1):
            y_conv[0, t] += kernel[j] * x[0, t - j]
    a_bar = np.broadcast_to(a0, (1, l, e, n)).copy()
    b_bar = np.broadcast_to(b0, (1, l, e, n)).copy()
    c = np.broadcast_to(c0, (1, 1, n)).copy()
    for mode in ("seq", "par"):
        y, _ = run_mode(mode, a_bar, b_bar, c, x, None, None)
        assert rel_err(y, y_conv) < 1e-10


def test_scan_is_causal():
    rng = np.random.default_rng(3)
    a_bar, b_bar, c, x, d, _ = random_case(rng, 1, 20, 2, 3)
    base, _ = run_mode("par", a_bar, b_bar, c, x, d, None)
    x2 = x.copy()
    x2[0, 12:] += 5.0
    pert, _ = run_mode("par", a_bar, b_bar, c, x2, d, None)
    assert np.array_equal(base[0, :12], pert[0, :12])
    assert not np.allclose(base[0, 12:], pert[0, 12:])


def test_scan_split_equals_whole():
    # Carrying h across a split must reproduce the unsplit result.
    rng = np.random.default_rng(4)
    a_bar, b_bar, c, x, d, _ = random_case(rng, 2, 30, 3, 4)
    y_all, h_all = run_mode("par", a_bar, b_bar, c, x, d, None)
    k = 13
    y1, h1 = run_mode("par", a_bar[:, :k], b_bar[:, :k], c[:, :k], x[:, :k], d, None)
    y2, h2 = run_mode("par", a_bar[:, k:], b_bar[:, k:], c[:, k:], x[:, k:], d, h1)
    assert rel_err(np.concatenate([y1, y2], axis=1), y_all) < 1e-12
    assert rel_err(h2, h_all) < 1e-12


def test_long_scan_stays_bounded():
    # Stable poles (|a| < 1) and bounded input keep 10k-step states finite.
    rng = np.random.default_rng(5)
    l = 10_000
    e, n = 2, 4
    a_bar = rng.uniform(0.3, 0.999, size=(1, l, e, n))
    b_bar = rng.uniform(-0.5, 0.5, size=(1, l, e, n))
    c = rng.standard_normal((1, 1, n))
    x = rng.uniform(-1.0, 1.0, size=(1, l, e))
    y, h = run_mode("par", a_bar, b_bar, c, x, None, None)
    assert np.all(np.isfinite(y))
    # Geometric series bound: |h| <= max|b x| / (1 - max|a|).
    assert np.abs(h).max() <= 0.5 / (1 - 0.999) + 1e-6


# ---------------------------------------------------------------------------
# gradients through the primitive


@pytest.mark.parametrize("mode", ["seq", "par"])
@pytest.mark.parametrize("c_shared", [False, True])
def test_scan_gradients(mode, c_shared):
    rng = np.random.default_rng(6)
    a_bar, b_bar, c, x, d, h0 = random_case(rng, 2, 9, 2, 3, c_shared=c_shared,
                                            with_h0=True)
    wy = tensor(rng.standard_normal((2, 9, 2)), dtype=np.float64)
    wh = tensor(rng.standard_normal((2, 2, 3)), dtype=np.float64)
    leaves = [tensor(v, requires_grad=True, dtype=np.float64)
              for v in (a_bar, b_bar, c, x, d, h0)]

    def f(at, bt, ct, xt, dt, ht):
        y, h = ssm.scan(DiscreteStep(at, bt), ct, xt, dt, ht, mode=mode)
        return sum_all(y * wy) + sum_all(h * wh)

    report = check_gradients(f, leaves, tol=1e-6)
    assert report.passed, str(report)


def test_run_ssm_gradients_through_parameterization():
    store = ParamStore(seed=3, dtype=np.float64)
    p = SsmParams(store, "s", d_in=4, e=4, n=3, dt_rank=2)
    rng = np.random.default_rng(7)
    u = tensor(rng.standard_normal((2, 6, 4)), requires_grad=True, dtype=np.float64)
    w = tensor(rng.standard_normal((2, 6, 4)), dtype=np.float64)

    def f(*ts):
        y, _ = run_ssm(ts[0], p)
        return sum_all(y * w)

    report = check_gradients(f, [u] + store.tensors(), tol=1e-4)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# discretization


def test_discretize_small_step_limits():
    rng = np.random.default_rng(8)
    e, n = 3, 4
    a = tensor(-rng.uniform(1.0, 4.0, size=(e, n)), dtype=np.float64)
    b = tensor(rng.standard_normal((1, 5, n)), dtype=np.float64)
    delta = tensor(np.full((1, 5, e), 1e-8), dtype=np.float64)
    step = discretize(a, b, delta)
    assert np.allclose(step.a_bar.data, 1.0, atol=1e-6)
    assert np.allclose(step.b_bar.data, 0.0, atol=1e-6)


def test_discretize_exact_vs_simplified_second_order():
    # The simplified b_bar differs from exact zero-order hold by O(delta^2):
    # halving delta must shrink the gap by about 4x.
    rng = np.random.default_rng(9)
    e, n = 2, 3
    a = tensor(-rng.uniform(0.5, 2.0, size=(e, n)), dtype=np.float64)
    b = tensor(rng.standard_normal((1, 4, n)), dtype=np.float64)

    def gap(dt):
        delta = tensor(np.full((1, 4, e), dt), dtype=np.float64)
        exact = discretize(a, b, delta, exact=True).b_bar.data
        simple = discretize(a, b, delta, exact=False).b_bar.data
        return np.abs(exact - simple).max()

    g1, g2 = gap(1e-3), gap(5e-4)
    assert g1 / g2 == pytest.approx(4.0, rel=0.05)


def test_discretize_exact_matches_expm_series():
    # Scalar cross-check: (e^{dA} - 1)/A * B against a high-order series.
    a_val, dt, b_val = -1.7, 0.3, 2.0
    a = tensor([[a_val]], dtype=np.float64)
    b = tensor([[[b_val]]], dtype=np.float64)
    delta = tensor([[[dt]]], dtype=np.float64)
    got = discretize(a, b, delta, exact=True).b_bar.data.reshape(())
    want = (np.exp(dt * a_val) - 1.0) / a_val * b_val
    assert got == pytest.approx(want, rel=1e-12)


def test_discretize_rejects_nonpositive_delta():
    a = tensor(-np.ones((2, 3)))
    b = tensor(np.ones((1, 4, 3)))
    delta = tensor(np.zeros((1, 4, 2)))
    with pytest.raises(ValueError, match="positive"):
        discretize(a, b, delta)


def test_scan_rejects_mismatched_shapes():
    a_bar = tensor(np.ones((1, 4, 2, 3)))
    b_bar = tensor(np.ones((1, 4, 2, 3)))
    c = tensor(np.ones((1, 4, 3)))
    x_bad = tensor(np.ones((1, 5, 2)))
    with pytest.raises(ShapeError):
        scan_sequential(DiscreteStep(a_bar, b_bar), c, x_bad)
    with pytest.raises(ValueError):
        ssm.scan(DiscreteStep(a_bar, b_bar), c, tensor(np.ones((1, 4, 2))), mode="bogus")


# ---------------------------------------------------------------------------
# selective parameterization


def test_selective_params_shapes_and_positivity():
    store = ParamStore(seed=1)
    p = SsmParams(store, "s", d_in=6, e=8, n=5, dt_rank=4)
    rng = np.random.default_rng(10)
    u = tensor(rng.standard_normal((2, 7, 6)).astype(np.float32) * 3)
    b, c, delta = selective_params(u, p)
    assert b.shape == (2, 7, 5)
    assert c.shape == (2, 7, 5)
    assert delta.shape == (2, 7, 8)
    assert np.all(delta.data > 0)


def test_selective_params_low_rank_broadcast():
    # Channels within one rank group share the projected step size; they can
    # differ only through the per-channel bias.
    store = ParamStore(seed=2)
    p = SsmParams(store, "s", d_in=4, e=6, n=3, dt_rank=2)
    p.dt_bias.data[:] = 0.0
    u = tensor(np.random.default_rng(11).standard_normal((1, 5, 4)).astype(np.float32))
    _, _, delta = selective_params(u, p)
    grouped = delta.data.reshape(1, 5, 2, 3)
    assert np.allclose(grouped, grouped[:, :, :, :1])


def test_ssm_params_poles_strictly_stable():
    store = ParamStore(seed=3)
    p = SsmParams(store, "s", d_in=4, e=4, n=6, dt_rank=2)
    a = p.a().data
    assert np.all(a < 0)
    assert np.allclose(-a[0], np.geomspace(1.0, 6.0, 6))


def test_ssm_params_dt_rank_must_divide():
    store = ParamStore(seed=4)
    with pytest.raises(ValueError, match="divide"):
        SsmParams(store, "s", d_in=4, e=6, n=3, dt_rank=4)


def test_run_ssm_modes_agree():
    store = ParamStore(seed=5)
    p = SsmParams(store, "s", d_in=4, e=4, n=4, dt_rank=2)
    u = tensor(np.random.default_rng(12).standard_normal((2, 40, 4)).astype(np.float32))
    y1, h1 = run_ssm(u, p, mode="seq")
    y2, h2 = run_ssm(u, p, mode="par")
    assert rel_err(y1.data, y2.data) < 1e-5
    assert rel_err(h1.data, h2.data) < 1e-5
