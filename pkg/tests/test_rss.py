"""Round-trip scan block: fold order, influence structure, gradients."""

import numpy as np
import pytest

from ssmnav.autodiff import ShapeError, check_gradients, layer_norm, sum_all, tensor
from ssmnav.params import ParamStore
from ssmnav.rss import RssBlock, baseline_scan, round_combine, round_scan
from ssmnav.ssm import DiscreteStep, SsmParams, scan_parallel


def make_block(seed=0, d=4, e=4, n=3, scan_mode="round", dtype=np.float32):
    store = ParamStore(seed=seed, dtype=dtype)
    block = RssBlock(store, "blk", d=d, e=e, n=n, dt_rank=2, scan_mode=scan_mode)
    return store, block


def influence_mask(block, s, d, seed=1):
    """mask[i, j] true when output token i reacts to a bump at input token j."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, s, d)).astype(np.float32)
    base = block(tensor(x)).data
    mask = np.zeros((s, s), dtype=bool)
    for j in range(s):
        xp = x.copy()
        xp[0, j] += 0.5
        pert = block(tensor(xp)).data
        mask[:, j] = np.abs(pert - base).max(axis=-1)[0] > 0
    return mask


def test_round_combine_order():
    y2 = np.arange(12, dtype=np.float32).reshape(1, 6, 2)
    got = round_combine(tensor(y2)).data
    want = y2[:, :3] + y2[:, :2:-1]
    assert np.array_equal(got, want)


def test_round_combine_rejects_odd_length():
    with pytest.raises(ShapeError):
        round_combine(tensor(np.zeros((1, 5, 2))))


def test_round_trip_cumsum_identity():
    # With identity transitions the scan is a prefix sum over the doubled
    # sequence, so the fold gives prefix(i) + (total + suffix(i)), in other
    # words 2*total + x[i].  A swapped fold would yield 2*total + x[S-1-i].
    rng = np.random.default_rng(2)
    s, e = 6, 3
    x = rng.standard_normal((1, s, e))
    x2 = np.concatenate([x, x[:, ::-1]], axis=1)
    ones = np.ones((1, 2 * s, e, 1))
    c = np.ones((1, 1, 1))
    y2, _ = scan_parallel(
        DiscreteStep(tensor(ones, dtype=np.float64), tensor(ones, dtype=np.float64)),
        tensor(c, dtype=np.float64), tensor(x2, dtype=np.float64))
    folded = round_combine(y2).data
    want = 2.0 * x.sum(axis=1, keepdims=True) + x
    assert np.allclose(folded, want, atol=1e-12)


def test_round_scan_single_token():
    # S=1 doubles to [v, v]; both steps must contribute to the one output.
    store = ParamStore(seed=3)
    p = SsmParams(store, "p", 4, 4, 3, dt_rank=2)
    v = np.random.default_rng(3).standard_normal((1, 1, 4)).astype(np.float32)
    from ssmnav.ssm import run_ssm
    from ssmnav.autodiff import tensor as tt
    y2, _ = run_ssm(tt(np.concatenate([v, v], axis=1)), p)
    want = y2.data[:, :1] + y2.data[:, 1:]
    got = round_scan(tt(v), p).data
    assert np.allclose(got, want, atol=1e-6)


def test_round_block_influence_is_dense():
    _, block = make_block(seed=4, scan_mode="round")
    mask = influence_mask(block, s=5, d=4)
    assert mask.all()


def test_causal_block_influence_is_lower_triangular():
    _, block = make_block(seed=5, scan_mode="causal")
    s = 5
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, s, 4)).astype(np.float32)
    base = block(tensor(x)).data
    for j in range(s):
        xp = x.copy()
        xp[0, j] += 0.5
        pert = block(tensor(xp)).data
        # Bit-exact prefix: nothing before position j may move.
        assert np.array_equal(pert[0, :j], base[0, :j])
        assert np.abs(pert[0, j] - base[0, j]).max() > 0


def test_bidir_palindrome_with_shared_params():
    store = ParamStore(seed=7)
    p = SsmParams(store, "p", 3, 3, 4, dt_rank=1)
    rng = np.random.default_rng(8)
    half = rng.standard_normal((1, 4, 3)).astype(np.float32)
    pal = np.concatenate([half, half[:, ::-1]], axis=1)
    out = baseline_scan(tensor(pal), p, "bidir").data
    assert np.allclose(out, out[:, ::-1], atol=1e-6)


def test_bidir_differs_from_causal():
    store = ParamStore(seed=9)
    p = SsmParams(store, "p", 3, 3, 4, dt_rank=1)
    x = tensor(np.random.default_rng(9).standard_normal((1, 6, 3)).astype(np.float32))
    causal = baseline_scan(x, p, "causal").data
    bidir = baseline_scan(x, p, "bidir").data
    assert not np.allclose(causal, bidir, atol=1e-4)


def test_baseline_scan_rejects_unknown_direction():
    store = ParamStore(seed=0)
    p = SsmParams(store, "p", 3, 3, 2, dt_rank=1)
    with pytest.raises(ValueError):
        baseline_scan(tensor(np.zeros((1, 4, 3), dtype=np.float32)), p, "diagonal")


def test_block_zero_out_proj_reduces_to_norm():
    store, block = make_block(seed=10)
    block.out.weight.data[:] = 0.0
    block.out.bias.data[:] = 0.0
    x = np.random.default_rng(10).standard_normal((2, 5, 4)).astype(np.float32)
    got = block(tensor(x)).data
    want = layer_norm(tensor(x), block.norm.gain, block.norm.shift).data
    assert np.array_equal(got, want)


@pytest.mark.parametrize("scan_mode", ["round", "causal", "bidir"])
def test_block_gradients(scan_mode):
    store, block = make_block(seed=11, scan_mode=scan_mode, dtype=np.float64)
    rng = np.random.default_rng(11)
    x = tensor(rng.standard_normal((1, 3, 4)), requires_grad=True, dtype=np.float64)
    w = tensor(rng.standard_normal((1, 3, 4)), dtype=np.float64)
    report = check_gradients(lambda *ts: sum_all(block(ts[0]) * w),
                             [x] + store.tensors(), tol=1e-4)
    assert report.passed, str(report)


def test_block_single_token_and_two_tokens_run():
    _, block = make_block(seed=12)
    for s in (1, 2):
        out = block(tensor(np.random.default_rng(s).standard_normal((1, s, 4)).astype(np.float32)))
        assert out.shape == (1, s, 4)
        assert np.all(np.isfinite(out.data))


def test_block_rejects_wrong_width():
    _, block = make_block(seed=13)
    with pytest.raises(ShapeError):
        block(tensor(np.zeros((1, 4, 5), dtype=np.float32)))


def test_block_rejects_unknown_mode():
    store = ParamStore(seed=14)
    with pytest.raises(ValueError):
        RssBlock(store, "b", 4, 4, 3, scan_mode="spiral")


def test_block_deterministic():
    _, b1 = make_block(seed=15)
    _, b2 = make_block(seed=15)
    x = np.random.default_rng(15).standard_normal((1, 4, 4)).astype(np.float32)
    assert np.array_equal(b1(tensor(x)).data, b2(tensor(x)).data)


def test_block_seq_par_agree():
    _, block = make_block(seed=16)
    x = tensor(np.random.default_rng(16).standard_normal((2, 70, 4)).astype(np.float32))
    a = block(x, scan_impl="seq").data
    b = block(x, scan_impl="par").data
    assert np.allclose(a, b, atol=1e-5)
