import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv2d_loops, t64
from gctx_unet.errors import ConfigError, DimensionError
from gctx_unet.gradchecks import run_scale
from gctx_unet.nnblocks import (
    UPSAMPLERS,
    Downsample,
    FusedMBConv,
    GCViTBlock,
    GCViTStage,
    GlobalTokenGenerator,
    PatchEmbed,
    RelPosBias,
    SqueezeExcite,
    Upsample,
    WindowAttention,
    window_merge,
    window_partition,
)


def _randomize(mod, seed, std=0.5):
    r = np.random.default_rng(seed)
    with torch.no_grad():
        for p in mod.parameters():
            p.copy_(torch.from_numpy(r.standard_normal(tuple(p.shape)) * std))
    return mod


def _zero(*params):
    with torch.no_grad():
        for p in params:
            if p is not None:
                p.zero_()


_gelu = np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _np(p):
    return p.detach().numpy()


# squeeze-excite -------------------------------------------------------------


def test_se_half_gate_with_zero_weights():
    se = SqueezeExcite(8, 4)
    _zero(se.fc1.weight, se.fc1.bias, se.fc2.weight, se.fc2.bias)
    x = torch.randn(2, 8, 7, 7)
    out = se(x)
    assert out.shape == (2, 8, 7, 7)
    assert torch.equal(out, 0.5 * x)


def test_se_matches_scalar_oracle():
    se = _randomize(SqueezeExcite(4, 4).double(), 11)
    x = np.random.default_rng(11).standard_normal((1, 4, 2, 2))
    w1, b1, w2, b2 = map(_np, (se.fc1.weight, se.fc1.bias, se.fc2.weight, se.fc2.bias))
    ref = np.empty_like(x)
    s = [x[0, c].mean() for c in range(4)]
    hidden = [_gelu(sum(w1[j, c] * s[c] for c in range(4)) + b1[j]) for j in range(w1.shape[0])]
    for c in range(4):
        gate = _sigmoid(sum(w2[c, j] * hidden[j] for j in range(len(hidden))) + b2[c])
        ref[0, c] = x[0, c] * gate
    np.testing.assert_allclose(se(t64(x)).detach().numpy(), ref, atol=1e-12)


def test_se_rejects_indivisible_channels():
    with pytest.raises(DimensionError):
        SqueezeExcite(6, 4)


# fused mbconv -----------------------------------------------------------------


def test_mbconv_zero_branch_is_identity():
    blk = FusedMBConv(16)
    _zero(blk.dw.weight, blk.pw.weight)
    x = torch.randn(1, 16, 14, 14)
    out = blk(x)
    assert out.shape == x.shape
    assert torch.equal(out, x)


def test_mbconv_equation_oracle():
    blk = _randomize(FusedMBConv(2).double(), 13)
    x = np.random.default_rng(13).standard_normal((1, 2, 4, 4))
    # x_hat = DW-Conv3x3(x); x_hat = GELU(x_hat); x_hat = SE(x_hat); x = Conv1x1(x_hat) + x
    h = conv2d_loops(x, _np(blk.dw.weight), padding=1, groups=2)
    h = _gelu(h)
    s = h.mean(axis=(2, 3))
    gate = _sigmoid(_gelu(s @ _np(blk.se.fc1.weight).T + _np(blk.se.fc1.bias)) @ _np(blk.se.fc2.weight).T
                    + _np(blk.se.fc2.bias))
    h = h * gate[:, :, None, None]
    ref = conv2d_loops(h, _np(blk.pw.weight)) + x
    np.testing.assert_allclose(blk(t64(x)).detach().numpy(), ref, rtol=0, atol=1e-6)


# resamplers ---------------------------------------------------------------------


@pytest.mark.parametrize("shape, out", [((1, 64, 56, 56), (1, 128, 28, 28)), ((1, 8, 14, 14), (1, 16, 7, 7))])
def test_downsample_shapes(shape, out):
    assert Downsample(shape[1])(torch.randn(shape)).shape == out


def test_downsample_odd_extent():
    with pytest.raises(DimensionError):
        Downsample(8)(torch.randn(1, 8, 13, 13))


@pytest.mark.parametrize("kind", UPSAMPLERS)
def test_upsample_shapes(kind):
    assert Upsample(4, kind)(torch.randn(1, 4, 3, 3)).shape == (1, 2, 6, 6)


def test_upsample_stage_shape():
    assert Upsample(512)(torch.randn(1, 512, 7, 7)).shape == (1, 256, 14, 14)


def test_upsample_odd_channels():
    with pytest.raises(DimensionError):
        Upsample(5)


@settings(max_examples=15, deadline=None)
@given(c=st.sampled_from([4, 8, 12]), half=st.integers(1, 6), b=st.integers(1, 2))
def test_upsample_inverts_downsample_shape(c, half, b):
    x = torch.randn(b, c, 2 * half, 2 * half)
    y = Upsample(2 * c)(Downsample(c)(x))
    assert y.shape == x.shape


@pytest.mark.parametrize("shape, c, out", [((1, 3, 224, 224), 64, (1, 64, 56, 56)), ((1, 3, 32, 32), 8, (1, 8, 8, 8))])
def test_patch_embed_shapes(shape, c, out):
    assert PatchEmbed(3, c)(torch.randn(shape)).shape == out


def test_patch_embed_indivisible():
    with pytest.raises(DimensionError):
        PatchEmbed(3, 8)(torch.randn(1, 3, 30, 30))


# windows ------------------------------------------------------------------------


@pytest.mark.parametrize("shape, w, out", [((1, 8, 14, 14), 7, (4, 49, 8)), ((2, 4, 7, 7), 7, (2, 49, 4))])
def test_window_partition_shapes(shape, w, out):
    assert window_partition(torch.randn(shape), w).shape == out


def test_window_round_trip_bit_exact():
    x = torch.from_numpy(np.random.default_rng(17).standard_normal((2, 3, 12, 8)))
    assert torch.equal(window_merge(window_partition(x, 4), 4, 12, 8), x)


def test_window_partition_contents():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    win = window_partition(x, 2)
    assert win[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_window_partition_indivisible():
    with pytest.raises(DimensionError):
        window_partition(torch.randn(1, 2, 7, 7), 2)


@settings(max_examples=20, deadline=None)
@given(b=st.integers(1, 2), c=st.integers(1, 4), nh=st.integers(1, 3), nw=st.integers(1, 3), w=st.integers(1, 4))
def test_window_round_trip_property(b, c, nh, nw, w):
    x = torch.randn(b, c, nh * w, nw * w)
    assert torch.equal(window_merge(window_partition(x, w), w, nh * w, nw * w), x)


def test_rel_pos_bias_is_shift_invariant():
    rb = RelPosBias(3, 2)
    with torch.no_grad():
        rb.table.copy_(torch.randn_like(rb.table))
    bias = rb()
    coords = [(i, j) for i in range(3) for j in range(3)]
    by_offset = {}
    for qi, (qy, qx) in enumerate(coords):
        for ki, (ky, kx) in enumerate(coords):
            off = (qy - ky, qx - kx)
            if off in by_offset:
                assert torch.equal(bias[:, qi, ki], by_offset[off])
            by_offset[off] = bias[:, qi, ki]
    assert len(by_offset) == 25


# attention ------------------------------------------------------------------------


def _attention_oracle(x, q, k, v, table, index, wproj, bproj, heads):
    n, t, c = x.shape
    hd = c // heads
    out = np.zeros((n, t, c))
    for b in range(n):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            logits = np.array([[np.dot(q[b, i, sl], k[b, j, sl]) / math.sqrt(hd) + table[index[i, j], h]
                                for j in range(t)] for i in range(t)])
            logits -= logits.max(axis=1, keepdims=True)
            a = np.exp(logits)
            a /= a.sum(axis=1, keepdims=True)
            out[b, :, sl] = a @ v[b, :, sl]
    return out @ wproj.T + bproj


def test_local_attention_degenerate_weights():
    attn = WindowAttention(64, 2, 7)
    _zero(*attn.parameters())
    out = attn(torch.randn(4, 49, 64))
    assert out.shape == (4, 49, 64)
    assert torch.all(out == 0)


def test_local_attention_oracle():
    attn = _randomize(WindowAttention(2, 1, 2).double(), 19)
    x = np.random.default_rng(19).standard_normal((1, 4, 2))
    qkv = x @ _np(attn.qkv.weight).T + _np(attn.qkv.bias)
    q, k, v = qkv[..., :2], qkv[..., 2:4], qkv[..., 4:]
    ref = _attention_oracle(x, q, k, v, _np(attn.rel_bias.table), attn.rel_bias.index.numpy(),
                            _np(attn.proj.weight), _np(attn.proj.bias), 1)
    np.testing.assert_allclose(attn(t64(x)).detach().numpy(), ref, atol=1e-6)


def test_global_attention_oracle():
    attn = _randomize(WindowAttention(2, 1, 2, "global").double(), 23)
    r = np.random.default_rng(23)
    x, qg = r.standard_normal((1, 4, 2)), r.standard_normal((1, 1, 4, 2))
    kv = x @ _np(attn.qkv.weight).T + _np(attn.qkv.bias)
    ref = _attention_oracle(x, qg[:, 0], kv[..., :2], kv[..., 2:], _np(attn.rel_bias.table),
                            attn.rel_bias.index.numpy(), _np(attn.proj.weight), _np(attn.proj.bias), 1)
    np.testing.assert_allclose(attn(t64(x), t64(qg)).detach().numpy(), ref, atol=1e-6)


def test_global_attention_zero_queries_average_values():
    attn = _randomize(WindowAttention(4, 2, 2, "global").double(), 5)
    _zero(attn.rel_bias.table)
    x = t64(np.random.default_rng(5).standard_normal((3, 4, 4)))
    out = attn(x, torch.zeros(1, 2, 4, 2, dtype=torch.float64))
    v = attn.qkv(x)[..., 4:]
    expect = attn.proj(v.mean(dim=1, keepdim=True)).expand_as(out)
    torch.testing.assert_close(out, expect, rtol=0, atol=1e-12)
    assert out.shape == (3, 4, 4)


def test_global_attention_shape():
    attn = WindowAttention(64, 2, 7, "global")
    assert attn(torch.randn(4, 49, 64), torch.randn(1, 2, 49, 32)).shape == (4, 49, 64)


def test_global_queries_repeat_per_image_not_across_batch():
    attn = _randomize(WindowAttention(4, 1, 2, "global").double(), 2)
    x = t64(np.random.default_rng(2).standard_normal((4, 4, 4)))  # 2 images x 2 windows
    qg = t64(np.random.default_rng(3).standard_normal((2, 1, 4, 4)))
    out = attn(x, qg)
    torch.testing.assert_close(out[:2], attn(x[:2], qg[:1]), rtol=0, atol=0)
    torch.testing.assert_close(out[2:], attn(x[2:], qg[1:]), rtol=0, atol=0)


def test_global_attention_rejects_bad_queries():
    attn = WindowAttention(4, 2, 2, "global")
    with pytest.raises(DimensionError):
        attn(torch.randn(3, 4, 4), torch.randn(2, 2, 4, 2))
    with pytest.raises(DimensionError):
        attn(torch.randn(2, 4, 4))


def test_local_global_equivalence_harness():
    """Global attention fed the window's own projected queries reproduces local attention."""
    local = _randomize(WindowAttention(4, 2, 2).double(), 31)
    glob = WindowAttention(4, 2, 2, "global").double()
    with torch.no_grad():
        glob.qkv.weight.copy_(local.qkv.weight[4:])
        glob.qkv.bias.copy_(local.qkv.bias[4:])
        glob.proj.load_state_dict(local.proj.state_dict())
        glob.rel_bias.table.copy_(local.rel_bias.table)
    x = t64(np.random.default_rng(31).standard_normal((1, 4, 4)))
    q = local.qkv(x)[..., :4].reshape(1, 4, 2, 2).permute(0, 2, 1, 3)
    torch.testing.assert_close(glob(x, q), local(x), rtol=0, atol=1e-15)


def test_attention_rows_sum_to_one():
    attn = _randomize(WindowAttention(8, 2, 3), 1)
    seen = []
    attn.attn_hook = seen.append
    attn(torch.randn(2, 9, 8))
    rows = seen[0].sum(-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


# global token generator ---------------------------------------------------------------


def test_token_generator_reduction_count():
    gtg = GlobalTokenGenerator(64, 2, 7, 56)
    assert len(gtg.steps) == 3
    assert gtg(torch.randn(1, 64, 56, 56)).shape == (1, 2, 49, 32)


def test_token_generator_no_steps_is_reshape():
    gtg = GlobalTokenGenerator(8, 2, 7, 7)
    assert len(gtg.steps) == 0
    x = torch.randn(1, 8, 7, 7)
    expect = x.permute(0, 2, 3, 1).reshape(1, 49, 2, 4).permute(0, 2, 1, 3)
    assert torch.equal(gtg(x), expect)


def test_token_generator_rejects_ratio_three():
    with pytest.raises(ConfigError):
        GlobalTokenGenerator(8, 2, 7, 21)


# GC-ViT block ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["local", "global"])
def test_block_identity_with_zeroed_projections(kind):
    blk = _randomize(GCViTBlock(64, 2, 7, kind), 3, std=0.1)
    _zero(blk.attn.proj.weight, blk.attn.proj.bias, blk.mlp.fc2.weight, blk.mlp.fc2.bias)
    x = torch.randn(1, 64, 56, 56)
    q = torch.randn(1, 2, 49, 32) if kind == "global" else None
    assert torch.equal(blk(x, q), x)


def test_block_shape_preserved():
    blk = GCViTBlock(64, 2, 7)
    assert blk(torch.randn(1, 64, 56, 56)).shape == (1, 64, 56, 56)


def test_stage_alternates_local_and_global():
    stage = GCViTStage(8, 4, 2, 2, 8)
    assert [b.attn.kind for b in stage.blocks] == ["local", "global", "local", "global"]


def test_stage_shares_tokens_across_global_blocks():
    stage = GCViTStage(8, 4, 2, 2, 8)
    seen = []
    for blk in stage.blocks:
        if blk.kind == "global":
            blk.attn.forward = _spy(blk.attn.forward, seen)
    stage(torch.randn(1, 8, 8, 8))
    assert len(seen) == 2 and seen[0] is seen[1]


def _spy(fn, seen):
    def wrapped(windows, q_global=None):
        seen.append(q_global)
        return fn(windows, q_global)
    return wrapped


@settings(max_examples=12, deadline=None)
@given(heads=st.sampled_from([1, 2]), hd=st.sampled_from([2, 4]), w=st.sampled_from([1, 2, 4]),
       k=st.integers(0, 2), kind=st.sampled_from(["local", "global"]), b=st.integers(1, 2))
def test_block_shape_property(heads, hd, w, k, kind, b):
    dim, side = heads * hd, w * 2 ** k
    stage_tokens = GlobalTokenGenerator(dim, heads, w, side)
    x = torch.randn(b, dim, side, side)
    blk = GCViTBlock(dim, heads, w, kind)
    assert blk(x, stage_tokens(x)).shape == x.shape


def test_block_scale_gradchecks():
    reports = run_scale("block")
    assert all(r.passed for r in reports.values()), [k for k, r in reports.items() if not r.passed]


def test_block_scale_catches_corrupted_sigmoid():
    reports = run_scale("block", seeds=(9,), corrupt=("sigmoid",))
    assert not reports["se_block"].passed
    assert reports["gcvit_block_local"].passed  # no sigmoid on that path
