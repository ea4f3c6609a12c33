import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unimlvg.conditioning import Conditions
from unimlvg.errors import DimensionError, ValidationError
from unimlvg.model import (
    GROUPS,
    CrossViewBlock,
    ModelConfig,
    TemporalBlock,
    UniMLVG,
    count_parameters,
    gated_fuse,
    load_checkpoint,
    patchify,
    precondition,
    save_checkpoint,
    unpatchify,
)
from unimlvg.numerics import grad_check


def random_conds(B, T, V, H, W, L, g):
    return Conditions(
        boxes=torch.rand(B, T, V, H, W, 3, generator=g),
        hdmap=torch.rand(B, T, V, H, W, 3, generator=g),
        tokens=torch.randint(1, 10, (B, T, V, L), generator=g),
        ray_origins=torch.randn(B, T, V, H, W, 3, generator=g),
        ray_dirs=torch.nn.functional.normalize(torch.randn(B, T, V, H, W, 3, generator=g), dim=-1),
    )


def perturb(model, scale=0.05, seed=0):
    # leave the zero-initialised state so outputs depend on the inputs
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)
    return model


@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([4, 8, 12]), st.sampled_from([4, 8, 16]))
@settings(max_examples=10, deadline=None)
def test_shape_contract(T, V, H, W):
    cfg = ModelConfig(height=H, width=W, patch=4, hidden=8, depth=1, heads=2, text_width=4, text_len=3,
                      adapter_hidden=4, ray_hidden=4, ray_freqs=1, adapter_levels=1, injection_sites=(0,))
    model = UniMLVG(cfg)
    g = torch.Generator().manual_seed(T * 100 + V)
    z = torch.randn(2, T, V, H, W, 3, generator=g)
    out = model(z, torch.rand(2, T, V, generator=g), random_conds(2, T, V, H, W, 3, g))
    assert out.shape == z.shape


def test_zero_init_velocity(micro_model):
    z = torch.randn(1, 2, 2, 8, 8, 3)
    assert torch.all(micro_model(z, torch.rand(1, 2, 2)) == 0)


def test_gate_blend_at_init(micro_model):
    for blk in micro_model.blocks:
        for sub in (blk.temporal, blk.crossview):
            assert abs(torch.sigmoid(sub.alpha).item() - 0.8808) < 1e-4
    a, b = torch.ones(2), torch.zeros(2)
    assert torch.allclose(gated_fuse(a, b, torch.tensor(2.0)), torch.full((2,), 1 / (1 + math.exp(-2))))


def test_image_generation_is_frame_equivariant(micro_model):
    perturb(micro_model)
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 4, 2, 8, 8, 3, generator=g)
    t = torch.rand(1, 4, 2, generator=g)
    conds = random_conds(1, 4, 2, 8, 8, 8, g)
    perm = torch.tensor([2, 0, 3, 1])
    out = micro_model(z, t, conds, drop_temporal=True)
    out_p = micro_model(z[:, perm], t[:, perm], conds.map(lambda x: x[:, perm]), drop_temporal=True)
    assert (out_p - out[:, perm]).abs().max() < 1e-5
    # with the temporal axis active the same permutation is not an equivariance
    full = micro_model(z, t, conds)
    full_p = micro_model(z[:, perm], t[:, perm], conds.map(lambda x: x[:, perm]))
    assert (full_p - full[:, perm]).abs().max() > 1e-4


def test_view_mask_locality():
    torch.manual_seed(0)
    blk = CrossViewBlock(8, 2, 8)
    z = torch.randn(2, 2, 4, 2, 3, 8)
    mask = torch.tensor([[True, True, False, True], [True, False, False, False]])
    out = blk(z, mask)
    assert torch.equal(out[~mask[:, None].expand(2, 2, 4)], z[~mask[:, None].expand(2, 2, 4)])
    z2 = z.clone()
    z2[0, :, 2] += torch.randn(2, 2, 3, 8)  # a masked view must not influence the others
    z2[1, :, 1:] = 0
    out2 = blk(z2, mask)
    assert (out2[mask[:, None].expand(2, 2, 4)] - out[mask[:, None].expand(2, 2, 4)]).abs().max() < 1e-6
    with pytest.raises(ValidationError):
        blk(z, torch.tensor([[False] * 4, [True] * 4]))


def test_temporal_block_mixes_only_frames():
    torch.manual_seed(0)
    blk = TemporalBlock(8, 2, 16)
    z = torch.randn(1, 3, 2, 2, 2, 8)
    out = blk(z)
    z2 = z.clone()
    z2[:, :, 1] += 1.0
    assert torch.equal(blk(z2)[:, :, 0], out[:, :, 0])
    with pytest.raises(DimensionError):
        blk(torch.randn(1, 17, 1, 1, 1, 8))


def test_micro_block_gradient(micro_cfg):
    torch.manual_seed(1)
    model = perturb(UniMLVG(micro_cfg), 0.1).double()
    g = torch.Generator().manual_seed(2)
    t = torch.rand(1, 2, 2, generator=g, dtype=torch.float64)
    conds = random_conds(1, 2, 2, 8, 8, 8, g).map(lambda x: x.double() if x.is_floating_point() else x)
    z = torch.randn(1, 2, 2, 8, 8, 3, generator=g)
    assert grad_check(lambda x: model(x, t, conds).pow(2).sum(), z[..., :1].expand(-1, -1, -1, -1, -1, 3).contiguous()) < 1e-3


@given(st.integers(1, 3), st.sampled_from([1, 2, 4]))
@settings(max_examples=15, deadline=None)
def test_patchify_roundtrip(k, p):
    x = torch.randn(2, 4 * k, 8, 3)
    tok = patchify(x, p)
    assert tok.shape == (2, 4 * k // p, 8 // p, p * p * 3)
    assert torch.equal(unpatchify(tok, p), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(DimensionError):
        patchify(torch.zeros(6, 8, 3), 4)


def test_config_validation():
    with pytest.raises(DimensionError):
        ModelConfig(height=10).validate()
    with pytest.raises(ValidationError):
        ModelConfig(injection_sites=(0, 1, 2, 9)).validate()
    with pytest.raises(ValidationError):
        ModelConfig(prediction="eps").validate()


def test_param_groups_cover_everything(micro_model):
    groups = micro_model.grouped_parameters()
    assert set(groups) == set(GROUPS)
    assert sum(p.numel() for ps in groups.values() for _, p in ps) == count_parameters(micro_model)
    assert all(n.endswith("alpha") for n, _ in groups["gates_temporal"] + groups["gates_crossview"])
    assert len(groups["gates_temporal"]) == micro_model.cfg.depth


def test_checkpoint_roundtrip(tmp_path, micro_model):
    perturb(micro_model)
    path = tmp_path / "m.bin"
    save_checkpoint(path, micro_model, {"stage": 2}, config_hash="abc")
    model, meta = load_checkpoint(path, expect_hash="abc")
    assert meta["stage"] == 2
    z, t = torch.randn(1, 1, 1, 8, 8, 3), torch.rand(1, 1, 1)
    assert torch.equal(model(z, t), micro_model(z, t))
    with pytest.raises(ValidationError):
        load_checkpoint(path, expect_hash="other")


def test_data_prediction_head(micro_cfg):
    from dataclasses import replace

    model = UniMLVG(replace(micro_cfg, prediction="data"))
    z = torch.randn(1, 1, 2, 8, 8, 3)
    t = torch.tensor([[[0.5, 0.01]]])
    v = model(z, t)  # zero-initialised head predicts x0 = 0
    assert torch.allclose(v[0, 0, 0], -z[0, 0, 0] / 0.5)
    assert torch.allclose(v[0, 0, 1], -z[0, 0, 1] / micro_cfg.t_floor)


def test_preconditioned_head_matches_linear_optimum(micro_cfg):
    from dataclasses import replace

    model = UniMLVG(replace(micro_cfg, prediction="preconditioned", sigma_data=0.5))
    g = torch.Generator().manual_seed(0)
    n = 200_000
    for tv in (0.0, 0.02, 0.3, 0.7, 1.0):
        z0, eps = torch.randn(n, generator=g, dtype=torch.float64) * 0.5, torch.randn(n, generator=g, dtype=torch.float64)
        zt = (1 - tv) * z0 + tv * eps
        c_skip, c_out = precondition(torch.tensor(tv, dtype=torch.float64), 0.5)
        # least-squares slope of v on z_t, and unit variance of the residual target
        v = z0 - eps
        assert abs(c_skip.item() - (v * zt).mean().item() / (zt * zt).mean().item()) < 0.02
        assert abs(((v - c_skip * zt) / c_out).var().item() - 1.0) < 0.02
    z = torch.randn(1, 1, 2, 8, 8, 3)
    t = torch.tensor([[[1.0, 0.0]]])
    v = model(z, t)  # zero-initialised residual leaves the linear estimate
    assert torch.allclose(v[0, 0, 0], -z[0, 0, 0]) and torch.allclose(v[0, 0, 1], z[0, 0, 1])
