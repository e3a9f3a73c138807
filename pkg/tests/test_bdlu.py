import numpy as np
import pytest
import torch

from camodiff.bdlu import (BDLU, LEVELS, LatentFusion, build_correlation_pyramid, lookup,
                           lookup_channels)

import oracles


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_lookup_channel_law(r):
    x = torch.randn(2, 5, 8, 8, dtype=torch.float64)
    xl = lookup(build_correlation_pyramid(x), r)
    assert xl.shape == (2, 4 * (2 * r + 1) ** 2, 8, 8)
    assert lookup_channels(r) == 4 * (2 * r + 1) ** 2


def test_pyramid_matches_brute_force(rng):
    for _ in range(5):
        x = rng.standard_normal((16, 8, 8))
        pyr = build_correlation_pyramid(torch.from_numpy(x)[None])
        ref = oracles.correlation_pyramid(x)
        for got, want in zip(pyr, ref):
            np.testing.assert_allclose(got[0].numpy(), want, atol=1e-9, rtol=0)
        v1 = pyr[0][0].numpy()
        np.testing.assert_allclose(v1, v1.transpose(2, 3, 0, 1), atol=1e-9, rtol=0)


def test_pyramid_indivisible_sizes(rng):
    x = rng.standard_normal((3, 4, 6))
    pyr = build_correlation_pyramid(torch.from_numpy(x)[None])
    assert [tuple(v.shape[-2:]) for v in pyr] == [(4, 6), (2, 3), (1, 2), (1, 1)]
    for got, want in zip(pyr, oracles.correlation_pyramid(x)):
        np.testing.assert_allclose(got[0].numpy(), want, atol=1e-9, rtol=0)


@pytest.mark.parametrize("r", [1, 2])
def test_lookup_matches_brute_force(rng, r):
    x = rng.standard_normal((4, 8, 8))
    pyr_t = build_correlation_pyramid(torch.from_numpy(x)[None])
    got = lookup(pyr_t, r)[0].numpy()
    want = oracles.lookup([v[0].numpy() for v in pyr_t], r)
    np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)


def test_lookup_zero_radius_errors():
    pyr = build_correlation_pyramid(torch.randn(1, 2, 8, 8))
    with pytest.raises(ValueError):
        lookup(pyr, 0)


def test_bdlu_shapes_and_boundary_range():
    torch.manual_seed(0)
    m = BDLU(d0=8, de=4, latent_channels=16, r=2)
    ctx = m.context(torch.randn(2, 8, 8, 8), noise_size=64)
    assert ctx.x_edge.shape == (2, 4, 64, 64)
    assert ctx.xe.shape == (2, 1, 64, 64)
    xe = ctx.xe.detach()
    assert float(xe.min()) > 0 and float(xe.max()) < 1
    assert ctx.x1.shape == (2, 4, 8, 8)
    assert ctx.xl.shape == (2, 100, 8, 8)
    out = m(torch.randn(2, 16, 8, 8), ctx)
    assert out.shape == (2, 16, 8, 8)


def test_boundary_select_gates_features():
    torch.manual_seed(0)
    m = BDLU(d0=8, de=4, latent_channels=16, r=1).eval()
    x_edge = torch.randn(1, 4, 64, 64)
    zero = m.boundary_select(x_edge, torch.zeros(1, 1, 64, 64))
    # a zero gate sends zero through bias-free conv blocks
    assert torch.count_nonzero(zero) == 0
    with pytest.raises(ValueError):
        m.boundary_select(x_edge, torch.zeros(1, 1, 32, 32))


def test_toggles():
    torch.manual_seed(0)
    x0 = torch.randn(1, 8, 8, 8)
    no_lookup = BDLU(8, 4, 16, r=2, use_lookup=False)
    assert no_lookup.context(x0, 64).xl.shape == (1, 100, 8, 8)
    no_select = BDLU(8, 4, 16, r=2, boundary_selection=False)
    ctx = no_select.context(x0, 64)
    torch.testing.assert_close(ctx.x1, no_select.downsample(ctx.x_edge))


def test_fusion_rejects_mismatch():
    fusion = LatentFusion(16, 36)
    with pytest.raises(ValueError):
        fusion(torch.randn(1, 16, 8, 8), torch.randn(1, 36, 4, 4))
