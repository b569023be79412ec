import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ddflow import losses, torch_ops
from ddflow.volume import downsample_array, upsample_array, warp_array


def t64(a):
    return torch.as_tensor(a, dtype=torch.float64)[None]


@pytest.fixture
def pair(rng):
    dims = (8, 8, 4)
    return rng.standard_normal(dims), rng.standard_normal(dims), rng.uniform(-2, 2, (3,) + dims)


def test_warp_matches_numpy(pair):
    m, _, u = pair
    out = torch_ops.warp(t64(m)[None], t64(u))[0, 0].numpy()
    np.testing.assert_allclose(out, warp_array(m, u), atol=1e-12)


@pytest.mark.parametrize("factor", [1, 2, 4])
def test_pyramid_matches_numpy(pair, factor):
    u = pair[2]
    down = torch_ops.downsample(t64(u), factor)[0].numpy()
    np.testing.assert_allclose(down, downsample_array(u, factor), atol=1e-12)
    np.testing.assert_allclose(torch_ops.upsample(t64(down), factor)[0].numpy(), upsample_array(down, factor),
                               atol=1e-12)


@given(st.sampled_from([3, 5, 9]))
def test_box_sum_matches_numpy(window):
    a = np.random.default_rng(window).standard_normal((7, 5, 6))
    np.testing.assert_allclose(torch_ops.box_sum(t64(a)[None], window)[0, 0].numpy(), losses.box_sum(a, window),
                               atol=1e-10)


@pytest.mark.parametrize("squared", [True, False])
def test_reg_loss_matches_numpy(pair, squared):
    m, f, u = pair
    cfg = losses.LossConfig(ncc_window=5, squared=squared)
    got = torch_ops.reg_loss(t64(m)[None], t64(f)[None], t64(u), cfg).item()
    assert got == pytest.approx(losses.reg_loss_array(m, f, u, cfg), abs=1e-10)
    assert torch_ops.grad_penalty(t64(u)).item() == pytest.approx(losses.grad_array(u), abs=1e-12)


def test_autograd_matches_analytic_gradient(pair):
    m, f, u = pair
    # offset away from integer sample positions, where both are piecewise smooth
    u = np.round(u) + 0.37
    tu = t64(u).requires_grad_(True)
    torch_ops.reg_loss(t64(m)[None], t64(f)[None], tu).backward()
    np.testing.assert_allclose(tu.grad[0].numpy(), losses.reg_loss_grad_array(m, f, u), atol=1e-9)


def test_batch_mean(pair):
    m, f, u = pair
    mm = torch.stack([t64(m), t64(f)])
    ff = torch.stack([t64(f), t64(m)])
    uu = torch.cat([t64(u), t64(-u)])
    both = torch_ops.reg_loss(mm, ff, uu).item()
    single = [losses.reg_loss_array(m, f, u), losses.reg_loss_array(f, m, -u)]
    assert both == pytest.approx(np.mean(single), abs=1e-10)
