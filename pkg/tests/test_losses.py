import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfgan.errors import ShapeError
from sfgan.losses import (
    EPS,
    critic_loss,
    epe,
    generator_adv_loss,
    joint_loss,
    joint_terms,
    l1_disparity,
    total_generator_loss,
)
from sfgan.types import DisparityPair, FlowField, Image2D, SceneFlowField


def loop_epe(p, g):
    total, n = 0.0, 0
    for b in range(p.shape[0]):
        for y in range(p.shape[2]):
            for x in range(p.shape[3]):
                total += math.sqrt((p[b, 0, y, x] - g[b, 0, y, x]) ** 2 + (p[b, 1, y, x] - g[b, 1, y, x]) ** 2)
                n += 1
    return total / n


def loop_l1(p, g):
    return sum(abs(a - b) for a, b in zip(p.ravel().tolist(), g.ravel().tolist())) / p.size


def test_epe_and_l1_match_loops(rng):
    p, g = rng.normal(size=(2, 4, 5, 6)), rng.normal(size=(2, 4, 5, 6))
    terms = joint_terms(torch.from_numpy(p), torch.from_numpy(g))
    assert terms["epe"].item() == pytest.approx(loop_epe(p[:, :2], g[:, :2]), abs=1e-12)
    assert terms["l1_dt"].item() == pytest.approx(loop_l1(p[:, 2], g[:, 2]), abs=1e-12)
    assert terms["l1_dt1"].item() == pytest.approx(loop_l1(p[:, 3], g[:, 3]), abs=1e-12)


def test_epe_three_four_five():
    pred = torch.tensor([[[3.0]], [[4.0]]], dtype=torch.float64)
    assert epe(pred, torch.zeros_like(pred)).item() == 5.0


def test_joint_hand_arithmetic():
    pred = torch.zeros(4, 1, 1, dtype=torch.float64)
    gt = torch.tensor([3.0, 4.0, 2.0, -3.0], dtype=torch.float64).view(4, 1, 1)
    b = joint_loss(pred, gt)
    assert (b.epe, b.l1_dt, b.l1_dt1, b.joint) == (5.0, 2.0, 3.0, 10.0)


def test_sum_reduction():
    pred = torch.zeros(2, 2, 3)
    gt = torch.ones(2, 2, 3)
    assert l1_disparity(pred, gt, "sum").item() == 12.0
    with pytest.raises(ValueError):
        l1_disparity(pred, gt, "max")


def test_domain_objects_accepted():
    flow = FlowField(np.ones((2, 2), np.float32), np.zeros((2, 2), np.float32))
    assert epe(flow, FlowField.from_array(np.zeros((2, 2, 2), np.float32))).item() == 1.0
    a = Image2D(np.full((2, 2), 2.0, np.float32))
    assert l1_disparity(a, Image2D(np.zeros((2, 2), np.float32))).item() == 2.0
    sf = SceneFlowField(flow, DisparityPair(a, a))
    assert joint_loss(sf, sf).joint == 0.0


def test_shape_errors():
    with pytest.raises(ShapeError):
        epe(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))
    with pytest.raises(ShapeError):
        epe(torch.zeros(3, 3, 3), torch.zeros(3, 3, 3))
    with pytest.raises(ShapeError):
        joint_loss(torch.zeros(3, 2, 2), torch.zeros(3, 2, 2))


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)
fields = arrays(np.float64, (4, 3, 3), elements=finite)


@settings(max_examples=50, deadline=None)
@given(fields, fields, st.floats(0.01, 100))
def test_joint_invariants(p, g, c):
    p, g = torch.from_numpy(p), torch.from_numpy(g)
    j = joint_loss(p, g).joint
    assert j >= 0
    assert joint_loss(p, p).joint == 0.0
    assert joint_loss(g, p).joint == pytest.approx(j, rel=1e-12, abs=1e-9)
    assert joint_loss(c * p, c * g).joint == pytest.approx(c * j, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 5, elements=finite), st.floats(-1e3, 1e3))
def test_wasserstein_shift_invariance(r, f, k):
    r, f = torch.from_numpy(r), torch.from_numpy(f)
    assert critic_loss(r + k, f + k).item() == pytest.approx(critic_loss(r, f).item(), abs=1e-9)


def test_wasserstein_values():
    r, f = torch.tensor([1.0, 3.0]), torch.tensor([0.5])
    assert critic_loss(r, f).item() == -1.5
    assert generator_adv_loss(f).item() == -0.5


def test_vanilla_closed_forms():
    half = torch.tensor([0.5])
    assert critic_loss(half, half, "vanilla").item() == pytest.approx(2 * math.log(2), rel=1e-6)
    assert generator_adv_loss(half, "vanilla").item() == pytest.approx(math.log(2), rel=1e-6)
    # saturated probabilities stay finite through the epsilon clamp
    ones, zeros = torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)
    assert critic_loss(zeros, ones, "vanilla").item() == pytest.approx(-2 * math.log(EPS), rel=1e-9)
    assert generator_adv_loss(zeros, "vanilla").item() == pytest.approx(-math.log(EPS), rel=1e-9)
    assert critic_loss(ones, zeros, "vanilla").item() == pytest.approx(-2 * math.log(1 - EPS), rel=1e-6)


def test_vanilla_rejects_non_probabilities():
    with pytest.raises(ValueError):
        critic_loss(torch.tensor([1.5]), torch.tensor([0.5]), "vanilla")
    with pytest.raises(ValueError):
        generator_adv_loss(torch.tensor([]), "wasserstein")
    with pytest.raises(ValueError):
        critic_loss(torch.tensor([0.5]), torch.tensor([0.5]), "hinge")


def test_total_generator_loss():
    assert total_generator_loss(2.0, -0.5, 0.0) == 2.0
    assert total_generator_loss(2.0, -0.5, 2.0) == 1.0


def test_gradient_matches_finite_differences(rng):
    p = torch.from_numpy(rng.normal(size=(4, 3, 3))).requires_grad_(True)
    g = torch.from_numpy(rng.normal(size=(4, 3, 3)))
    joint_terms(p, g)["joint"].backward()
    h = 1e-6
    flat = p.detach().clone().view(-1)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fd = (joint_terms(up.view(4, 3, 3), g)["joint"] - joint_terms(dn.view(4, 3, 3), g)["joint"]).item() / (2 * h)
        an = p.grad.view(-1)[i].item()
        assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd))


def test_zero_error_gradient_is_zero_not_nan():
    g = torch.randn(4, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    p = g.clone().requires_grad_(True)
    joint_terms(p, g)["joint"].backward()
    assert torch.isfinite(p.grad).all()
    assert torch.all(p.grad[:2] == 0)


def test_breakdown_json():
    b = joint_loss(torch.zeros(4, 1, 1), torch.ones(4, 1, 1))
    b.step = 3
    assert '"step": 3' in b.to_json() and "critic" not in b.to_json()
    assert b.is_finite()
