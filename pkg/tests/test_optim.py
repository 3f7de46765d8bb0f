import math

import numpy as np
import pytest

from fedexit.optim import SgdConfig, lr_at, sgd_step
from fedexit.tensor import NumericError, Parameter


def test_cosine_schedule_endpoints_and_midpoint():
    cfg = SgdConfig(base_lr=5e-3, min_lr=1e-4, total_steps=100)
    assert lr_at(0, cfg) == pytest.approx(5e-3, rel=1e-12)
    assert lr_at(100, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(50, cfg) == pytest.approx((5e-3 + 1e-4) / 2, rel=1e-12)


def test_cosine_schedule_matches_closed_form():
    cfg = SgdConfig(base_lr=1.0, min_lr=0.0, total_steps=7)
    for s in range(8):
        want = 0.5 * (1 + math.cos(math.pi * s / 7))
        assert lr_at(s, cfg) == pytest.approx(want, rel=1e-12)


def test_cosine_schedule_monotone_nonincreasing():
    cfg = SgdConfig(base_lr=5e-3, min_lr=0.0, total_steps=300)
    vals = [lr_at(s, cfg) for s in range(301)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_clamps_past_end_with_warning():
    cfg = SgdConfig(base_lr=1.0, min_lr=0.1, total_steps=10)
    with pytest.warns(UserWarning):
        assert lr_at(11, cfg) == pytest.approx(0.1, rel=1e-12)


def test_sgd_step_updates_and_zeroes_grads():
    p = Parameter(np.array([1.0, 2.0]), "w")
    p.grad[:] = [0.5, -0.5]
    sgd_step({"w": p}, lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.05], rtol=1e-12)
    assert np.all(p.grad == 0.0)


def test_sgd_step_skips_frozen():
    p = Parameter(np.array([1.0]), "w", trainable=False)
    p.grad[:] = 100.0
    sgd_step({"w": p}, lr=0.1)
    np.testing.assert_allclose(p.data, [1.0])


def test_sgd_step_nan_grad_names_parameter():
    p = Parameter(np.array([1.0]), "blocks.3.fc1.w")
    p.grad[:] = np.nan
    with pytest.raises(NumericError, match="blocks.3.fc1.w"):
        sgd_step({"blocks.3.fc1.w": p}, lr=0.1)


def test_sgd_momentum_matches_manual_recurrence():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=5), "w")
    ref = p.data.copy()
    v_ref = np.zeros(5)
    velocity = None
    for step in range(4):
        g = rng.normal(size=5)
        p.grad[:] = g
        velocity = sgd_step({"w": p}, lr=0.2, momentum=0.9, velocity=velocity)
        v_ref = 0.9 * v_ref + g
        ref = ref - 0.2 * v_ref
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_sgd_weight_decay():
    p = Parameter(np.array([2.0]), "w")
    p.grad[:] = 0.0
    sgd_step({"w": p}, lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.1 * 2.0], rtol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(total_steps=0)
    with pytest.raises(ValueError):
        SgdConfig(base_lr=0.0, min_lr=1.0)
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
