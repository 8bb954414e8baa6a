import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundcl import tensor as T
from groundcl.losses import (
    LossConfig,
    contrastive_loss,
    detection_loss,
    image_triplet_loss,
    instance_triplet_loss,
    total_loss,
    triplet_loss,
)


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def naive_contrastive(z, zp, zn, tau):
    pos = sum(math.exp(float(np.dot(z, p)) / tau) for p in zp)
    neg = sum(math.exp(float(np.dot(z, n)) / tau) for n in zn)
    return -math.log(pos / (pos + neg))


def test_contrastive_matches_naive_on_1000_sets():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 9))
        P, N = int(rng.integers(1, 6)), int(rng.integers(1, 17))
        z, zp, zn = unit(rng.normal(size=d)), unit(rng.normal(size=(P, d))), unit(rng.normal(size=(N, d)))
        got = float(contrastive_loss(T.constant(z), T.constant(zp), T.constant(zn), 0.1).data)
        worst = max(worst, abs(got - naive_contrastive(z, zp, zn, 0.1)))
    assert worst < 1e-10


@pytest.mark.parametrize("p,n", [(2, 6), (1, 1), (4, 16)])
def test_contrastive_symmetric_closed_form(p, n):
    u = unit(np.ones(3))
    got = float(contrastive_loss(T.constant(u), T.constant(np.tile(u, (p, 1))),
                                 T.constant(np.tile(u, (n, 1))), 0.1).data)
    assert got == pytest.approx(-math.log(p / (p + n)), abs=1e-12)


def test_contrastive_p2_n6_value():
    u = unit(np.array([1.0, -2.0]))
    got = float(contrastive_loss(T.constant(u), T.constant(np.tile(u, (2, 1))),
                                 T.constant(np.tile(u, (6, 1))), 0.1).data)
    assert abs(got - 1.386294) < 1e-6 and abs(got - math.log(4)) < 1e-9


def test_contrastive_batched_matches_rows():
    rng = np.random.default_rng(1)
    z, zp, zn = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(3, 2, 4))), unit(rng.normal(size=(3, 5, 4)))
    batched = contrastive_loss(T.constant(z), T.constant(zp), T.constant(zn)).data
    for i in range(3):
        assert batched[i] == pytest.approx(naive_contrastive(z[i], zp[i], zn[i], 0.1), abs=1e-10)


def test_contrastive_requires_positive_and_negative():
    u = unit(np.ones(2))
    with pytest.raises(ValueError):
        contrastive_loss(T.constant(u), T.constant(np.zeros((0, 2))), T.constant(u[None]))


def test_contrastive_extreme_logits_finite():
    u = unit(np.array([1.0, 0.0]))
    got = contrastive_loss(T.constant(u), T.constant(u[None]), T.constant(-u[None]), tau=1e-3)
    assert np.isfinite(got.data)


def test_triplet_hand_formulas_on_1000_inputs():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        shape = (int(rng.integers(1, 6)),)
        a, p, n = rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape)
        alpha = float(rng.uniform(0, 2))
        want = max(math.dist(a, p) - math.dist(a, n) + alpha, 0.0)
        got = float(instance_triplet_loss(T.constant(a), T.constant(p), T.constant(n), alpha).data)
        assert got == pytest.approx(want, abs=1e-12)
        R = rng.uniform(size=(3, 4, 1))
        Rp, Rn = rng.uniform(size=(3, 4, 1)), rng.uniform(size=(3, 4, 1))
        want = max(np.linalg.norm(R - Rp) - np.linalg.norm(R - Rn) + alpha, 0.0)
        got = float(image_triplet_loss(T.constant(R), T.constant(Rp), T.constant(Rn), alpha).data)
        assert got == pytest.approx(want, abs=1e-12)


def test_triplet_zero_when_positive_is_anchor_and_negative_far():
    a = np.zeros(3)
    assert float(triplet_loss(T.constant(a), T.constant(a), T.constant(np.full(3, 5.0)), 1.0).data) == 0.0


def test_triplet_shape_mismatch():
    with pytest.raises(T.ShapeError):
        image_triplet_loss(T.constant(np.ones((2, 2))), T.constant(np.ones((2, 3))),
                           T.constant(np.ones((2, 2))))


def test_detection_loss_matches_log_softmax():
    rng = np.random.default_rng(3)
    s = rng.normal(size=(4, 7))
    t = np.array([0, 3, 6, 2])
    got = detection_loss(T.constant(s), t).data
    ref = -np.log(np.exp(s)[np.arange(4), t] / np.exp(s).sum(1))
    assert np.allclose(got, ref, atol=1e-12)
    with pytest.raises(IndexError):
        detection_loss(T.constant(s), np.array([0, 0, 0, 7]))


def test_total_loss_and_config_validation():
    parts = {"det": T.constant(np.array(1.0)), "img": T.constant(np.array(2.0)),
             "ins_cl": T.constant(np.array(4.0))}
    assert float(total_loss(parts, LossConfig()).data) == 7.0
    assert float(total_loss(parts, LossConfig(enabled=("det",))).data) == 1.0
    w = LossConfig(weights={"det": 1.0, "img": 0.5, "ins_tri": 1.0, "ins_cl": 1.0})
    assert float(total_loss(parts, w).data) == 6.0
    with pytest.raises(ValueError):
        LossConfig(enabled=("det", "ins_tri", "ins_cl")).validate()
    with pytest.raises(ValueError):
        LossConfig(tau=0.0).validate()
    with pytest.raises(ValueError):
        total_loss({}, LossConfig())


def test_loss_gradients():
    rng = np.random.default_rng(4)
    zp, zn = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(5, 4)))
    t = np.array([2])
    checks = [
        (lambda x: contrastive_loss(x, T.constant(zp), T.constant(zn), 0.5), rng.normal(size=4) * 0.3),
        (lambda x: T.sum(detection_loss(x, t)), rng.normal(size=(1, 6))),
        (lambda x: triplet_loss(x, T.constant(np.ones(4)), T.constant(np.zeros(4)), 2.0),
         rng.normal(size=4)),
    ]
    for f, x0 in checks:
        assert T.grad_check(f, T.tensor(x0)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.floats(0.05, 2.0))
def test_contrastive_nonnegative(P, N, tau):
    rng = np.random.default_rng(P * 100 + N)
    z, zp, zn = unit(rng.normal(size=4)), unit(rng.normal(size=(P, 4))), unit(rng.normal(size=(N, 4)))
    assert float(contrastive_loss(T.constant(z), T.constant(zp), T.constant(zn), tau).data) >= 0.0
