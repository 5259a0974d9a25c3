import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rick import rng as rngmod
from rick.adversarial import (d_loss, g_loss, sample_real, train_step_d, train_step_g, warmup_d)
from rick.models import build_gan
from rick.optim import Adam
from rick.tensor import Tensor


def test_d_loss_examples():
    assert d_loss(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert d_loss(Tensor([1 - 1e-7]), Tensor([1e-7])).item() == pytest.approx(2e-7, rel=1e-6)
    assert d_loss(Tensor([0.8]), Tensor([0.3])).item() == pytest.approx(-math.log(0.8) - math.log(0.7), abs=1e-12)
    assert d_loss(Tensor([1.0]), Tensor([0.0])).item() == pytest.approx(2e-7, rel=1e-6)


def test_g_loss_examples():
    assert g_loss(Tensor([1 - 1e-7])).item() == pytest.approx(0.0, abs=1e-6)
    assert g_loss(Tensor([0.5])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert g_loss(Tensor([0.25, 0.75])).item() == pytest.approx((math.log(4) + math.log(4 / 3)) / 2, abs=1e-12)
    assert g_loss(Tensor([0.5]), saturating=True).item() == pytest.approx(-math.log(2), abs=1e-12)


prob = st.floats(1e-6, 1 - 1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(prob, min_size=1, max_size=5), st.lists(prob, min_size=1, max_size=5))
def test_d_loss_swap_symmetry(real, fake):
    n = min(len(real), len(fake))
    r, f = np.array(real[:n]), np.array(fake[:n])
    a = d_loss(Tensor(r), Tensor(f)).item()
    b = d_loss(Tensor(1 - f), Tensor(1 - r)).item()
    assert a == pytest.approx(b, rel=1e-9)  # 1-(1-r) rounds for tiny r


@settings(max_examples=100, deadline=None)
@given(st.lists(prob, min_size=1, max_size=5), st.integers(0, 4), st.floats(1e-4, 0.5))
def test_g_loss_monotone(fake, idx, bump):
    f = np.array(fake)
    i = idx % len(f)
    g = f.copy()
    g[i] = min(1 - 1e-6, f[i] + bump)
    if g[i] > f[i]:
        assert g_loss(Tensor(g)).item() < g_loss(Tensor(f)).item()


def test_sample_real_replacement_rule(rng):
    data = np.arange(10.0)[:, None]
    b = sample_real(data, 4, rng)
    assert len(np.unique(b)) == 4
    b = sample_real(data[:3], 8, rng)
    assert b.shape == (8, 1)
    with pytest.raises(ValueError):
        sample_real(data[:0], 2, rng)


def _batch(rng, gan, n=4):
    return rng.normal(size=(n, 2)) + 3.0, rng.normal(size=(n, gan.g.dz))


def test_train_step_d_changes_only_d(point_gan, rng):
    g0, d0 = point_gan.g.flat().copy(), point_gan.d.flat().copy()
    real, z = _batch(rng, point_gan)
    loss = train_step_d(point_gan, real, z, Adam(point_gan.d.params()), 0, 10)
    assert np.isfinite(loss)
    assert np.array_equal(point_gan.g.flat(), g0)
    assert not np.array_equal(point_gan.d.flat(), d0)


def test_train_step_g_changes_only_g(point_gan, rng):
    g0, d0 = point_gan.g.flat().copy(), point_gan.d.flat().copy()
    _, z = _batch(rng, point_gan)
    train_step_g(point_gan, z, Adam(point_gan.g.params()), 0, 10)
    assert np.array_equal(point_gan.d.flat(), d0)
    assert not np.array_equal(point_gan.g.flat(), g0)
    assert all(p.grad is None for p in point_gan.d.params())


@pytest.mark.parametrize("net", ["G", "D"])
def test_all_preserve_mask_freezes(point_gan, rng, net):
    real, z = _batch(rng, point_gan)
    target = point_gan.net(net)
    masks = [np.zeros(p.shape[0], dtype=bool) for p in target.params()]
    before = target.flat().copy()
    opt = Adam(target.params())
    if net == "D":
        train_step_d(point_gan, real, z, opt, 0, 10, masks)
    else:
        train_step_g(point_gan, z, opt, 0, 10, masks)
    assert np.array_equal(target.flat(), before)


def test_warmup_touches_only_d(point_gan, rng):
    g0, d0 = point_gan.g.flat().copy(), point_gan.d.flat().copy()
    data = rng.normal(size=(10, 2))
    assert warmup_d(point_gan, data, 0, Adam(point_gan.d.params()), rng, 100) == []
    assert np.array_equal(point_gan.d.flat(), d0)
    losses = warmup_d(point_gan, data, 5, Adam(point_gan.d.params()), rng, 100)
    assert len(losses) == 5
    assert np.array_equal(point_gan.g.flat(), g0)
    with pytest.raises(ValueError):
        warmup_d(point_gan, data, -1, Adam(point_gan.d.params()), rng, 100)


def test_warmup_loss_decreases_across_seeds():
    drops = []
    for seed in range(5):
        gan = build_gan("point-mlp", rngmod.stream(seed, "init"))
        rng = rngmod.stream(seed, "train")
        data = rng.normal(size=(10, 2)) * 0.15 + np.array([4.0, 0.0])
        losses = warmup_d(gan, data, 100, Adam(gan.d.params()), rng, 100)
        drops.append(np.mean(losses[-10:]) < np.mean(losses[:10]))
    assert sum(drops) >= 3
