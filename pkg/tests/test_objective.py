import warnings

import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch.autodiff import Tensor
from augsearch.objective import (Adam, CriticNet, LinearCritic, adam_step, critic_scores, cross_entropy,
                                 gradient_penalty, policy_loss, wgan_gp_critic_loss)


@pytest.fixture
def batch():
    return np.random.default_rng(0).random((4, 3, 16, 16)).astype(np.float32)


def test_zero_net_outputs_zero(batch):
    net = CriticNet(3, 5, rng=np.random.default_rng(1))
    for t in net.parameters():
        t.data[...] = 0
    scores, logits = critic_scores(net, Tensor(batch))
    assert scores.shape == (4,) and logits.shape == (4, 5)
    assert not scores.data.any() and not logits.data.any()


def test_uniform_logits_cross_entropy():
    assert cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(np.log(10), abs=1e-6)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_input_gradient_matches_autodiff(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(2))
    x = Tensor(batch, requires_grad=True)
    net.critic(x).sum().backward()
    np.testing.assert_allclose(net.input_gradient(Tensor(batch)).data, x.grad, rtol=1e-4, atol=1e-6)


def test_linear_unit_critic_has_zero_penalty(batch):
    d = np.full(batch.shape[1:], 1 / np.sqrt(batch[0].size), dtype=np.float32)
    assert gradient_penalty(LinearCritic(d), batch, batch[::-1], np.random.default_rng(0)).item() < 1e-6


def test_identical_batches_have_zero_distance(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(3))
    _, w, _ = wgan_gp_critic_loss(net, Tensor(batch), Tensor(batch), rng=np.random.default_rng(0))
    assert abs(w.item()) < 1e-6


def test_critic_loss_antisymmetric_without_penalty(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(4))
    other = batch[::-1] * 0.5
    a, _, _ = wgan_gp_critic_loss(net, Tensor(batch), Tensor(other), gp_coef=0.0, rng=np.random.default_rng(0))
    b, _, _ = wgan_gp_critic_loss(net, Tensor(other), Tensor(batch), gp_coef=0.0, rng=np.random.default_rng(0))
    assert a.item() == pytest.approx(-b.item(), abs=1e-6)


def test_fake_batch_is_detached(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(5))
    fake = Tensor(batch, requires_grad=True)
    loss, _, _ = wgan_gp_critic_loss(net, Tensor(batch[::-1]), fake, rng=np.random.default_rng(0))
    loss.backward()
    assert fake.grad is None


def test_policy_loss_without_classification_is_negated_critic_mean(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(6))
    _, logits_real = net.scores(Tensor(batch))
    loss, _ = policy_loss(net, Tensor(batch), [0, 1, 0, 1], [1, 1, 0, 0], logits_real, eps=0.0)
    assert loss.item() == pytest.approx(-net.critic(Tensor(batch)).mean().item(), abs=1e-6)


def test_real_batch_term_has_no_policy_gradient(batch):
    net = CriticNet(3, 2, rng=np.random.default_rng(7))
    fake = Tensor(batch, requires_grad=True)
    _, logits_real = net.scores(Tensor(batch[::-1]))
    a, _ = policy_loss(net, fake, [0, 1, 0, 1], [0, 0, 0, 0], ad.stop_grad(logits_real), eps=0.1)
    a.backward()
    g_a = fake.grad.copy()
    fake.grad = None
    b, _ = policy_loss(net, fake, [0, 1, 0, 1], [1, 1, 1, 1], ad.stop_grad(logits_real), eps=0.1)
    b.backward()
    np.testing.assert_array_equal(g_a, fake.grad)


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3])
    new, _ = adam_step([np.zeros(3)], [g], lr=1e-3, betas=(0.0, 0.999))
    np.testing.assert_allclose(new[0], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_step_is_scale_invariant():
    g = np.random.default_rng(8).normal(size=5)
    a, _ = adam_step([np.zeros(5)], [g], eps_adam=1e-12)
    b, _ = adam_step([np.zeros(5)], [10 * g], eps_adam=1e-12)
    np.testing.assert_allclose(a[0], b[0], atol=1e-5 * 1e-3)


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([p])
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_skips_non_finite_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p])
    p.grad = np.array([np.nan], dtype=np.float32)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        assert opt.step() is False
    assert opt.skipped == 1 and p.data[0] == 1.0


def test_class_and_function_adam_agree():
    rng = np.random.default_rng(9)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    arr, state = [p.data.astype(np.float64)], None
    opt = Adam([p])
    for _ in range(3):
        g = rng.normal(size=4).astype(np.float32)
        p.grad = g
        opt.step()
        arr, state = adam_step(arr, [g], state)
    np.testing.assert_allclose(p.data, arr[0], rtol=1e-6)
