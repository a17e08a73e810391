import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradient_check
from pail.checkpoint import state_hash
from pail.simulator import (CriterionNotReached, SimulatorConfig, SimulatorFrozenError, WorldModel,
                            kl_standard_normal, pretrain, transition_triples)


def small_model(d_z=3, beta=1e-3, seed=0, **kw):
    torch.manual_seed(seed)
    return WorldModel(SimulatorConfig(d_s=4, K=2, d_z=d_z, hidden=16, beta_vae=beta, **kw))


def batch(n=6, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, 4, generator=g, dtype=dtype), torch.rand(n, 2, generator=g, dtype=dtype),
            torch.randn(n, 4, generator=g, dtype=dtype))


def linear_triples(n=400, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 4))
    a = rng.uniform(0, 1, size=(n, 2))
    M = rng.normal(size=(4, 4)) * 0.3
    Bm = rng.normal(size=(2, 4)) * 0.3
    return s, a, s @ M + a @ Bm


# --- encoder --------------------------------------------------------------------------------

def test_zero_weight_encoder_returns_bias():
    m = small_model().double()
    with torch.no_grad():
        for p in m.enc.parameters():
            p.zero_()
        m.enc[-1].bias.copy_(torch.arange(6, dtype=torch.float64) * 0.1)
    mu, log_var = m.encode(*batch()[:2])
    torch.testing.assert_close(mu, torch.tensor([[0.0, 0.1, 0.2]] * 6, dtype=torch.float64))
    torch.testing.assert_close(log_var, torch.tensor([[0.3, 0.4, 0.5]] * 6, dtype=torch.float64))


def test_encoder_finite_for_large_inputs():
    m = small_model().double()
    s, a, _ = batch()
    mu, log_var = m.encode(1e3 * s, 1e3 * a)
    assert torch.isfinite(mu).all() and torch.isfinite(log_var).all()
    assert log_var.min() >= -10 and log_var.max() <= 4
    assert torch.isfinite(m.decode(1e3 * s, 1e3 * a, mu)).all()


def test_world_model_gradients_match_finite_differences():
    s, a, sn = batch()
    eps = torch.randn(6, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    m = small_model(beta=0.5)
    assert gradient_check(m, lambda net: net.elbo_loss(s, a, sn, eps=eps)) <= 1e-4


def test_reparameterized_gradient_wrt_latent_mean():
    m = small_model(beta=0.3).double()
    s, a, sn = batch()
    eps = torch.randn(6, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    _, log_var = m.encode(s, a)
    log_var = log_var.detach()

    def loss(mu):
        z = mu + (0.5 * log_var).exp() * eps
        recon = ((m.decode(s, a, z) - sn) ** 2).mean()
        return recon + m.cfg.beta_vae * kl_standard_normal(mu, log_var).mean()

    mu = torch.randn(6, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(loss(mu), mu)
    h = 1e-5
    for idx in [(0, 0), (2, 1), (5, 2)]:
        e = torch.zeros_like(mu)
        e[idx] = h
        with torch.no_grad():
            numeric = (float(loss(mu + e)) - float(loss(mu - e))) / (2 * h)
        assert abs(numeric - float(grad[idx])) <= 1e-4 * max(abs(numeric), 1e-6)


# --- ELBO -----------------------------------------------------------------------------------

def test_kl_of_standard_normal_is_zero():
    assert float(kl_standard_normal(torch.zeros(1, 4), torch.zeros(1, 4))) == 0.0


def test_kl_shifted_mean_closed_form():
    kl = kl_standard_normal(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
    assert float(kl) == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(mu=st.lists(st.floats(-20, 20), min_size=1, max_size=6), data=st.data())
def test_kl_is_non_negative(mu, data):
    lv = data.draw(st.lists(st.floats(-10, 4), min_size=len(mu), max_size=len(mu)))
    kl = kl_standard_normal(torch.tensor([mu], dtype=torch.float64), torch.tensor([lv], dtype=torch.float64))
    assert float(kl) >= 0.0


def test_zero_beta_loss_is_reconstruction_mse():
    m = small_model(beta=0.0).double()
    s, a, sn = batch()
    eps = torch.randn(6, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    mu, log_var = m.encode(s, a)
    z = mu + (0.5 * log_var).exp() * eps
    expected = ((m.decode(s, a, z) - sn) ** 2).mean()
    assert float(m.elbo_loss(s, a, sn, eps=eps).detach()) == pytest.approx(float(expected.detach()), abs=1e-14)


def test_elbo_adds_weighted_kl():
    m = small_model(beta=0.25).double()
    s, a, sn = batch()
    eps = torch.zeros(6, 3, dtype=torch.float64)
    mu, log_var = m.encode(s, a)
    recon = ((m.decode(s, a, mu) - sn) ** 2).mean()
    kl = 0.5 * (mu**2 + log_var.exp() - log_var - 1).sum(-1).mean()
    assert float(m.elbo_loss(s, a, sn, eps=eps).detach()) == pytest.approx(float((recon + 0.25 * kl).detach()), abs=1e-12)


# --- pretraining and freezing ---------------------------------------------------------------

def test_pretrain_freezes_and_rejects_retraining():
    m = small_model(max_epochs=30, criterion=10.0).float()
    pretrain(m, linear_triples())
    assert m.frozen
    assert not any(p.requires_grad for p in m.parameters())
    with pytest.raises(SimulatorFrozenError, match="simulator frozen"):
        pretrain(m, linear_triples())


def test_pretrain_is_deterministic():
    a = pretrain(small_model(max_epochs=5, criterion=10.0), linear_triples(), seed=3)
    b = pretrain(small_model(max_epochs=5, criterion=10.0), linear_triples(), seed=3)
    assert state_hash(a) == state_hash(b)


def test_pretrain_reports_unreachable_criterion():
    m = small_model(max_epochs=2, criterion=1e-12)
    with pytest.raises(CriterionNotReached) as info:
        pretrain(m, linear_triples())
    assert info.value.best_mse > 1e-12
    assert math.isfinite(info.value.best_mse)


def test_simulate_step_requires_frozen_model():
    m = small_model()
    s, a, _ = batch(dtype=torch.float32)
    with pytest.raises(SimulatorFrozenError, match="simulator not frozen"):
        m.simulate_step(s, a)


def test_latent_free_model_is_deterministic():
    m = small_model(d_z=0).freeze()
    s, a, _ = batch(dtype=torch.float32)
    x = m.simulate_step(s, a, torch.Generator().manual_seed(0))
    y = m.simulate_step(s, a, torch.Generator().manual_seed(99))
    assert torch.equal(x, y)


def test_same_generator_seed_same_state():
    m = small_model().freeze()
    s, a, _ = batch(dtype=torch.float32)
    x = m.simulate_step(s, a, torch.Generator().manual_seed(5))
    y = m.simulate_step(s, a, torch.Generator().manual_seed(5))
    assert torch.equal(x, y)


def test_transition_triples_skip_dummy_steps():
    S = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
    A = np.ones((2, 4, 1))
    V = np.array([[True, True, True, False], [True, True, True, True]])
    s, a, sn = transition_triples(S, A, V)
    assert len(s) == 2 + 3
    np.testing.assert_array_equal(sn[:, 0] - s[:, 0], np.ones(5))


# --- fidelity on the noise-free plant -------------------------------------------------------

def test_noise_free_plant_validation_mse(noise_free_world):
    assert noise_free_world.model.val_mse <= 0.05


def test_noise_free_plant_one_step_error_against_true_plant(noise_free_world):
    assert noise_free_world.oracle_mse() <= 3 * noise_free_world.model.val_mse
