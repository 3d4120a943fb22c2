import logging

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import momentum_step
from vlcl.encoder import (Encoder, EncoderConfig, EncoderState, init_encoders, l2_normalize,
                          momentum_update, to_nchw)
from vlcl.errors import ConfigError

SMALL = EncoderConfig(conv_channels=(8, 8, 8), feature_dim=16, proj_dim=12, proj_hidden=10, image_size=16)


def test_omega_equals_theta_at_init():
    _, state = init_encoders(SMALL, 0)
    assert state.theta.keys() == state.omega.keys()
    for k in state.theta:
        assert torch.equal(state.theta[k], state.omega[k])
        assert state.theta[k].data_ptr() != state.omega[k].data_ptr()


def test_same_seed_same_theta():
    _, a = init_encoders(SMALL, 4)
    _, b = init_encoders(SMALL, 4)
    _, c = init_encoders(SMALL, 5)
    assert all(torch.equal(a.theta[k], b.theta[k]) for k in a.theta)
    assert not all(torch.equal(a.theta[k], c.theta[k]) for k in a.theta)


def test_default_encoder_shapes():
    cfg = EncoderConfig()
    enc, state = init_encoders(cfg, 0)
    x = torch.rand(3, 3, 32, 32)
    assert enc.encode(state.theta, x).shape == (3, 64)
    assert enc.embed(state.theta, x).shape == (3, 128)
    # four conv blocks by default
    assert sum(state.theta[k].ndim == 4 for k in state.theta) == 4


def test_duplicate_images_give_identical_rows():
    enc, state = init_encoders(SMALL, 0)
    img = torch.rand(1, 3, 16, 16)
    feats = enc.encode(state.theta, torch.cat([img, torch.rand(1, 3, 16, 16), img]))
    assert torch.equal(feats[0], feats[2])


def test_encode_rejects_wrong_shape():
    enc, state = init_encoders(SMALL, 0)
    with pytest.raises(ConfigError):
        enc.encode(state.theta, torch.rand(2, 3, 32, 32))
    with pytest.raises(ConfigError):
        enc.encode(state.theta, torch.rand(2, 1, 16, 16))
    with pytest.raises(ConfigError):
        enc.project(state.theta, torch.rand(2, 5))


@given(st.integers(0, 1000), st.integers(1, 5))
def test_projection_rows_unit_norm(seed, batch):
    enc, state = init_encoders(SMALL, seed)
    x = torch.rand(batch, 3, 16, 16, generator=torch.Generator().manual_seed(seed))
    z = enc.embed(state.theta, x)
    assert z.shape == (batch, 12)
    np.testing.assert_allclose(z.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)


def test_zero_norm_warns(caplog):
    with caplog.at_level(logging.WARNING):
        z = l2_normalize(torch.zeros(2, 3))
    assert torch.isfinite(z).all()
    assert "zero-norm" in caplog.text


def test_momentum_update_arithmetic():
    state = EncoderState(theta={"w": torch.tensor([1.0, 0.0], dtype=torch.float64)},
                         omega={"w": torch.tensor([0.0, 1.0], dtype=torch.float64)})
    new = momentum_update(state, 0.999)
    np.testing.assert_allclose(new.omega["w"].numpy(), [0.001, 0.999], rtol=0, atol=1e-15)


def test_momentum_update_eps_zero_copies_theta():
    _, state = init_encoders(SMALL, 0)
    state = EncoderState(state.theta, {k: torch.randn_like(v) for k, v in state.omega.items()})
    new = momentum_update(state, 0.0)
    assert all(torch.equal(new.omega[k], state.theta[k]) for k in state.theta)


@pytest.mark.parametrize("eps", [-0.1, 1.5])
def test_momentum_update_rejects_bad_eps(eps):
    _, state = init_encoders(SMALL, 0)
    with pytest.raises(ConfigError):
        momentum_update(state, eps)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(0, 1))
def test_momentum_update_matches_oracle(values, eps):
    theta = torch.tensor(values, dtype=torch.float64)
    omega = torch.flip(theta, [0]) * 0.5
    new = momentum_update(EncoderState({"w": theta}, {"w": omega}), eps)
    ref = momentum_step(omega.tolist(), theta.tolist(), eps)
    np.testing.assert_allclose(new.omega["w"].numpy(), ref, rtol=1e-12, atol=1e-12)


def test_momentum_never_records_gradients():
    _, state = init_encoders(SMALL, 0, dtype=torch.float64)
    theta = {k: v.clone().requires_grad_() for k, v in state.theta.items()}
    new = momentum_update(EncoderState(theta, state.omega), 0.9)
    assert all(not v.requires_grad and v.grad_fn is None for v in new.omega.values())


def test_to_nchw():
    assert to_nchw(np.zeros((2, 5, 6, 3), dtype=np.float32)).shape == (2, 3, 5, 6)
    with pytest.raises(ConfigError):
        to_nchw(np.zeros((5, 6, 3)))


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(activation="gelu")
    with pytest.raises(ConfigError):
        EncoderConfig(pool="median")
