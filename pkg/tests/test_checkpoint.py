import json

import numpy as np
import pytest
import torch

from vlcl.autoview import AugmentConfig
from vlcl.checkpoint import FORMAT, checkpoint_config, load_checkpoint, read_checkpoint, save_checkpoint
from vlcl.contrast import ContrastConfig
from vlcl.datasets import SyntheticSpec, generate_synthetic
from vlcl.errors import ConfigError
from vlcl.gradcheck import tiny_encoder_config, tiny_view_config
from vlcl.trainer import TrainConfig, Trainer


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec(num_coarse_classes=6, subcats_per_class=2,
                                            samples_per_subcat=5, image_size=16, seed=2))


def trainer(data, dtype="float32"):
    cfg = TrainConfig(beta=1.0, eta=1e-2, lr=0.1, epochs=2, iterations_per_epoch=3, m_query_train=2,
                      dtype=dtype, seed=5)
    return Trainer(tiny_encoder_config(image_size=16, conv_channels=(4, 4)), tiny_view_config(image_size=16),
                   ContrastConfig(queue_capacity=40), AugmentConfig(), cfg, data)


def test_archive_layout(data, tmp_path):
    tr = trainer(data)
    tr.train(epochs=1)
    path = save_checkpoint(tr, tmp_path / "ck.npz")
    arrays = read_checkpoint(path)
    assert str(arrays["format"]) == FORMAT
    assert int(arrays["iteration"]) == 3 and int(arrays["epoch"]) == 1
    prefixes = {k.split("/")[0] for k in arrays}
    assert {"theta", "omega", "gamma1", "gamma2", "optim", "queue", "rng"} <= prefixes
    assert set(k[6:] for k in arrays if k.startswith("theta/")) == set(tr.state.encoder_state.theta)
    assert checkpoint_config(path)["train"]["seed"] == 5
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_resume_continues_identically(data, tmp_path, dtype):
    straight = trainer(data, dtype)
    straight.train(epochs=2)

    first = trainer(data, dtype)
    first.train(epochs=1)
    save_checkpoint(first, tmp_path / "ck.npz")
    resumed = load_checkpoint(tmp_path / "ck.npz", data)
    resumed.train(epochs=2)

    a = [r["total_loss"] for r in straight.state.history[3:]]
    b = [r["total_loss"] for r in resumed.state.history]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-5)
    for k, v in straight.state.encoder_state.theta.items():
        torch.testing.assert_close(resumed.state.encoder_state.theta[k], v, rtol=0, atol=1e-5)
    for k, v in straight.state.gamma2.items():
        torch.testing.assert_close(resumed.state.gamma2[k], v, rtol=0, atol=1e-5)
    assert torch.equal(resumed.state.queue.contents(), straight.state.queue.contents()) or \
        torch.allclose(resumed.state.queue.contents(), straight.state.queue.contents(), atol=1e-5)


def test_fresh_trainer_round_trip(data, tmp_path):
    tr = trainer(data)
    save_checkpoint(tr, tmp_path / "ck.npz")
    back = load_checkpoint(tmp_path / "ck.npz")
    assert back.state.momentum_buffers is None
    assert back.state.queue.fill == 0
    assert back.cfg == tr.cfg and back.view_cfg == tr.view_cfg


def test_wrong_format_rejected(tmp_path):
    np.savez(tmp_path / "other.npz", format=np.array("something-else"))
    with pytest.raises(ConfigError):
        read_checkpoint(tmp_path / "other.npz")
