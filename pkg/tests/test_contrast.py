import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import oracles
import vlcl.contrast as contrast
from vlcl.contrast import ContrastConfig, NegativeQueue, contrastive_loss
from vlcl.encoder import l2_normalize
from vlcl.errors import ConfigError

D = torch.float64


def unit(n, dim, seed):
    return l2_normalize(torch.randn(n, dim, generator=torch.Generator().manual_seed(seed), dtype=D))


def test_capacity_four_keeps_last_four_in_order():
    q = NegativeQueue(4, 1, dtype=D)
    q.enqueue(torch.tensor([[1.0], [2.0], [3.0]], dtype=D))
    q.enqueue(torch.tensor([[4.0], [5.0], [6.0]], dtype=D))
    assert len(q) == 4
    assert q.contents().flatten().tolist() == [3.0, 4.0, 5.0, 6.0]


def test_enqueue_zero_rows_is_identity():
    q = NegativeQueue(4, 2, dtype=D)
    q.enqueue(unit(3, 2, 0))
    before = q.snapshot()
    q.enqueue(torch.zeros(0, 2, dtype=D))
    assert torch.equal(q.contents(), before)
    assert (q.head, q.fill) == (3, 3)


def test_enqueue_too_many_is_fatal():
    with pytest.raises(ConfigError):
        NegativeQueue(2, 3).enqueue(torch.zeros(3, 3))


def test_enqueue_wrong_width():
    with pytest.raises(ConfigError):
        NegativeQueue(4, 3).enqueue(torch.zeros(1, 2))


def test_enqueued_keys_are_detached():
    q = NegativeQueue(4, 2, dtype=D)
    k = unit(2, 2, 1).requires_grad_()
    q.enqueue(k * 2)
    assert not q.contents().requires_grad


@given(st.integers(1, 12), st.lists(st.integers(0, 12), max_size=40), st.integers(0, 2 ** 31))
def test_queue_matches_fifo_list_model(capacity, sizes, seed):
    q = NegativeQueue(capacity, 1, dtype=D)
    model = oracles.FifoModel(capacity)
    counter = 0
    for b in sizes:
        rows = list(range(counter, counter + b))
        counter += b
        if b > capacity:
            with pytest.raises(ConfigError):
                q.enqueue(torch.tensor(rows, dtype=D).view(-1, 1))
            continue
        q.enqueue(torch.tensor(rows, dtype=D).view(-1, 1))
        model.push(rows)
        assert q.contents().flatten().tolist() == model.items
        assert len(q) == len(model.items)


def test_queue_state_round_trip():
    q = NegativeQueue(5, 3, dtype=D)
    q.enqueue(unit(7 - 3, 3, 0))
    q.enqueue(unit(3, 3, 1))
    r = NegativeQueue.from_state(**q.state_dict())
    assert torch.equal(r.contents(), q.contents())
    assert (r.head, r.fill, r.capacity) == (q.head, q.fill, q.capacity)


def test_uniform_logits_give_log_r_plus_one():
    cfg = ContrastConfig(temperature=0.07)
    q = torch.zeros(3, 4, dtype=D)
    q[:, 0] = 1.0
    k = q.clone()
    negatives = q[:1].repeat(8, 1)
    loss = contrastive_loss(q, k, negatives, cfg)
    assert float(loss) == pytest.approx(3 * math.log(9), abs=1e-9)
    cfg_mean = ContrastConfig(temperature=0.07, reduction="mean")
    assert float(contrastive_loss(q, k, negatives, cfg_mean)) == pytest.approx(math.log(9), abs=1e-9)


def test_saturated_logits_give_near_zero():
    cfg = ContrastConfig(temperature=0.07)
    q = torch.tensor([[1.0, 0.0]], dtype=D)
    negatives = -q.repeat(8, 1)
    loss = float(contrastive_loss(q, q, negatives, cfg))
    assert loss == pytest.approx(math.log(1 + 8 * math.exp(-2 / 0.07)), rel=1e-9)
    assert loss < 1e-10


def test_empty_queue_warns_once_and_is_zero(caplog, monkeypatch):
    monkeypatch.setattr(contrast, "_warned_empty", False)
    q = unit(2, 4, 0)
    with caplog.at_level(logging.WARNING):
        a = contrastive_loss(q, q, NegativeQueue(8, 4, dtype=D), ContrastConfig())
        b = contrastive_loss(q, q, NegativeQueue(8, 4, dtype=D), ContrastConfig())
    assert float(a) == 0.0 and float(b) == 0.0
    assert caplog.text.count("queue is empty") == 1


def test_positive_excluded_variant():
    cfg = ContrastConfig(include_positive_in_denominator=False)
    q, k, negs = unit(4, 6, 0), unit(4, 6, 1), unit(8, 6, 2)
    expected = (torch.logsumexp(q @ negs.T / 0.07, 1) - (q * k).sum(1) / 0.07).sum()
    torch.testing.assert_close(contrastive_loss(q, k, negs, cfg), expected)
    with pytest.raises(ConfigError):
        contrastive_loss(q, k, torch.zeros(0, 6, dtype=D), cfg)


@pytest.mark.parametrize("seed", range(10))
def test_matches_term_by_term_oracle(seed):
    cfg = ContrastConfig(temperature=0.07)
    q, k = unit(4, 16, 3 * seed), unit(4, 16, 3 * seed + 1)
    queue = NegativeQueue(16, 16, dtype=D).enqueue(unit(8, 16, 3 * seed + 2))
    ref = oracles.infonce(q.numpy(), k.numpy(), queue.contents().numpy(), 0.07)
    assert float(contrastive_loss(q, k, queue, cfg)) == pytest.approx(ref, abs=1e-9)


def test_queue_receives_no_gradient():
    negs = unit(8, 6, 2).requires_grad_()
    q = unit(4, 6, 0).requires_grad_()
    contrastive_loss(q, unit(4, 6, 1), negs, ContrastConfig()).backward()
    assert negs.grad is None
    assert q.grad is not None


@given(st.floats(0.01, 2.0), st.integers(0, 10_000))
def test_loss_bounded_by_log_r_plus_one_shift(tau, seed):
    # each per-sample term lies in [0, log(1 + r e^{2/tau})]
    q, k, negs = unit(3, 5, seed), unit(3, 5, seed + 1), unit(6, 5, seed + 2)
    per = contrastive_loss(q, k, negs, ContrastConfig(temperature=tau, reduction="mean"))
    assert 0 <= float(per) <= math.log(1 + 6 * math.exp(2 / tau)) + 1e-9


@pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(queue_capacity=0), dict(reduction="max")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ContrastConfig(**kw)
