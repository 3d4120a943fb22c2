import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import oracles
from vlcl.errors import ConfigError, TrainingError
from vlcl.protohead import SimilarityMetric, classify, compute_prototypes, meta_loss

D = torch.float64


def test_prototype_is_class_mean():
    feats = torch.tensor([[1.0, 1.0], [5.0, 0.0], [3.0, 3.0], [7.0, 2.0]])
    protos = compute_prototypes(feats, [0, 1, 0, 1])
    assert protos.n_way == 2
    assert torch.equal(protos.vectors[0], torch.tensor([2.0, 2.0]))
    assert torch.equal(protos.vectors[1], torch.tensor([6.0, 1.0]))


def test_one_shot_prototypes_equal_support():
    feats = torch.randn(5, 7)
    protos = compute_prototypes(feats, torch.arange(5))
    assert torch.equal(protos.vectors, feats)


def test_unequal_support_counts_fatal():
    with pytest.raises(ConfigError):
        compute_prototypes(torch.randn(3, 2), [0, 0, 1])


def test_uniform_similarities_give_log_n():
    protos = compute_prototypes(torch.zeros(5, 4), torch.arange(5))
    loss = meta_loss(torch.randn(3, 4), [0, 2, 4], protos)
    assert float(loss) == pytest.approx(math.log(5), abs=1e-6)


def test_query_on_its_prototype_beats_chance():
    protos = compute_prototypes(torch.eye(5) * 3, torch.arange(5))
    loss = meta_loss(protos.vectors[[1]], [1], protos)
    assert float(loss) < math.log(5)


def test_meta_loss_nan_is_fatal():
    protos = compute_prototypes(torch.randn(2, 3), [0, 1])
    with pytest.raises(TrainingError):
        meta_loss(torch.tensor([[float("nan"), 0.0, 0.0]]), [0], protos)


def test_query_label_out_of_range():
    protos = compute_prototypes(torch.randn(2, 3), [0, 1])
    with pytest.raises(ConfigError):
        meta_loss(torch.randn(1, 3), [2], protos)


def test_classify_self_similarity():
    protos = compute_prototypes(torch.randn(4, 6, generator=torch.Generator().manual_seed(0)), torch.arange(4))
    pred = classify(protos.vectors[[2]], protos)
    assert pred.predictions.tolist() == [2]
    assert pred.scores.shape == (1, 4)


def test_classify_tie_goes_to_lowest_label():
    protos = compute_prototypes(torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
                                torch.arange(4))
    assert classify(torch.zeros(1, 2), protos).predictions.tolist() == [0]


def test_similarity_validation():
    with pytest.raises(ConfigError):
        SimilarityMetric("manhattan")
    with pytest.raises(ConfigError):
        SimilarityMetric(scale=0.0)


def test_cosine_similarity_scaled():
    sim = SimilarityMetric("cosine", scale=10.0)
    s = sim(torch.tensor([[1.0, 0.0]]), torch.tensor([[2.0, 0.0], [0.0, 3.0]]))
    np.testing.assert_allclose(s.numpy(), [[10.0, 0.0]], atol=1e-6)


def random_episode(seed, n_way=5, k_shot=1, m_query=4, dim=8):
    g = np.random.default_rng(seed)
    support = g.normal(size=(n_way * k_shot, dim))
    s_labels = np.repeat(np.arange(n_way), k_shot)
    queries = g.normal(size=(n_way * m_query, dim)) * g.uniform(0.1, 3.0)
    q_labels = np.repeat(np.arange(n_way), m_query)
    return support, s_labels, queries, q_labels


@pytest.mark.parametrize("seed", range(10))
def test_meta_loss_matches_term_by_term_oracle(seed):
    support, s_labels, queries, q_labels = random_episode(seed, k_shot=1 + seed % 3)
    protos = compute_prototypes(torch.tensor(support, dtype=D), s_labels)
    np.testing.assert_allclose(protos.vectors.numpy(), oracles.prototypes(support, s_labels, 5), atol=1e-12)
    loss = meta_loss(torch.tensor(queries, dtype=D), q_labels, protos)
    ref = oracles.proto_loss(queries, q_labels, oracles.prototypes(support, s_labels, 5))
    assert float(loss) == pytest.approx(ref, abs=1e-9)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_prototype_is_permutation_invariant(n_way, k_shot, seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(n_way * k_shot, 3, generator=g, dtype=D)
    labels = torch.arange(n_way).repeat_interleave(k_shot)
    perm = torch.randperm(len(labels), generator=g)
    a = compute_prototypes(feats, labels).vectors
    b = compute_prototypes(feats[perm], labels[perm]).vectors
    torch.testing.assert_close(a, b)


@given(st.integers(0, 10_000))
def test_meta_loss_is_non_negative_and_finite(seed):
    support, s_labels, queries, q_labels = random_episode(seed)
    protos = compute_prototypes(torch.tensor(support), s_labels)
    loss = float(meta_loss(torch.tensor(queries), q_labels, protos))
    assert math.isfinite(loss) and loss >= 0
