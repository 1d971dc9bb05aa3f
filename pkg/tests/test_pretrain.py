import numpy as np
import pytest

from gana_fkgc.kg_data import Triple, make_graph
from gana_fkgc.pretrain import PretrainError, pretrain_embeddings


def one_triple_graph():
    return make_graph(["a", "b", "c"], ["r"], [], [("a", "r", "b")], max_neighbors=5)


def test_single_triple_distance_shrinks():
    g = one_triple_graph()
    start = pretrain_embeddings(g, 8, epochs=0, rng=3)
    end = pretrain_embeddings(g, 8, epochs=100, lr=0.05, rng=3)

    def dist(t):
        return np.linalg.norm(t.entity_vectors[0] + t.relation_vectors[0] - t.entity_vectors[1])

    assert dist(end) < dist(start)


def test_zero_learning_rate_keeps_initialization():
    g = one_triple_graph()
    a = pretrain_embeddings(g, 6, epochs=0, rng=1)
    b = pretrain_embeddings(g, 6, epochs=20, lr=0.0, rng=1)
    assert np.array_equal(a.entity_vectors, b.entity_vectors)
    assert np.array_equal(a.relation_vectors, b.relation_vectors)


def test_deterministic_under_seed(tiny_kg):
    graph, _ = tiny_kg
    a = pretrain_embeddings(graph, 8, epochs=5, rng=4)
    b = pretrain_embeddings(graph, 8, epochs=5, rng=4)
    assert a.entity_vectors.tobytes() == b.entity_vectors.tobytes()


def test_unit_entities_and_inverse_relations(tiny_kg):
    graph, _ = tiny_kg
    t = pretrain_embeddings(graph, 8, epochs=3, rng=0)
    np.testing.assert_allclose(np.linalg.norm(t.entity_vectors, axis=1), 1.0, atol=1e-12)
    r = graph.background_relations()[0]
    assert np.array_equal(t.relation_vectors[graph.inverse_of(r)], -t.relation_vectors[r])
    task = graph.relation_ids["task0"]
    assert not t.relation_vectors[task].any()


def test_positives_score_below_corruptions(tiny_kg):
    graph, _ = tiny_kg
    t = pretrain_embeddings(graph, 16, epochs=100, rng=0)
    E, R = t.entity_vectors, t.relation_vectors
    trip = np.array(graph.background_triples)
    rng = np.random.default_rng(1)
    corrupt = trip.copy()
    corrupt[:, 2] = rng.integers(graph.num_entities, size=len(trip))
    pos = np.linalg.norm(E[trip[:, 0]] + R[trip[:, 1]] - E[trip[:, 2]], axis=1)
    neg = np.linalg.norm(E[corrupt[:, 0]] + R[corrupt[:, 1]] - E[corrupt[:, 2]], axis=1)
    assert pos.mean() < neg.mean()


def test_empty_graph():
    g = make_graph(["a", "b"], [], [], [])
    with pytest.raises(PretrainError):
        pretrain_embeddings(g, 4)
