import json

import numpy as np
import pytest
import torch

from gana_fkgc.evaluation import (ProtocolError, QueryRecord, RankingReport, attention_report, evaluate,
                                  evaluate_by_category, evaluation_episode, filtered_rank, rank_query)
from gana_fkgc.kg_data import EmbeddingTable, generate_synthetic_kg

from conftest import make_model


def brute_force_rank(scores, candidates, true_tail, known):
    """Sort-and-count: position of the target after dropping other known tails, ties pessimistic."""
    rows = [(s, c) for s, c in zip(scores, candidates) if c == true_tail or c not in known]
    target = next(s for s, c in rows if c == true_tail)
    return sum(1 for s, c in rows if c != true_tail and s <= target) + 1


def records(ranks):
    return [QueryRecord(0, i, i, r, r) for i, r in enumerate(ranks)]


class TestFilteredRank:
    def test_best_score_is_rank_one(self):
        assert filtered_rank([0.5, 0.1, 0.9], [7, 8, 9], 8)[0] == 1

    def test_all_equal_is_pool_size(self):
        assert filtered_rank([1.0] * 6, list(range(6)), 3) == (6, 6)
        assert filtered_rank([1.0] * 6, list(range(6)), 3, known_tails={0, 1})[0] == 4

    def test_hand_case(self):
        assert filtered_rank([3, 1, 2, 5, 4], [10, 11, 12, 13, 14], 12)[0] == 2

    def test_filtering_only_improves(self):
        rank, raw = filtered_rank([0.1, 0.2, 0.3], [1, 2, 3], 3, known_tails={1, 3})
        assert (rank, raw) == (2, 3)

    def test_target_missing(self):
        with pytest.raises(ProtocolError):
            filtered_rank([0.1], [1], 2)

    def test_random_tables_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(5, 501))
            cands = rng.permutation(1000)[:n].tolist()
            scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
            true = cands[int(rng.integers(n))]
            known = set(rng.choice(cands, size=int(rng.integers(0, 5)), replace=True).tolist()) | {true}
            rank, raw = filtered_rank(scores, cands, true, known)
            assert rank == brute_force_rank(scores, cands, true, known)
            assert raw == brute_force_rank(scores, cands, true, set())
            assert rank <= raw


class TestReport:
    def test_perfect(self):
        rep = RankingReport.from_records(records([1, 1, 1]))
        assert rep.mrr == 1.0 and all(v == 1.0 for v in rep.hits_at.values())

    def test_two_queries(self):
        rep = RankingReport.from_records(records([2, 4]))
        assert rep.mrr == 0.375
        assert rep.hits_at[1] == 0.0 and rep.hits_at[5] == 1.0

    def test_hits_monotone_and_json(self):
        rep = RankingReport.from_records(records([1, 3, 7, 20, 2]))
        assert rep.hits_at[1] <= rep.hits_at[5] <= rep.hits_at[10] <= 1
        data = json.loads(rep.to_json())
        assert data["summary"]["queries"] == 5 and len(data["records"]) == 5

    def test_empty(self):
        assert RankingReport.from_records([]).mrr == 0.0


def test_rank_query_uses_adapted_state():
    emb = EmbeddingTable(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]), np.zeros((1, 2)))
    r = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert rank_query(0, (r, None), [1, 2, 3], 1, {1}, emb) == 1
    assert rank_query(0, (r, None), [1, 2, 3], 3, {3}, emb) == 2


class TestCategories:
    def test_single_category_equals_global(self, tiny_setup):
        graph, split, cfg, emb = tiny_setup
        model = make_model(graph, emb, cfg)
        rep = evaluate_by_category(evaluate(model, split, relations=split.train_relations), split)
        assert list(rep.categories) == ["N-N"]
        assert rep.categories["N-N"].mrr == rep.mrr

    def test_partition_identity_and_planted_n1(self):
        graph, split = generate_synthetic_kg(120, 6, 4, 0.9, np.random.default_rng(2), noise_degree=2,
                                             n_hubs=6, K=3, categories=["N-N", "N-1", "1-N", "N-N"])
        from conftest import random_embeddings
        from gana_fkgc.config import TrainConfig
        cfg = TrainConfig(d=4, K=3)
        model = make_model(graph, random_embeddings(graph, 4), cfg)
        every = split.train_relations + split.valid_relations + split.test_relations
        rep = evaluate_by_category(evaluate(model, split, relations=every), split)
        total = sum(sub.mrr * sub.num_queries for sub in rep.categories.values()) / rep.num_queries
        assert abs(total - rep.mrr) <= 1e-12
        n1 = graph.relation_ids["task1"]
        for cat, sub in rep.categories.items():
            has = any(r.relation == n1 for r in sub.records)
            assert has == (cat == "N-1")


def test_evaluation_episode_uses_file_order(tiny_setup):
    graph, split, cfg, emb = tiny_setup
    rel = split.train_relations[0]
    ep = evaluation_episode(split, rel, 3, seed=1)
    assert ep.support == split.few_shot_relations[rel][:3]
    assert ep.query == split.few_shot_relations[rel][3:]
    assert ep.support_negatives == evaluation_episode(split, rel, 3, seed=1).support_negatives


def test_parallel_evaluation_identical(tiny_setup):
    graph, split, cfg, emb = tiny_setup
    model = make_model(graph, emb, cfg)
    rels = split.train_relations + split.test_relations
    a = evaluate(model, split, relations=rels)
    b = evaluate(model, split, relations=rels, workers=3)
    assert [r.rank for r in a.records] == [r.rank for r in b.records]


class TestAttentionReport:
    def test_weights_sum_to_one(self, tiny_setup):
        graph, split, cfg, emb = tiny_setup
        model = make_model(graph, emb, cfg)
        ep = evaluation_episode(split, split.train_relations[0], cfg.K, 0)
        rep = attention_report(ep, model, graph, top_k=2, bottom_k=1)
        for item in rep["support"]:
            for role in ("head_neighbors", "tail_neighbors"):
                block = item[role]
                assert abs(sum(w["weight"] for w in block["weights"]) - 1) <= 1e-9
                assert len(block["top"]) <= 2 and len(block["bottom"]) <= 1
                assert 0 < block["gate"] < 1

    def test_uniform_attention_no_separation(self, tiny_setup):
        graph, split, cfg, emb = tiny_setup
        model = make_model(graph, emb, cfg)
        with torch.no_grad():
            model.aggregator.U1.zero_()
        ep = evaluation_episode(split, split.train_relations[0], cfg.K, 0)
        block = attention_report(ep, model, graph)["support"][0]["head_neighbors"]
        top, bottom = block["top"][0]["weight"], block["bottom"][-1]["weight"]
        assert abs(top - bottom) <= 1e-9

    def test_planted_neighbor_found_above_chance(self, tiny_setup):
        """Steer U1 toward the planted head code and count how often it lands in the top-k."""
        graph, split, cfg, emb = tiny_setup
        model = make_model(graph, emb, cfg)
        rel = split.train_relations[0]
        heads = {tr.head for tr in split.few_shot_relations[rel]}
        # the planted neighbor is the (relation, anchor) pair shared by every head
        common = set.intersection(*(set(graph.neighbors(h)) for h in heads))
        assert common
        planted = next(iter(common))
        with torch.no_grad():
            code = model.aggregator.W1 @ torch.cat([model.relation_emb[planted[0]],
                                                    model.entity_emb[planted[1]]])
            model.aggregator.U1.copy_(code / code.norm())
        rng = np.random.default_rng(0)
        top_k, hits, chance = 1, 0, 0.0
        triples = split.few_shot_relations[rel]
        for _ in range(100):
            tr = triples[rng.integers(len(triples))]
            ep = evaluation_episode(split, rel, 1, 0)
            ep.support = [tr]
            block = attention_report(ep, model, graph, top_k=top_k)["support"][0]["head_neighbors"]
            names = {(w["relation"], w["entity"]) for w in block["top"]}
            hits += (graph.relation_vocab[planted[0]], graph.entity_vocab[planted[1]]) in names
            chance += top_k / len(block["weights"])
        assert hits / 100 > chance / 100
