"""Filtered tail ranking, MRR / Hits@n, per-category breakdowns and attention dumps."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import mtransh
from .kg_data import (Episode, KnowledgeGraph, TaskSplit, Triple, classify_relation_category,
                      corrupt_tail)

HITS_AT = (1, 5, 10)


class ProtocolError(ValueError):
    pass


@dataclass
class QueryRecord:
    relation: int
    head: int
    tail: int
    rank: int
    raw_rank: int


@dataclass
class RankingReport:
    records: list[QueryRecord]
    mrr: float
    hits_at: dict[int, float]
    raw_mrr: float
    raw_hits_at: dict[int, float]
    categories: dict[str, "RankingReport"] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[QueryRecord]) -> "RankingReport":
        records = list(records)
        ranks = np.array([r.rank for r in records], dtype=np.float64)
        raw = np.array([r.raw_rank for r in records], dtype=np.float64)
        return cls(records, _mrr(ranks), _hits(ranks), _mrr(raw), _hits(raw))

    @property
    def num_queries(self) -> int:
        return len(self.records)

    def summary(self) -> dict:
        out = {"queries": self.num_queries, "mrr": self.mrr,
               **{f"hits@{n}": v for n, v in self.hits_at.items()},
               "raw_mrr": self.raw_mrr,
               **{f"raw_hits@{n}": v for n, v in self.raw_hits_at.items()}}
        if self.categories:
            out["categories"] = {k: v.summary() for k, v in self.categories.items()}
        return out

    def to_json(self, graph: KnowledgeGraph | None = None) -> str:
        def name(vocab, i):
            return vocab[i] if graph is not None else i
        recs = []
        for r in self.records:
            rec = asdict(r)
            if graph is not None:
                rec.update(relation=name(graph.relation_vocab, r.relation),
                           head=name(graph.entity_vocab, r.head), tail=name(graph.entity_vocab, r.tail))
            recs.append(rec)
        return json.dumps({"summary": self.summary(), "records": recs}, indent=1)


def _mrr(ranks: np.ndarray) -> float:
    return float(np.mean(1.0 / ranks)) if len(ranks) else 0.0


def _hits(ranks: np.ndarray) -> dict[int, float]:
    return {n: (float(np.mean(ranks <= n)) if len(ranks) else 0.0) for n in HITS_AT}


def filtered_rank(scores: np.ndarray, candidates: Sequence[int], true_tail: int,
                  known_tails: Iterable[int] = ()) -> tuple[int, int]:
    """``(filtered_rank, raw_rank)`` of ``true_tail`` among ``candidates`` (lower score is better).

    Known true tails other than the target are dropped before ranking; ties
    count against the target.
    """
    cands = np.asarray(candidates)
    scores = np.asarray(scores, dtype=np.float64)
    hit = np.flatnonzero(cands == true_tail)
    if len(hit) == 0:
        raise ProtocolError(f"true tail {true_tail} is not among the candidates")
    target = scores[hit[0]]
    others = cands != true_tail
    raw_rank = 1 + int(np.count_nonzero(others & (scores <= target)))
    known = np.fromiter((k for k in known_tails if k != true_tail), dtype=np.int64)
    keep = others & ~np.isin(cands, known)
    rank = 1 + int(np.count_nonzero(keep & (scores <= target)))
    return rank, raw_rank


def rank_query(h: int, r_state: tuple[torch.Tensor, torch.Tensor | None], candidates: Sequence[int],
               true_tail: int, known_tails: Iterable[int], embeddings, norm: str = "L2") -> int:
    r_m, P = r_state
    table = embeddings.entity_vectors
    table = table if isinstance(table, torch.Tensor) else torch.from_numpy(np.asarray(table))
    cand = torch.as_tensor(list(candidates), dtype=torch.long)
    with torch.no_grad():
        scores = mtransh.score_triple(table[h], r_m, table[cand], P, norm)
    return filtered_rank(scores.numpy(), list(candidates), true_tail, known_tails)[0]


def support_negatives(split: TaskSplit, relation: int, support: Sequence[Triple], seed: int,
                      per_positive: int = 1) -> list[Triple]:
    rng = np.random.default_rng([seed, relation])
    return [corrupt_tail(split, tr, rng) for tr in support for _ in range(per_positive)]


def evaluation_episode(split: TaskSplit, relation: int, K: int, seed: int,
                       per_positive: int = 1, sample_support: bool = False) -> Episode:
    """First K triples (or a seeded sample) as support, everything else as queries."""
    triples = split.few_shot_relations[relation]
    if len(triples) < K + 1:
        raise ProtocolError(f"relation {relation} has {len(triples)} triples; need at least K+1")
    if sample_support:
        idx = np.random.default_rng([seed, relation, 1]).permutation(len(triples))
        support = [triples[i] for i in sorted(idx[:K])]
        query = [triples[i] for i in idx[K:]]
    else:
        support, query = list(triples[:K]), list(triples[K:])
    negs = support_negatives(split, relation, support, seed, per_positive)
    return Episode(relation, support, query, negs, [])


def evaluate(model, split: TaskSplit, partition: str = "test", config=None,
             relations: Sequence[int] | None = None, sample_support: bool = False,
             workers: int = 1) -> RankingReport:
    """Rank every query of every relation in ``partition`` (or ``relations``).

    ``workers > 1`` scores relations on a thread pool; records are still
    concatenated in relation order so the report does not depend on it.
    """
    cfg = config if config is not None else model.config
    rels = list(relations) if relations is not None else split.partition(partition)

    def one(rel: int) -> list[QueryRecord]:
        episode = evaluation_episode(split, rel, cfg.K, cfg.eval_seed, cfg.negatives_per_positive,
                                     sample_support)
        r_m, P = model.adapt_relation_state(episode)
        return rank_episode_queries(model, split, episode, r_m, P)

    if workers > 1 and len(rels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, rels))
    else:
        chunks = [one(rel) for rel in rels]
    return RankingReport.from_records([rec for chunk in chunks for rec in chunk])


def rank_episode_queries(model, split: TaskSplit, episode: Episode, r_m, P) -> list[QueryRecord]:
    rel = episode.relation
    if not episode.query:
        return []
    pool = split.candidates[rel]
    heads = torch.tensor([q.head for q in episode.query])
    scores = model.score_candidates(heads, torch.tensor(pool), r_m, P).numpy()
    out = []
    for q, row in zip(episode.query, scores):
        rank, raw = filtered_rank(row, pool, q.tail, split.known_tails.get((q.head, rel), ()))
        out.append(QueryRecord(rel, q.head, q.tail, rank, raw))
    return out


def relation_categories(split: TaskSplit, relations: Iterable[int], threshold: float = 1.5) -> dict[int, str]:
    return {r: classify_relation_category(r, split.few_shot_relations[r], threshold) for r in relations}


def evaluate_by_category(report: RankingReport, split: TaskSplit, threshold: float = 1.5) -> RankingReport:
    """Attach per-category sub-reports; categories with no queries are omitted."""
    cats = relation_categories(split, {r.relation for r in report.records}, threshold)
    grouped: dict[str, list[QueryRecord]] = {}
    for rec in report.records:
        grouped.setdefault(cats[rec.relation], []).append(rec)
    out = RankingReport.from_records(report.records)
    out.categories = {c: RankingReport.from_records(grouped[c]) for c in sorted(grouped)}
    return out


def attention_report(episode: Episode, model, graph: KnowledgeGraph, top_k: int = 3,
                     bottom_k: int = 2) -> dict:
    """Neighbor attention weights and gate values for each support triple's head and tail."""
    names_e, names_r = graph.entity_vocab, graph.relation_vocab
    out = {"relation": names_r[episode.relation], "support": []}
    for tr in episode.support:
        item = {"head": names_e[tr.head], "tail": names_e[tr.tail]}
        for role, ent in (("head", tr.head), ("tail", tr.tail)):
            with torch.no_grad():
                _, alpha, g = model.entity_repr(torch.tensor([ent]))
            nbrs = graph.neighbors(ent)
            weights = alpha[0, : len(nbrs)].numpy()
            order = sorted(range(len(nbrs)), key=lambda i: (-weights[i], i))
            ranked = [{"relation": names_r[nbrs[i][0]], "entity": names_e[nbrs[i][1]],
                       "weight": float(weights[i])} for i in order]
            item[f"{role}_neighbors"] = {
                "gate": float(g[0]),
                "weights": ranked,
                "top": ranked[:top_k],
                "bottom": ranked[::-1][:bottom_k][::-1] if bottom_k else [],
            }
        out["support"].append(item)
    return out
