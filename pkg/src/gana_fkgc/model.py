"""Model assembly: aggregator + Bi-LSTM encoder + MTransH, batched over episodes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import mtransh
from .aggregator import AggregatorParams, aggregate
from .config import TrainConfig
from .kg_data import EmbeddingTable, Episode, KnowledgeGraph, Triple
from .relation_encoder import BiLSTMParams, SupportAttnParams, encode_relation


def neighbor_tensors(graph: KnowledgeGraph) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad the neighbor index into dense (E, n_max) relation/entity id and mask tensors."""
    n_max = max([len(v) for v in graph.neighbor_index.values()] + [1])
    rel = np.zeros((graph.num_entities, n_max), dtype=np.int64)
    ent = np.zeros((graph.num_entities, n_max), dtype=np.int64)
    mask = np.zeros((graph.num_entities, n_max), dtype=bool)
    for e, nbrs in graph.neighbor_index.items():
        if nbrs:
            arr = np.asarray(nbrs, dtype=np.int64)
            rel[e, : len(nbrs)] = arr[:, 0]
            ent[e, : len(nbrs)] = arr[:, 1]
            mask[e, : len(nbrs)] = True
    return torch.from_numpy(rel), torch.from_numpy(ent), torch.from_numpy(mask)


@dataclass
class EpisodeBatch:
    """Index tensors for B episodes. Positives are repeated to line up with their negatives."""

    relations: list[int]
    support_h: torch.Tensor      # (B, K)
    support_t: torch.Tensor      # (B, K)
    s_pos_h: torch.Tensor        # (B, Ns)
    s_pos_t: torch.Tensor
    s_neg_t: torch.Tensor
    q_pos_h: torch.Tensor        # (B, Nq), padded
    q_pos_t: torch.Tensor
    q_neg_t: torch.Tensor
    q_mask: torch.Tensor         # (B, Nq) bool

    @property
    def size(self) -> int:
        return len(self.relations)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "EpisodeBatch":
        K = {ep.K for ep in episodes}
        if len(K) != 1:
            raise ValueError("all episodes in a batch must share K")
        ns = {len(ep.support_negatives) for ep in episodes}
        if len(ns) != 1:
            raise ValueError("all episodes in a batch must share the negative ratio")

        def ids(triples, attr):
            return [getattr(t, attr) for t in triples]

        s_pos = [mtransh._paired(ep.support, ep.support_negatives) for ep in episodes]
        q_pos = [mtransh._paired(ep.query, ep.query_negatives) for ep in episodes]
        nq = max(len(q) for q in q_pos)
        qh = np.zeros((len(episodes), nq), dtype=np.int64)
        qt = np.zeros_like(qh)
        qn = np.zeros_like(qh)
        qm = np.zeros(qh.shape, dtype=bool)
        for b, (ep, pos) in enumerate(zip(episodes, q_pos)):
            n = len(pos)
            qh[b, :n] = ids(pos, "head")
            qt[b, :n] = ids(pos, "tail")
            qn[b, :n] = ids(ep.query_negatives, "tail")
            qm[b, :n] = True
        t = torch.tensor
        return cls(
            relations=[ep.relation for ep in episodes],
            support_h=t([ids(ep.support, "head") for ep in episodes]),
            support_t=t([ids(ep.support, "tail") for ep in episodes]),
            s_pos_h=t([ids(p, "head") for p in s_pos]),
            s_pos_t=t([ids(p, "tail") for p in s_pos]),
            s_neg_t=t([ids(ep.support_negatives, "tail") for ep in episodes]),
            q_pos_h=torch.from_numpy(qh), q_pos_t=torch.from_numpy(qt),
            q_neg_t=torch.from_numpy(qn), q_mask=torch.from_numpy(qm),
        )


@dataclass
class MetaForward:
    query_losses: torch.Tensor          # (B,)
    support_losses: torch.Tensor        # (B,)
    r_prime: torch.Tensor
    r_m: torch.Tensor
    P_adapted: torch.Tensor | None      # leaf in first-order mode
    beta: torch.Tensor


class GANAModel(nn.Module):
    def __init__(self, graph: KnowledgeGraph, embeddings: EmbeddingTable, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        super().__init__()
        embeddings.check_vocab(graph)
        if embeddings.d != config.d:
            raise ValueError(f"embedding dimension {embeddings.d} != config.d {config.d}")
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        d = config.d
        self.aggregator = AggregatorParams(d, rng)
        self.lstm = BiLSTMParams(2 * d, config.hidden_sizes, rng)
        self.attn = SupportAttnParams(d, self.lstm.output_size, rng)
        p = rng.normal(size=d)
        self.P_star = nn.Parameter(torch.from_numpy(p / np.linalg.norm(p)))
        ent = torch.from_numpy(embeddings.entity_vectors.copy())
        rel = torch.from_numpy(embeddings.relation_vectors.copy())
        self.entity_emb = nn.Parameter(ent, requires_grad=config.finetune_embeddings)
        self.relation_emb = nn.Parameter(rel, requires_grad=config.finetune_embeddings)
        self.nbr_rel, self.nbr_ent, self.nbr_mask = neighbor_tensors(graph)

    # -- ablation switches --------------------------------------------------
    @property
    def use_gate(self) -> bool:
        return "no_gate" not in self.config.ablation

    @property
    def use_gana(self) -> bool:
        return "no_gana" not in self.config.ablation

    @property
    def use_projection(self) -> bool:
        return "no_mtransh" not in self.config.ablation

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        """Parameters that influence the query loss under the current ablation."""
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("aggregator.") and not self.use_gana:
                continue
            if name == "P_star" and not self.use_projection:
                continue
            if name in ("entity_emb", "relation_emb") and not self.config.finetune_embeddings:
                continue
            if name == "aggregator.b_g" and not self.use_gate:
                continue
            if name == "aggregator.U2" and not self.use_gate:
                continue
            out[name] = p
        return out

    def outer_parameters(self) -> dict[str, nn.Parameter]:
        """Everything the outer optimizer steps; the hyperplane init has its own rule."""
        return {k: v for k, v in self.trainable_parameters().items() if k != "P_star"}

    # -- global stage -------------------------------------------------------
    def entity_repr(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        rel = self.relation_emb[self.nbr_rel[ids]]
        ent = self.entity_emb[self.nbr_ent[ids]]
        return aggregate(self.entity_emb[ids], rel, ent, self.nbr_mask[ids], self.aggregator,
                         self.config.activation, self.use_gate)

    def pair_repr(self, heads: torch.Tensor, tails: torch.Tensor) -> torch.Tensor:
        if not self.use_gana:
            return torch.cat([self.entity_emb[heads], self.entity_emb[tails]], dim=-1)
        hp, _, _ = self.entity_repr(heads)
        tp, _, _ = self.entity_repr(tails)
        return torch.cat([hp, tp], dim=-1)

    def relation_repr(self, support_h: torch.Tensor, support_t: torch.Tensor):
        s = self.pair_repr(support_h, support_t)
        return encode_relation(s, self.lstm, self.attn)

    # -- local stage --------------------------------------------------------
    def scores(self, h_ids, t_ids, r, P) -> torch.Tensor:
        """r, P: (B, d); ids: (B, n) -> (B, n)."""
        h = self.entity_emb[h_ids]
        t = self.entity_emb[t_ids]
        r = r.unsqueeze(-2)
        P = P.unsqueeze(-2) if P is not None else None
        return mtransh.score_triple(h, r, t, P, self.config.norm)

    def support_losses(self, batch: EpisodeBatch, r, P) -> torch.Tensor:
        pos = self.scores(batch.s_pos_h, batch.s_pos_t, r, P)
        neg = self.scores(batch.s_pos_h, batch.s_neg_t, r, P)
        return torch.clamp(pos + self.config.gamma - neg, min=0.0).sum(dim=-1)

    def query_losses(self, batch: EpisodeBatch, r, P) -> torch.Tensor:
        pos = self.scores(batch.q_pos_h, batch.q_pos_t, r, P)
        neg = self.scores(batch.q_pos_h, batch.q_neg_t, r, P)
        hinge = torch.clamp(pos + self.config.gamma - neg, min=0.0)
        return (hinge * batch.q_mask).sum(dim=-1)

    def adapt(self, batch: EpisodeBatch, r_prime: torch.Tensor, second_order: bool
              ) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
        """Inner loop. Returns ``(r_m, P_adapted, support_losses_at_init)``."""
        cfg = self.config
        B = r_prime.shape[0]
        r = r_prime
        P = self.P_star.expand(B, -1) if self.use_projection else None
        first_support = None
        for _ in range(cfg.inner_steps):
            with torch.enable_grad():
                if second_order:
                    r_in, P_in = r, P
                else:
                    r_in = r.detach().requires_grad_()
                    P_in = P.detach().requires_grad_() if P is not None else None
                ls = self.support_losses(batch, r_in, P_in)
                wrt = [r_in] + ([P_in] if P_in is not None else [])
                grads = torch.autograd.grad(ls.sum(), wrt, create_graph=second_order, allow_unused=True)
            grads = [torch.zeros_like(w) if g is None else g for g, w in zip(grads, wrt)]
            if first_support is None:
                first_support = ls.detach()
            r = mtransh.adapt_relation(r, grads[0], cfg.l_r)
            if P is not None:
                base = P if second_order else P.detach()
                P = mtransh.adapt_hyperplane(base, grads[1], cfg.l_p, cfg.unit_norm)
        return r, P, first_support

    def meta_forward(self, batch: EpisodeBatch, second_order: bool | None = None) -> MetaForward:
        second_order = self.config.second_order if second_order is None else second_order
        r_prime, beta = self.relation_repr(batch.support_h, batch.support_t)
        r_m, P, support = self.adapt(batch, r_prime, second_order)
        if P is not None and not second_order:
            P = P.detach().requires_grad_()
        q = self.query_losses(batch, r_m, P)
        return MetaForward(q, support, r_prime, r_m, P, beta)

    # -- evaluation helpers ---------------------------------------------------
    def adapt_relation_state(self, episode: Episode) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Adapted ``(r_m, P')`` for a single episode's support set (no outer graph kept)."""
        batch = EpisodeBatch.from_episodes([episode])
        with torch.no_grad():
            r_prime, _ = self.relation_repr(batch.support_h, batch.support_t)
        r_m, P, _ = self.adapt(batch, r_prime, second_order=False)
        return r_m[0].detach(), (P[0].detach() if P is not None else None)

    @torch.no_grad()
    def score_candidates(self, heads: torch.Tensor, candidates: torch.Tensor, r_m: torch.Tensor,
                         P: torch.Tensor | None) -> torch.Tensor:
        """(Q,) heads x (C,) candidates -> (Q, C) scores."""
        h = self.entity_emb[heads].unsqueeze(1)
        t = self.entity_emb[candidates].unsqueeze(0)
        return mtransh.score_triple(h, r_m, t, P, self.config.norm)

    def embedding_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.entity_emb.detach().numpy().copy(),
                              self.relation_emb.detach().numpy().copy())


def support_episode(relation: int, support: Sequence[Triple], negatives: Sequence[Triple]) -> Episode:
    return Episode(relation, list(support), [], list(negatives), [])
