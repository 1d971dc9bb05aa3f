"""TransE pretraining of background entity/relation vectors."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from .kg_data import INV_SUFFIX, EmbeddingTable, KnowledgeGraph

logger = logging.getLogger(__name__)


class PretrainError(ValueError):
    pass


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=1, keepdim=True)
    return x / torch.where(n > 0, n, torch.ones_like(n))


def pretrain_embeddings(graph: KnowledgeGraph, d: int, epochs: int = 200, lr: float = 0.01,
                        gamma: float = 1.0, rng: np.random.Generator | int = 0,
                        batch_size: int = 256, norm: str = "L2") -> EmbeddingTable:
    """Margin-based TransE over the background triples.

    Entity vectors are kept on the unit sphere (renormalized before every
    epoch and at the end). Each positive is paired with one negative that
    replaces the head or the tail (coin flip) by a uniformly drawn entity.
    Inverse relations receive the negated forward vector; relations absent
    from the background graph keep zero rows.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    triples = np.asarray(graph.background_triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise PretrainError("cannot pretrain on an empty background graph")
    n_ent, n_rel = graph.num_entities, graph.num_relations
    bound = 6.0 / math.sqrt(d)
    ent = _unit_rows(torch.from_numpy(rng.uniform(-bound, bound, size=(n_ent, d))))
    rel = _unit_rows(torch.from_numpy(rng.uniform(-bound, bound, size=(n_rel, d))))
    ent.requires_grad_()
    rel.requires_grad_()
    p = 2 if norm == "L2" else 1

    for epoch in range(epochs):
        with torch.no_grad():
            ent.copy_(_unit_rows(ent))
        order = rng.permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = triples[order[start:start + batch_size]]
            corrupt = batch.copy()
            flip = rng.random(len(batch)) < 0.5
            replacement = rng.integers(n_ent, size=len(batch))
            corrupt[flip, 0] = replacement[flip]
            corrupt[~flip, 2] = replacement[~flip]
            b = torch.from_numpy(batch)
            c = torch.from_numpy(corrupt)
            pos = (ent[b[:, 0]] + rel[b[:, 1]] - ent[b[:, 2]]).norm(p=p, dim=1)
            neg = (ent[c[:, 0]] + rel[c[:, 1]] - ent[c[:, 2]]).norm(p=p, dim=1)
            loss = torch.clamp(gamma + pos - neg, min=0.0).sum()
            if lr:
                g_ent, g_rel = torch.autograd.grad(loss, (ent, rel))
                with torch.no_grad():
                    ent -= lr * g_ent
                    rel -= lr * g_rel
            total += loss.item()
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.debug("transe epoch %d loss %.4f", epoch, total)

    with torch.no_grad():
        ent_out = _unit_rows(ent).numpy().copy()
        rel_out = rel.detach().numpy().copy()
    used = set(triples[:, 1].tolist())
    for rid, name in enumerate(graph.relation_vocab):
        if rid in used:
            continue
        base = name[: -len(INV_SUFFIX)] if name.endswith(INV_SUFFIX) else None
        if base is not None and graph.relation_ids.get(base) in used:
            rel_out[rid] = -rel_out[graph.relation_ids[base]]
        else:
            rel_out[rid] = 0.0
    return EmbeddingTable(ent_out, rel_out)
