"""Gated and attentive neighbor aggregator.

Each entity ``e`` with neighbors ``(r_i, e_i)`` is encoded as::

    c_i   = W1 [r_i; e_i]
    alpha = softmax(LeakyReLU(U1 . c_i))
    g     = sigmoid(U2 . sum_i alpha_i c_i + b_g)
    e'    = act(g * sum_i alpha_i c_i + (1 - g) * W2 e + b)

and a triple (h, r, t) becomes ``s = [h'; t']``.

All tensor functions accept arbitrary leading batch dimensions. Padded
neighbor slots are excluded through a boolean ``mask``; an entity with no
neighbors gets a zero attention-weighted sum.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2

ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
    "leaky_relu": lambda x: F.leaky_relu(x, LEAKY_SLOPE),
}


class ConfigurationError(ValueError):
    pass


def glorot(rng: np.random.Generator, rows: int, cols: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (rows + cols))
    return torch.from_numpy(rng.uniform(-bound, bound, size=(rows, cols)))


def glorot_vector(rng: np.random.Generator, n: int) -> torch.Tensor:
    return glorot(rng, 1, n)[0]


class AggregatorParams(nn.Module):
    def __init__(self, d: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.W1 = nn.Parameter(glorot(rng, d, 2 * d))
        self.U1 = nn.Parameter(glorot_vector(rng, d))
        self.U2 = nn.Parameter(glorot_vector(rng, d))
        self.b_g = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.W2 = nn.Parameter(glorot(rng, d, d))
        self.b = nn.Parameter(torch.zeros(d, dtype=torch.float64))


# ---------------------------------------------------------------------------
# tensor-level operations
# ---------------------------------------------------------------------------

def neighbor_codes(rel_vecs: torch.Tensor, ent_vecs: torch.Tensor, params: AggregatorParams) -> torch.Tensor:
    """(..., n, d) relation and entity vectors -> (..., n, d) codes."""
    pair = torch.cat([rel_vecs, ent_vecs], dim=-1)
    if pair.shape[-1] != params.W1.shape[1]:
        raise ConfigurationError(f"neighbor input has width {pair.shape[-1]}, W1 expects {params.W1.shape[1]}")
    return pair @ params.W1.T


def attention_weights(codes: torch.Tensor, params: AggregatorParams,
                      mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over LeakyReLU(U1 . c_i); masked slots get weight 0.

    A row whose mask is entirely False yields all-zero weights.
    """
    logits = F.leaky_relu(codes @ params.U1, LEAKY_SLOPE)
    if mask is None:
        return torch.softmax(logits, dim=-1)
    logits = logits.masked_fill(~mask, -math.inf)
    top = logits.amax(dim=-1, keepdim=True)
    top = torch.where(torch.isfinite(top), top, torch.zeros_like(top)).detach()
    w = torch.exp(logits - top) * mask
    z = w.sum(dim=-1, keepdim=True)
    return w / torch.where(z > 0, z, torch.ones_like(z))


def attended_sum(codes: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return (alpha.unsqueeze(-1) * codes).sum(dim=-2)


def gate(summary: torch.Tensor, params: AggregatorParams) -> torch.Tensor:
    return torch.sigmoid(summary @ params.U2 + params.b_g)


def fuse(entity_vecs: torch.Tensor, summary: torch.Tensor, g: torch.Tensor,
         params: AggregatorParams, activation: str = "relu") -> torch.Tensor:
    g = g.unsqueeze(-1)
    pre = g * summary + (1 - g) * (entity_vecs @ params.W2.T) + params.b
    return ACTIVATIONS[activation](pre)


def aggregate(entity_vecs: torch.Tensor, rel_vecs: torch.Tensor, ent_vecs: torch.Tensor,
              mask: torch.Tensor | None, params: AggregatorParams, activation: str = "relu",
              use_gate: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full neighborhood encoding. Returns ``(e', alpha, g)``.

    With ``use_gate=False`` the gate is pinned to 1 (pure attention aggregation).
    """
    codes = neighbor_codes(rel_vecs, ent_vecs, params)
    alpha = attention_weights(codes, params, mask)
    summary = attended_sum(codes, alpha)
    g = gate(summary, params) if use_gate else torch.ones(summary.shape[:-1], dtype=summary.dtype)
    return fuse(entity_vecs, summary, g, params, activation), alpha, g


# ---------------------------------------------------------------------------
# per-entity convenience API over an EmbeddingTable
# ---------------------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)


def encode_neighbors(neighbors: Sequence[tuple[int, int]], embeddings, params: AggregatorParams) -> torch.Tensor:
    """Codes ``W1 [r_i; e_i]`` for one neighbor list; ``(0, d)`` when empty."""
    ent = _as_tensor(embeddings.entity_vectors)
    rel = _as_tensor(embeddings.relation_vectors)
    if ent.shape[1] != params.d:
        raise ConfigurationError(f"embedding dimension {ent.shape[1]} != aggregator dimension {params.d}")
    if not neighbors:
        return torch.zeros(0, params.d, dtype=torch.float64)
    r_idx = torch.tensor([r for r, _ in neighbors])
    e_idx = torch.tensor([e for _, e in neighbors])
    return neighbor_codes(rel[r_idx], ent[e_idx], params)


def neighbor_attention(codes: torch.Tensor, params: AggregatorParams) -> torch.Tensor:
    if codes.shape[0] == 0:
        raise ValueError("empty neighborhood: attention is undefined")
    return attention_weights(codes, params)


def gate_value(codes: torch.Tensor, alpha: torch.Tensor, params: AggregatorParams) -> torch.Tensor:
    summary = attended_sum(codes, alpha) if codes.shape[0] else torch.zeros(params.d, dtype=torch.float64)
    return gate(summary, params)


def gated_fuse(entity: int, codes: torch.Tensor, alpha: torch.Tensor, g, embeddings,
               params: AggregatorParams, activation: str = "relu") -> torch.Tensor:
    e = _as_tensor(embeddings.entity_vectors)[entity]
    summary = attended_sum(codes, alpha) if codes.shape[0] else torch.zeros(params.d, dtype=torch.float64)
    return fuse(e, summary, _as_tensor(g), params, activation)


def entity_representation(entity: int, neighbors, embeddings, params: AggregatorParams,
                          activation: str = "relu", use_gate: bool = True) -> torch.Tensor:
    codes = encode_neighbors(neighbors, embeddings, params)
    if codes.shape[0]:
        alpha = neighbor_attention(codes, params)
    else:
        alpha = torch.zeros(0, dtype=torch.float64)
    g = gate_value(codes, alpha, params) if use_gate else torch.tensor(1.0, dtype=torch.float64)
    return gated_fuse(entity, codes, alpha, g, embeddings, params, activation)


def pair_representation(h: int, t: int, graph, embeddings, params: AggregatorParams,
                        activation: str = "relu", use_gate: bool = True) -> torch.Tensor:
    """``s = [h'; t']`` for the pair (h, t) using ``graph``'s neighbor index."""
    hp = entity_representation(h, graph.neighbors(h), embeddings, params, activation, use_gate)
    tp = entity_representation(t, graph.neighbors(t), embeddings, params, activation, use_gate)
    return torch.cat([hp, tp])
