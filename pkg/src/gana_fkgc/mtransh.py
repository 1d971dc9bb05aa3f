"""Hyperplane-projected translational scoring with one-step (MAML-style) adaptation.

Score of (h, r, t) under normal ``P``: ``|| proj(h) + r - proj(t) ||`` with
``proj(e) = e - (P.e) P``. The relation vector and the normal are adapted
with one gradient step on the support margin loss, then evaluated on the
query set; the shared initial normal is moved by the query gradient taken
at the adapted normal.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch


class DivergenceError(FloatingPointError):
    pass


class DegeneracyError(ArithmeticError):
    pass


class PairingError(ValueError):
    pass


def project_entity(e: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """Remove the component of ``e`` along ``P`` (``P`` assumed unit length)."""
    return e - (e * P).sum(dim=-1, keepdim=True) * P


def distance(x: torch.Tensor, norm: str = "L2") -> torch.Tensor:
    if norm == "L2":
        sq = (x * x).sum(dim=-1)
        # zero vectors get a zero gradient rather than NaN
        safe = torch.where(sq > 0, sq, torch.ones_like(sq))
        return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))
    if norm == "L1":
        return x.abs().sum(dim=-1)
    raise ValueError(f"unknown norm {norm!r}")


def score_triple(h: torch.Tensor, r: torch.Tensor, t: torch.Tensor, P: torch.Tensor | None,
                 norm: str = "L2") -> torch.Tensor:
    """Lower is better. ``P=None`` drops the projection (plain translational score)."""
    if P is not None:
        h = project_entity(h, P)
        t = project_entity(t, P)
    return distance(h + r - t, norm)


def margin_loss(positives, negatives, gamma: float) -> torch.Tensor:
    """``sum max(0, E_pos + gamma - E_neg)`` over paired scores."""
    pos = torch.as_tensor(positives, dtype=torch.float64)
    neg = torch.as_tensor(negatives, dtype=torch.float64)
    if pos.shape != neg.shape:
        raise PairingError(f"{tuple(pos.shape)} positive scores vs {tuple(neg.shape)} negative scores")
    return torch.clamp(pos + gamma - neg, min=0.0).sum()


def check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise DivergenceError(f"non-finite {what}")


def adapt_relation(r_prime: torch.Tensor, grad: torch.Tensor, l_r: float) -> torch.Tensor:
    check_finite(grad, "relation gradient")
    return r_prime - l_r * grad


def normalize(P: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    n = torch.sqrt((P * P).sum(dim=-1, keepdim=True))
    if (n <= eps).any():
        raise DegeneracyError("cannot renormalize a zero hyperplane normal")
    return P / n


def adapt_hyperplane(P_star: torch.Tensor, grad: torch.Tensor, l_p: float,
                     unit_norm: bool = True) -> torch.Tensor:
    check_finite(grad, "hyperplane gradient")
    P = P_star - l_p * grad
    return normalize(P) if unit_norm else P


def outer_update_hyperplane(P_star: torch.Tensor, grads: torch.Tensor, l_p: float,
                            unit_norm: bool = True) -> torch.Tensor:
    """Meta-step on the shared normal. ``grads`` may be (d,) or (tasks, d); rows are averaged."""
    g = grads.mean(dim=0) if grads.dim() == 2 else grads
    if l_p == 0:
        check_finite(g, "hyperplane gradient")
        return P_star.clone()  # a frozen normal must stay bit-identical; renormalizing would perturb it
    return adapt_hyperplane(P_star, g, l_p, unit_norm)


# ---------------------------------------------------------------------------
# per-episode helpers working on an EmbeddingTable
# ---------------------------------------------------------------------------

def _vecs(embeddings, ids: Sequence[int]) -> torch.Tensor:
    table = embeddings.entity_vectors
    table = table if isinstance(table, torch.Tensor) else torch.from_numpy(np.asarray(table))
    return table[torch.as_tensor(list(ids), dtype=torch.long)]


def triples_loss(positives, negatives, r: torch.Tensor, P: torch.Tensor | None, embeddings,
                 gamma: float, norm: str = "L2") -> torch.Tensor:
    """Margin loss over paired positive/negative triples for a single relation state."""
    if len(positives) != len(negatives):
        raise PairingError(f"{len(positives)} positives vs {len(negatives)} negatives")
    if not positives:
        return torch.zeros((), dtype=torch.float64)
    h = _vecs(embeddings, [t.head for t in positives])
    t_pos = _vecs(embeddings, [t.tail for t in positives])
    t_neg = _vecs(embeddings, [t.tail for t in negatives])
    h_neg = _vecs(embeddings, [t.head for t in negatives])
    return margin_loss(score_triple(h, r, t_pos, P, norm), score_triple(h_neg, r, t_neg, P, norm), gamma)


def support_loss(episode, r_prime, P, embeddings, gamma, norm="L2") -> torch.Tensor:
    return triples_loss(_paired(episode.support, episode.support_negatives),
                        episode.support_negatives, r_prime, P, embeddings, gamma, norm)


def query_loss(episode, r_m, P_adapted, embeddings, gamma, norm="L2") -> torch.Tensor:
    return triples_loss(_paired(episode.query, episode.query_negatives),
                        episode.query_negatives, r_m, P_adapted, embeddings, gamma, norm)


def _paired(positives, negatives):
    """Repeat each positive to line up with its ``len(negatives)/len(positives)`` negatives."""
    if not positives:
        return list(positives)
    if len(negatives) % len(positives):
        raise PairingError(f"{len(negatives)} negatives do not divide evenly over {len(positives)} positives")
    n = len(negatives) // len(positives)
    return [p for p in positives for _ in range(n)]


def adapt_episode(episode, r_prime: torch.Tensor, P_star: torch.Tensor, embeddings, gamma: float,
                  l_r: float, l_p: float, norm: str = "L2", unit_norm: bool = True,
                  create_graph: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """One inner step on the support loss for both the relation vector and the normal."""
    with torch.enable_grad():
        r_in = r_prime if r_prime.requires_grad else r_prime.detach().requires_grad_()
        P_in = P_star if P_star.requires_grad else P_star.detach().requires_grad_()
        loss = support_loss(episode, r_in, P_in, embeddings, gamma, norm)
        g_r, g_p = torch.autograd.grad(loss, (r_in, P_in), create_graph=create_graph, allow_unused=True)
    g_r = torch.zeros_like(r_prime) if g_r is None else g_r
    g_p = torch.zeros_like(P_star) if g_p is None else g_p
    if not create_graph:
        g_r, g_p = g_r.detach(), g_p.detach()
    return adapt_relation(r_prime, g_r, l_r), adapt_hyperplane(P_star, g_p, l_p, unit_norm)
