"""Attentive Bi-LSTM that folds K support-pair representations into one relation vector."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .aggregator import glorot, glorot_vector


class EncoderError(ValueError):
    pass


class LSTMDirection(nn.Module):
    """Weights of one direction of one layer; gate order is (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.hidden_size = hidden_size
        self.W_ih = nn.Parameter(glorot(rng, 4 * hidden_size, input_size))
        self.W_hh = nn.Parameter(glorot(rng, 4 * hidden_size, hidden_size))
        self.bias = nn.Parameter(torch.zeros(4 * hidden_size, dtype=torch.float64))

    def run(self, xs: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        """xs: (B, K, in) -> hidden states (B, K, hidden), aligned with input positions."""
        B, K, _ = xs.shape
        h = xs.new_zeros(B, self.hidden_size)
        c = xs.new_zeros(B, self.hidden_size)
        projected = xs @ self.W_ih.T + self.bias
        outs: list[torch.Tensor] = [None] * K  # type: ignore[list-item]
        steps = range(K - 1, -1, -1) if reverse else range(K)
        for k in steps:
            z = projected[:, k] + h @ self.W_hh.T
            i, f, gc, o = z.chunk(4, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(gc)
            h = torch.sigmoid(o) * torch.tanh(c)
            outs[k] = h
        return torch.stack(outs, dim=1)


class BiLSTMParams(nn.Module):
    def __init__(self, input_size: int, hidden_sizes: tuple[int, ...], rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden_sizes = tuple(hidden_sizes)
        self.forward_layers = nn.ModuleList()
        self.backward_layers = nn.ModuleList()
        width = input_size
        for hid in hidden_sizes:
            self.forward_layers.append(LSTMDirection(width, hid, rng))
            self.backward_layers.append(LSTMDirection(width, hid, rng))
            width = 2 * hid

    @property
    def output_size(self) -> int:
        return 2 * self.hidden_sizes[-1]


class SupportAttnParams(nn.Module):
    def __init__(self, d: int, hidden_width: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W3 = nn.Parameter(glorot(rng, d, hidden_width))
        self.U3 = nn.Parameter(glorot_vector(rng, d))
        self.b_a = nn.Parameter(torch.zeros((), dtype=torch.float64))


def encode_support_sequence(S: torch.Tensor, params: BiLSTMParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the stacked Bi-LSTM over support representations.

    ``S`` is (K, 2d) or (B, K, 2d). Returns the top layer's forward and
    reverse hidden states, each (..., K, hid_top). Initial states are zero.
    """
    squeeze = S.dim() == 2
    xs = S.unsqueeze(0) if squeeze else S
    if xs.shape[1] == 0:
        raise EncoderError("support set is empty")
    fwd = bwd = None
    for f_layer, b_layer in zip(params.forward_layers, params.backward_layers):
        fwd = f_layer.run(xs)
        bwd = b_layer.run(xs, reverse=True)
        xs = torch.cat([fwd, bwd], dim=-1)
    if squeeze:
        return fwd[0], bwd[0]
    return fwd, bwd


def support_attention(fwd: torch.Tensor, bwd: torch.Tensor,
                      params: SupportAttnParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(beta, p')`` where ``p'_i = W3 [fwd_i; bwd_i]`` and ``beta = softmax(tanh(U3 . p'_i + b_a))``."""
    p = torch.cat([fwd, bwd], dim=-1)
    projected = p @ params.W3.T
    o = torch.tanh(projected @ params.U3 + params.b_a)
    return torch.softmax(o, dim=-1), projected


def relation_representation(beta: torch.Tensor, projected: torch.Tensor) -> torch.Tensor:
    return (beta.unsqueeze(-1) * projected).sum(dim=-2)


def encode_relation(S: torch.Tensor, lstm: BiLSTMParams, attn: SupportAttnParams
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    fwd, bwd = encode_support_sequence(S, lstm)
    beta, projected = support_attention(fwd, bwd, attn)
    return relation_representation(beta, projected), beta
