"""Client-wise domain adaptive prompt generator.

Prompts are built per instance from the token sequence ``I`` (n+1, d)::

    z = CCDA(MLP(LN(I)^T))            # (d, p): MLP maps n+1 -> p, CCDA mixes p
    [alpha, lam] = film(key[task])    # two d-vectors
    P = (alpha * (z + lam))^T         # (p, d)

The task key table is only read during training; inference uses the mean key
of the tasks seen so far.
"""

from __future__ import annotations

from typing import Iterable

import torch
from torch import nn


class CdapGenerator(nn.Module):
    def __init__(self, n_tokens: int, dim: int, prompt_len: int, max_tasks: int, key_dim: int = 8, hidden: int | None = None):
        super().__init__()
        self.dim, self.prompt_len, self.max_tasks = dim, prompt_len, max_tasks
        seq = n_tokens + 1
        hidden = hidden or max(seq, prompt_len) * 2
        self.ln = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(seq, hidden), nn.GELU(), nn.Linear(hidden, prompt_len))
        self.ccda = nn.Linear(prompt_len, prompt_len)
        self.task_keys = nn.Embedding(max_tasks, key_dim)
        self.film = nn.Linear(key_dim, 2 * dim)
        with torch.no_grad():
            self.film.weight.normal_(0.0, 0.02)
            self.film.bias.zero_()
            self.film.bias[:dim] = 1.0

    def modulation(self, keys: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel scale and shift, each (..., d), from key embeddings."""
        out = self.film(keys)
        return out[..., : self.dim], out[..., self.dim :]

    def base_prompt(self, tokens: torch.Tensor) -> torch.Tensor:
        """``CCDA(MLP(LN(I)^T))`` with shape (B, d, p)."""
        return self.ccda(self.mlp(self.ln(tokens).transpose(-2, -1)))

    def generate_from_key(self, tokens: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """Prompts (B, p, d) from tokens (B, n+1, d) and keys (B, d_v) or (d_v,)."""
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        z = self.base_prompt(tokens)
        alpha, lam = self.modulation(keys)
        if alpha.dim() == 1:
            alpha, lam = alpha.expand(z.shape[0], -1), lam.expand(z.shape[0], -1)
        prompts = (alpha.unsqueeze(-1) * (z + lam.unsqueeze(-1))).transpose(-2, -1)
        return prompts.squeeze(0) if squeeze else prompts

    def key(self, task_ids) -> torch.Tensor:
        ids = torch.as_tensor(task_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 1 or ids.max() > self.max_tasks):
            raise KeyError(f"unknown task id in {ids.tolist()} (table holds 1..{self.max_tasks})")
        return self.task_keys(ids - 1)

    def default_key(self, seen_tasks: Iterable[int]) -> torch.Tensor:
        """Inference key: mean embedding of the tasks seen so far."""
        seen = sorted(set(int(t) for t in seen_tasks))
        if not seen:
            raise ValueError("default key needs at least one seen task")
        return self.key(seen).mean(dim=0)

    def forward(self, tokens: torch.Tensor, task_ids) -> torch.Tensor:
        """Training-mode prompts (B, p, d); ``task_ids`` is a scalar or (B,) of ids >= 1."""
        keys = self.key(task_ids)
        return self.generate_from_key(tokens, keys)


def flatten_prompt(prompt: torch.Tensor) -> torch.Tensor:
    """Row-major flattening of the trailing (p, d) axes."""
    return prompt.reshape(*prompt.shape[:-2], prompt.shape[-2] * prompt.shape[-1])


def unflatten_prompt(vector, prompt_len: int):
    """Inverse of :func:`flatten_prompt`; accepts tensors or numpy arrays."""
    return vector.reshape(*vector.shape[:-1], prompt_len, vector.shape[-1] // prompt_len)
