"""Training objectives: local CE, global-prompt CE, prompt contrastive loss with decaying temperature."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .prompts import GlobalPromptSet


class Group(str, Enum):
    OLD = "old"
    BETWEEN = "between"
    NEW = "new"


@dataclass(frozen=True)
class TemperatureSchedule:
    tau: float = 0.9
    tau_min: float = 0.3
    gamma: float = 0.1
    beta: float = 0.05

    def validate(self) -> None:
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0 < self.tau_min <= self.tau:
            raise ValueError(f"tau_min must lie in (0, tau], got {self.tau_min}")
        for name in ("gamma", "beta"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


def temperature(schedule: TemperatureSchedule, task_index: int) -> float:
    """Contrastive temperature for task ``task_index`` (1-based), floored at ``tau_min``."""
    if task_index < 1:
        raise ValueError("task_index starts at 1")
    s = schedule
    return max(s.tau_min, s.tau * (1.0 - (s.gamma + (task_index - 1) * s.beta)))


@dataclass
class ContrastiveSamples:
    anchor: torch.Tensor | np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


def _cosine_to(anchor: np.ndarray, others: np.ndarray) -> np.ndarray:
    a = anchor / np.linalg.norm(anchor)
    return (others @ a) / np.linalg.norm(others, axis=1)


def sample_contrastive(local_prompt, class_k: int, global_set: GlobalPromptSet, group: Group | str) -> ContrastiveSamples | None:
    """Split class ``class_k``'s global representatives into positives and negatives.

    The closest representative (two closest for in-between clients) by cosine
    similarity to ``local_prompt`` are positives. Returns ``None`` when the
    class has no representatives, meaning the contrastive term is skipped.
    """
    reps = global_set.representatives(class_k)
    if not reps:
        return None
    reps = np.stack(reps)
    anchor_np = local_prompt.detach().cpu().numpy() if isinstance(local_prompt, torch.Tensor) else np.asarray(local_prompt)
    if np.linalg.norm(anchor_np) == 0:
        raise ValueError("zero-norm anchor prompt")
    sims = _cosine_to(anchor_np, reps)
    order = np.argsort(-sims, kind="stable")
    n_pos = 2 if Group(group) is Group.BETWEEN else 1
    n_pos = min(n_pos, len(reps))
    return ContrastiveSamples(local_prompt, reps[order[:n_pos]], reps[order[n_pos:]])


def dpcl_loss(samples: ContrastiveSamples, tau_prime: float) -> torch.Tensor:
    """``-log(sum_pos e^{s/tau} / (sum_pos e^{s/tau} + sum_neg e^{s/tau}))`` with cosine ``s``.

    Differentiable in the anchor; zero when there are no negatives.
    """
    if tau_prime <= 0:
        raise ValueError("temperature must be positive")
    anchor = torch.as_tensor(samples.anchor, dtype=torch.float64)
    if float(anchor.detach().norm()) == 0.0:
        raise ValueError("zero-norm anchor prompt")
    if len(samples.negatives) == 0:
        return anchor.sum() * 0.0
    pos = torch.as_tensor(np.asarray(samples.positives), dtype=anchor.dtype)
    neg = torch.as_tensor(np.asarray(samples.negatives), dtype=anchor.dtype)
    unit = anchor / anchor.norm()
    pos_logits = (pos @ unit) / pos.norm(dim=1) / tau_prime
    neg_logits = (neg @ unit) / neg.norm(dim=1) / tau_prime
    return torch.logsumexp(torch.cat([pos_logits, neg_logits]), 0) - torch.logsumexp(pos_logits, 0)


def ce_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy of prompted logits; batch inputs are averaged."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.dim() == 1:
        return F.cross_entropy(logits.unsqueeze(0), label.view(1))
    return F.cross_entropy(logits, label)


def gpl_loss(logits_global: torch.Tensor | None, label) -> torch.Tensor | float:
    """Cross-entropy on global-prompt logits; 0 while no global prompts exist."""
    if logits_global is None:
        return 0.0
    return ce_loss(logits_global, label)


def total_loss(ce, gpl, dpcl):
    return ce + gpl + dpcl


def batch_dpcl(
    flat_prompts: torch.Tensor, labels: torch.Tensor, global_set: GlobalPromptSet, group: Group | str, tau_prime: float
) -> torch.Tensor | float:
    """Contrastive loss on per-class mean prompts of a batch, averaged over classes.

    Classes without global representatives are skipped; returns 0 when no
    class qualifies.
    """
    terms = []
    for k in torch.unique(labels).tolist():
        anchor = flat_prompts[labels == k].mean(dim=0)
        samples = sample_contrastive(anchor, k, global_set, group)
        if samples is not None:
            terms.append(dpcl_loss(samples, tau_prime))
    if not terms:
        return 0.0
    return torch.stack(terms).mean()
