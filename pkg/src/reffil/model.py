"""Backbone: trainable feature extractor, frozen tokenizer, one attention block, CLS classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .cdap import CdapGenerator, flatten_prompt

DTYPE = torch.float64


@dataclass
class ModelConfig:
    n_tokens: int = 4
    dim: int = 8
    prompt_len: int = 2
    heads: int = 2
    key_dim: int = 8
    hidden: int = 64
    mlp_ratio: int = 4


class AttentionBlock(nn.Module):
    """``LN(I' + MLP(I'))`` with ``I' = LN(MHSA(I))``."""

    def __init__(self, dim: int, heads: int = 2, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.ln2 = nn.LayerNorm(dim)

    def attention(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Multi-head self-attention output and its (B, heads, m, m) weights."""
        b, m, _ = tokens.shape
        hd = self.dim // self.heads

        def split(t):
            return t.view(b, m, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, m, self.dim)
        return self.proj(out), weights

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[-1] != self.dim:
            raise ValueError(f"token dim {tokens.shape[-1]} != {self.dim}")
        h1 = self.ln1(self.attention(tokens)[0])
        out = self.ln2(h1 + self.mlp(h1))
        return out.squeeze(0) if squeeze else out


class Backbone(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, cfg: ModelConfig):
        super().__init__()
        self.in_dim, self.n_classes = in_dim, n_classes
        self.n_tokens, self.dim = cfg.n_tokens, cfg.dim
        width = cfg.n_tokens * cfg.dim
        self.extractor = nn.Sequential(nn.Linear(in_dim, cfg.hidden), nn.GELU(), nn.Linear(cfg.hidden, width))
        self.tokenizer = nn.Linear(width, width, bias=False)
        self.tokenizer.weight.requires_grad_(False)
        self.cls_token = nn.Parameter(0.02 * torch.randn(cfg.dim))
        self.block = AttentionBlock(cfg.dim, cfg.heads, cfg.mlp_ratio)
        self.head = nn.Linear(cfg.dim, n_classes)

    def patch_tokens(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != {self.in_dim}")
        feats = self.tokenizer(self.extractor(x))
        return feats.view(*x.shape[:-1], self.n_tokens, self.dim)

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        """``[CLS; PT_1..PT_n]``: (n+1, d) for one input, (B, n+1, d) for a batch."""
        patches = self.patch_tokens(x)
        cls = self.cls_token.expand(*patches.shape[:-2], 1, self.dim)
        return torch.cat([cls, patches], dim=-2)

    def encode(self, tokens: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        """Insert prompts after CLS, run the block, classify the CLS position.

        ``prompts`` is (p, d) shared across the batch or (B, p, d) per instance.
        """
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if prompts is not None and prompts.shape[-2] > 0:
            if prompts.shape[-1] != self.dim:
                raise ValueError(f"prompt dim {prompts.shape[-1]} != token dim {self.dim}")
            if prompts.dim() == 2:
                prompts = prompts.expand(tokens.shape[0], *prompts.shape)
            tokens = torch.cat([tokens[:, :1], prompts, tokens[:, 1:]], dim=1)
        logits = self.head(self.block(tokens)[:, 0])
        return logits.squeeze(0) if squeeze else logits

    def forward(self, x: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        return self.encode(self.tokenize(x), prompts)


class RefFiLNet(nn.Module):
    """Backbone plus an optional prompt generator.

    With ``generator=None`` the network is the plain prompt-free backbone
    (the finetune baseline).
    """

    def __init__(self, backbone: Backbone, generator: CdapGenerator | None = None):
        super().__init__()
        self.backbone = backbone
        self.generator = generator

    @property
    def prompt_dim(self) -> int:
        return 0 if self.generator is None else self.generator.prompt_len * self.backbone.dim

    def local_forward(self, x: torch.Tensor, task_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Logits with instance prompts, and those prompts flattened to (B, p*d)."""
        tokens = self.backbone.tokenize(x)
        if self.generator is None:
            return self.backbone.encode(tokens), None
        prompts = self.generator(tokens, task_ids)
        return self.backbone.encode(tokens, prompts), flatten_prompt(prompts)

    def global_forward(self, x: torch.Tensor, global_prompt: torch.Tensor) -> torch.Tensor:
        return self.backbone(x, global_prompt)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, seen_tasks) -> torch.Tensor:
        """Inference logits; prompts use the default key of ``seen_tasks`` (no task id)."""
        tokens = self.backbone.tokenize(x)
        if self.generator is None:
            return self.backbone.encode(tokens)
        key = self.generator.default_key(seen_tasks)
        prompts = self.generator.generate_from_key(tokens, key)
        return self.backbone.encode(tokens, prompts)


def build_model(
    in_dim: int,
    n_classes: int,
    cfg: ModelConfig,
    max_tasks: int,
    seed: int,
    prompts: bool = True,
) -> RefFiLNet:
    """Deterministic float64 model initialization from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = Backbone(in_dim, n_classes, cfg)
        generator = None
        if prompts:
            generator = CdapGenerator(cfg.n_tokens, cfg.dim, cfg.prompt_len, max_tasks, cfg.key_dim)
        net = RefFiLNet(backbone, generator)
    return net.to(DTYPE)


def aggregation_manifest(net: nn.Module) -> dict[str, dict]:
    """Canonical tensor order with per-tensor flags.

    Task keys stay local to each client and the frozen tokenizer never
    changes, so neither is averaged.
    """
    manifest = {}
    trainable = {name for name, p in net.named_parameters() if p.requires_grad}
    for name, tensor in net.state_dict().items():
        manifest[name] = {
            "shape": list(tensor.shape),
            "trainable": name in trainable,
            "aggregate": name in trainable and not name.startswith("generator.task_keys"),
        }
    return manifest

