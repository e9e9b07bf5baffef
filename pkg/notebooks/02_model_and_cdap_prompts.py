"""
Backbone, instance prompts and task keys
========================================

The model turns a feature vector into ``[CLS; patch tokens]``, the prompt
generator reads those tokens and emits a short prompt modulated by a learned
task key, and the prompt is spliced in right after CLS.
"""

import torch

from reffil.model import ModelConfig, aggregation_manifest, build_model

cfg = ModelConfig(n_tokens=4, dim=8, prompt_len=2)
net = build_model(in_dim=16, n_classes=6, cfg=cfg, max_tasks=3, seed=0)

x = torch.randn(5, 16, dtype=torch.float64)
tokens = net.backbone.tokenize(x)
print("tokens", tuple(tokens.shape))  # (batch, 1 + n_tokens, dim)

# same inputs, different task keys -> different prompts
p1 = net.generator(tokens, torch.full((5,), 1))
p2 = net.generator(tokens, torch.full((5,), 2))
print("prompt", tuple(p1.shape), "task 1 vs 2 differ by", float((p1 - p2).abs().max().detach()))

logits, flat = net.local_forward(x, torch.tensor([1, 1, 2, 2, 3]))
print("logits", tuple(logits.shape), "flattened prompts", tuple(flat.shape))

# at test time there is no task id; the key is the mean of the seen tasks' keys
print("inference logits", tuple(net.predict(x, seen_tasks=[1, 2]).shape))

# what the server averages: everything trainable except the private task keys
manifest = aggregation_manifest(net)
for name, info in manifest.items():
    if not info["aggregate"]:
        print("kept local / frozen:", name, info)
