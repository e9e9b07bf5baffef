"""
Contrastive prompt loss and its temperature schedule
====================================================

The temperature drops each task and is floored at ``tau_min``. The
contrastive term pulls a client's class prompt toward the closest global
representative(s) and away from the rest.
"""

import numpy as np
import torch

from reffil.losses import Group, TemperatureSchedule, dpcl_loss, sample_contrastive, temperature
from reffil.prompts import GlobalPromptSet

schedule = TemperatureSchedule(tau=0.9, tau_min=0.3, gamma=0.1, beta=0.05)
print("tau' by task:", [round(temperature(schedule, t), 3) for t in range(1, 9)])

gps = GlobalPromptSet()
reps = [np.array([1.0, 0.1, 0.0]), np.array([0.0, 1.0, 0.2]), np.array([-1.0, 0.0, 0.3])]
gps.per_class_representatives[0] = reps
gps.averaged[0] = np.mean(reps, axis=0)

anchor = torch.tensor([0.8, 0.4, 0.0], dtype=torch.float64, requires_grad=True)
for group in (Group.NEW, Group.BETWEEN):
    s = sample_contrastive(anchor, 0, gps, group)
    print(group.value, "positives:", len(s.positives), "negatives:", len(s.negatives))

# a few gradient steps on the anchor alone: the loss falls as it turns toward rep 0
opt = torch.optim.SGD([anchor], lr=0.5)
for step in range(5):
    loss = dpcl_loss(sample_contrastive(anchor, 0, gps, Group.OLD), temperature(schedule, 3))
    opt.zero_grad()
    loss.backward()
    opt.step()
    print(f"step {step}: loss {loss.item():.4f}")
