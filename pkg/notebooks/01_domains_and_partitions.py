"""
Rotated synthetic domains and quantity-shifted clients
======================================================

Each task is the same 6-class Gaussian mixture seen through a different
rotation. Clients get Dirichlet-sized but class-stratified shards.
"""

import math

import numpy as np

from reffil.data import DomainSpec, generate_task, partition_quantity_shift

# three domains, rotated by 0, 60 and 120 degrees in 8 planes of a 16-dim space
domains = [DomainSpec(task_id=i + 1, angle=math.radians(a), noise_sigma=0.5, planes=8) for i, a in enumerate((0, 60, 120))]
tasks = [generate_task(d, 600, 6, base_seed=0, dim=16) for d in domains]

for t in tasks:
    counts = np.bincount(t.y, minlength=6)
    print(f"task {t.task_id}: x {t.x.shape}, per-class counts {counts.tolist()}")

# class means drift between domains; the drift grows with the angle
means = [np.stack([t.x[t.y == k].mean(0) for k in range(6)]) for t in tasks]
for i in (1, 2):
    print(f"mean shift task 1 -> task {i + 1}: {np.linalg.norm(means[i] - means[0], axis=1).mean():.3f}")

# ten clients with alpha=0.5: unequal sizes, every client sees a spread of classes
shards = partition_quantity_shift(tasks[0], n_clients=10, dirichlet_alpha=0.5, seed=1)
for s in shards:
    print(f"client {s.client_id}: {len(s.y):4d} samples, weight {s.quantity_weight:.3f}, classes {sorted(set(s.y.tolist()))}")
assert sum(len(s.y) for s in shards) == 600
