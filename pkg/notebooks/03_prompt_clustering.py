"""
Server-side prompt clustering
=============================

Clients upload one averaged prompt per class. The server links each prompt
to its first neighbour (plus the two FINCH side conditions), takes connected
components, and keeps one representative per component.
"""

import numpy as np

from reffil.prompts import LocalPromptGroup, build_global_prompt_set, cluster_prompts, finch_adjacency

rng = np.random.default_rng(0)

# six clients: three from domain A, three from domain B
center_a, center_b = rng.standard_normal(16) * 3, rng.standard_normal(16) * 3
prompts = np.stack([center_a + 0.05 * rng.standard_normal(16) for _ in range(3)]
                   + [center_b + 0.05 * rng.standard_normal(16) for _ in range(3)])

print(finch_adjacency(prompts))
print("clusters:", cluster_prompts(prompts))

lpgs = [LocalPromptGroup(cid, {0: prompts[cid], 1: -prompts[cid]}) for cid in range(6)]
gps = build_global_prompt_set(lpgs)
reps = gps.representatives(0)
print(f"class 0: {len(reps)} representatives")
print("distance of each to its domain center:",
      [round(float(min(np.linalg.norm(r - center_a), np.linalg.norm(r - center_b))), 3) for r in reps])

# a round where class 1 is missing keeps last round's class-1 entry
later = build_global_prompt_set([LocalPromptGroup(9, {0: center_a})], previous=gps, classes=[0, 1])
print("classes after a partial round:", later.classes)
print("class 1 carried over unchanged:", np.array_equal(later.averaged[1], gps.averaged[1]))
