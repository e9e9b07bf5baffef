"""Server-side prompt sharing: local prompt groups, first-neighbor clustering, global prompt set."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


@dataclass
class LocalPromptGroup:
    """A client's per-class mean prompt vector."""

    client_id: int
    per_class: dict[int, np.ndarray]


@dataclass
class GlobalPromptSet:
    per_class_representatives: dict[int, list[np.ndarray]] = field(default_factory=dict)
    averaged: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.averaged)

    def __bool__(self) -> bool:
        return bool(self.averaged)

    def representatives(self, k: int) -> list[np.ndarray]:
        return self.per_class_representatives.get(k, [])

    def stacked_average(self) -> np.ndarray:
        """Class-averaged prompts stacked in class order, shape (n_classes_present, p*d)."""
        return np.stack([self.averaged[k] for k in self.classes])

    def generalized(self) -> np.ndarray:
        """One prompt vector shared by all classes: the mean of the per-class averages."""
        return self.stacked_average().mean(axis=0)

    def to_json(self, round_index: int, **extra) -> dict:
        classes = {
            str(k): {
                "reps": [r.tolist() for r in self.per_class_representatives[k]],
                "avg": self.averaged[k].tolist(),
            }
            for k in self.classes
        }
        return {"round": round_index, **extra, "classes": classes}

    @classmethod
    def from_json(cls, payload: Mapping) -> "GlobalPromptSet":
        out = cls()
        for k, entry in payload["classes"].items():
            out.per_class_representatives[int(k)] = [np.asarray(r, dtype=np.float64) for r in entry["reps"]]
            out.averaged[int(k)] = np.asarray(entry["avg"], dtype=np.float64)
        return out

    def save(self, path: str | os.PathLike, round_index: int, **extra) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(round_index, **extra), fh)


def build_lpg(instance_prompts: Mapping[int, Sequence[np.ndarray]], client_id: int = -1) -> LocalPromptGroup:
    """Mean prompt per class from that class's instance prompts."""
    per_class = {}
    for k in sorted(instance_prompts):
        items = instance_prompts[k]
        if len(items) == 0:
            raise ValueError(f"class {k} has no prompts")
        mean = np.mean(np.asarray(items, dtype=np.float64), axis=0)
        if not np.all(np.isfinite(mean)):
            raise ValueError(f"class {k} prompt mean is not finite")
        per_class[int(k)] = mean
    return LocalPromptGroup(client_id, per_class)


def _unit_rows(prompts) -> np.ndarray:
    x = np.asarray(prompts, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("prompts must be a list of vectors")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("cosine similarity is undefined for zero-norm or non-finite prompts")
    return x / norms[:, None]


def first_neighbors(prompts) -> np.ndarray:
    """Index of each prompt's cosine-nearest other prompt; ties go to the lowest index."""
    unit = _unit_rows(prompts)
    if len(unit) < 2:
        raise ValueError("first neighbors need at least 2 prompts")
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    return np.argmax(sim, axis=1)


def finch_adjacency(prompts) -> np.ndarray:
    """Symmetric 0/1 matrix linking m and j when j = c_m, m = c_j or c_m = c_j."""
    nn = first_neighbors(prompts)
    n = len(nn)
    adj = np.zeros((n, n), dtype=np.int8)
    idx = np.arange(n)
    adj[idx, nn] = 1
    adj[nn, idx] = 1
    adj |= (nn[:, None] == nn[None, :]).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return adj


def cluster_prompts(prompts) -> list[list[int]]:
    """First FINCH partition: connected components of the first-neighbor graph.

    Clusters are ordered by their smallest member index. A single prompt forms
    its own cluster.
    """
    n = len(prompts)
    if n == 1:
        _unit_rows(prompts)
        return [[0]]
    _, labels = connected_components(csr_matrix(finch_adjacency(prompts)), directed=False)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def select_representatives(prompts, clusters: Sequence[Sequence[int]]) -> list[np.ndarray]:
    x = np.asarray(prompts, dtype=np.float64)
    return [x[list(members)].mean(axis=0) for members in clusters]


def build_global_prompt_set(
    lpgs: Sequence[LocalPromptGroup], previous: GlobalPromptSet | None = None, classes: Sequence[int] | None = None
) -> GlobalPromptSet:
    """Cluster every class's client prompts and average the representatives.

    Classes listed in ``classes`` that no client reported this round keep the
    entry from ``previous`` when there is one.
    """
    if not lpgs:
        raise ValueError("need at least one local prompt group")
    gathered: dict[int, list[np.ndarray]] = {}
    for lpg in lpgs:
        for k, vec in lpg.per_class.items():
            gathered.setdefault(k, []).append(np.asarray(vec, dtype=np.float64))

    out = GlobalPromptSet()
    for k in sorted(gathered):
        prompts = np.stack(gathered[k])
        reps = select_representatives(prompts, cluster_prompts(prompts))
        out.per_class_representatives[k] = reps
        out.averaged[k] = np.mean(reps, axis=0)

    if previous is not None:
        wanted = set(classes) if classes is not None else set(previous.classes)
        for k in sorted(wanted - set(gathered)):
            if k in previous.averaged:
                out.per_class_representatives[k] = list(previous.per_class_representatives[k])
                out.averaged[k] = previous.averaged[k]
    return out
