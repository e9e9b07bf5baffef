"""Synthetic domain-incremental tasks and quantity-shift client partitioning.

Every task shares one set of class prototypes (drawn once from ``base_seed``);
a task's domain is an affine transform of those prototypes: rotation by an
angle inside fixed random 2-planes, a per-feature scale and a shift, followed
by isotropic Gaussian noise. Labels never move between domains.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .seeding import stream

FAMILIES = ("affine",)


class InvalidSpecError(ValueError):
    pass


class InfeasiblePartitionError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """One incremental task's domain.

    ``angle`` is in radians. ``planes`` is the number of mutually orthogonal
    random 2-planes the rotation acts in (all of them share ``angle``).
    ``scale`` and ``shift`` are scalars or per-feature sequences.
    """

    task_id: int
    angle: float = 0.0
    scale: float | tuple[float, ...] = 1.0
    shift: float | tuple[float, ...] = 0.0
    noise_sigma: float = 0.0
    planes: int = 1
    family: str = "affine"

    def __post_init__(self):
        if isinstance(self.scale, list):
            object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if isinstance(self.shift, list):
            object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))

    def validate(self, dim: int | None = None) -> None:
        if self.family not in FAMILIES:
            raise InvalidSpecError(f"unknown transform family {self.family!r}")
        if self.task_id < 1:
            raise InvalidSpecError(f"task_id must be >= 1, got {self.task_id}")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be nonnegative")
        if self.planes < 0:
            raise InvalidSpecError("planes must be nonnegative")
        if dim is not None:
            if 2 * self.planes > dim:
                raise InvalidSpecError(f"{self.planes} rotation planes do not fit in {dim} dims")
            for name in ("scale", "shift"):
                value = getattr(self, name)
                if not np.isscalar(value) and len(value) != dim:
                    raise InvalidSpecError(f"{name} has length {len(value)}, expected {dim}")


@dataclass
class TaskData:
    """Labeled samples of one task: ``x`` is (n, D_in), ``y`` is (n,) ints in [0, K)."""

    task_id: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ClientShard:
    client_id: int
    task_id: int
    x: np.ndarray
    y: np.ndarray
    quantity_weight: float = field(default=1.0)

    def __len__(self) -> int:
        return len(self.y)


def class_prototypes(n_classes: int, dim: int, base_seed: int) -> np.ndarray:
    """Unit-Gaussian class prototypes, identical for every task under ``base_seed``."""
    return stream(base_seed, "prototypes").standard_normal((n_classes, dim))


def rotation_matrix(angle: float, dim: int, planes: int, base_seed: int) -> np.ndarray:
    """Rotation by ``angle`` in ``planes`` fixed random orthogonal 2-planes."""
    if planes == 0 or angle == 0.0:
        return np.eye(dim)
    basis, _ = np.linalg.qr(stream(base_seed, "planes").standard_normal((dim, dim)))
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for k in range(planes):
        u, w = basis[:, 2 * k], basis[:, 2 * k + 1]
        rot += (c - 1.0) * (np.outer(u, u) + np.outer(w, w)) + s * (np.outer(w, u) - np.outer(u, w))
    return rot


def apply_transform(spec: DomainSpec, points: np.ndarray, base_seed: int) -> np.ndarray:
    """Noise-free domain transform of row vectors ``points``."""
    dim = points.shape[1]
    spec.validate(dim)
    rot = rotation_matrix(spec.angle, dim, spec.planes, base_seed)
    return (points @ rot.T) * np.asarray(spec.scale) + np.asarray(spec.shift)


def generate_task(
    spec: DomainSpec,
    n_samples: int,
    n_classes: int,
    base_seed: int,
    *,
    dim: int | None = None,
    prototypes: np.ndarray | None = None,
    split: str = "train",
) -> TaskData:
    """Draw ``n_samples`` class-balanced samples from the domain described by ``spec``.

    Either ``dim`` or explicit ``prototypes`` (K, D) must be given. ``split``
    selects an independent noise stream so train and test sets never overlap.
    """
    if n_classes < 2 or n_samples < n_classes:
        raise InvalidSpecError("need n_samples >= n_classes >= 2")
    if prototypes is None:
        if dim is None:
            raise InvalidSpecError("either dim or prototypes is required")
        prototypes = class_prototypes(n_classes, dim, base_seed)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.shape[0] != n_classes:
        raise InvalidSpecError("prototype count does not match n_classes")
    centers = apply_transform(spec, prototypes, base_seed)

    rng = stream(base_seed, f"samples-{split}", spec.task_id)
    y = rng.permutation(np.arange(n_samples) % n_classes)
    x = centers[y]
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return TaskData(spec.task_id, x, y.astype(np.int64))


def apportion(total: int, weights: Sequence[float]) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights``; ties go to lower index."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = total * w
    counts = np.floor(raw).astype(np.int64)
    rest = total - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def partition_quantity_shift(
    data: TaskData, n_clients: int, dirichlet_alpha: float, seed: int, client_ids: Sequence[int] | None = None
) -> list[ClientShard]:
    """Split ``data`` across clients with Dirichlet-distributed shard sizes.

    Every client gets at least one sample and the class mix of each shard
    follows the pool (quantity shift only).
    """
    n = len(data)
    if n == 0:
        raise InfeasiblePartitionError("cannot partition an empty task")
    if n_clients < 1 or n_clients > n:
        raise InfeasiblePartitionError(f"cannot give {n_clients} clients >= 1 sample each from {n}")
    if dirichlet_alpha <= 0:
        raise InfeasiblePartitionError("dirichlet_alpha must be positive")
    if client_ids is None:
        client_ids = list(range(n_clients))
    if len(client_ids) != n_clients:
        raise InfeasiblePartitionError("client_ids length does not match n_clients")

    rng = np.random.default_rng(seed)
    proportions = rng.dirichlet(np.full(n_clients, float(dirichlet_alpha)))
    sizes = 1 + apportion(n - n_clients, proportions)

    # Stratified interleave: position of each sample within its class, scaled
    # to [0, 1), so every contiguous slice sees the pool's class mix.
    key = np.empty(n)
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        idx = rng.permutation(idx)
        key[idx] = (np.arange(len(idx)) + rng.random()) / len(idx)
    order = np.lexsort((data.y, key))

    shards = []
    start = 0
    for cid, size in zip(client_ids, sizes):
        take = order[start : start + size]
        start += size
        shards.append(ClientShard(int(cid), data.task_id, data.x[take], data.y[take], size / n))
    return shards


def dump_shards(shards: Sequence[ClientShard], directory: str | os.PathLike) -> list[str]:
    """Write one JSON-lines file per client; returns the paths written."""
    os.makedirs(directory, exist_ok=True)
    by_client: dict[int, list[ClientShard]] = {}
    for shard in shards:
        by_client.setdefault(shard.client_id, []).append(shard)
    paths = []
    for cid in sorted(by_client):
        path = os.path.join(directory, f"client_{cid}.jsonl")
        with open(path, "w") as fh:
            for shard in by_client[cid]:
                for xi, yi in zip(shard.x, shard.y):
                    fh.write(json.dumps({"client": cid, "task": shard.task_id, "x": xi.tolist(), "y": int(yi)}) + "\n")
        paths.append(path)
    return paths


def load_shards(path: str | os.PathLike) -> list[ClientShard]:
    """Read a per-client JSON-lines file back into one shard per task."""
    rows: dict[tuple[int, int], tuple[list, list]] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            xs, ys = rows.setdefault((rec["client"], rec["task"]), ([], []))
            xs.append(rec["x"])
            ys.append(rec["y"])
    return [
        ClientShard(cid, tid, np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64))
        for (cid, tid), (xs, ys) in sorted(rows.items())
    ]
