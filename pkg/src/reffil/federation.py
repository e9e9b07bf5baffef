"""Federated domain-incremental training loop.

Each task runs ``R`` rounds of: select clients, broadcast the global model and
global prompt set, train locally, FedAvg the models, re-cluster the prompts.
Between tasks the population is re-grouped into old / in-between / new
clients and grows by a fixed increment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import metrics
from .cdap import unflatten_prompt
from .config import ExperimentConfig
from .data import ClientShard, TaskData, generate_task, partition_quantity_shift
from .losses import Group, batch_dpcl, ce_loss, gpl_loss, temperature, total_loss
from .model import DTYPE, RefFiLNet, aggregation_manifest, build_model
from .prompts import GlobalPromptSet, LocalPromptGroup, build_global_prompt_set, build_lpg
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientGroupAssignment:
    old: frozenset[int]
    between: frozenset[int]
    new: frozenset[int]
    task_index: int

    def __post_init__(self):
        if self.old & self.between or self.old & self.new or self.between & self.new:
            raise ValueError("client groups must be disjoint")

    @property
    def population(self) -> frozenset[int]:
        return self.old | self.between | self.new

    @property
    def active(self) -> list[int]:
        """Clients that receive data of the current task."""
        return sorted(self.between | self.new)

    def group_of(self, client_id: int) -> Group:
        if client_id in self.between:
            return Group.BETWEEN
        if client_id in self.new:
            return Group.NEW
        if client_id in self.old:
            return Group.OLD
        raise KeyError(client_id)


@dataclass
class RoundPlan:
    round: int
    task_index: int
    selected: list[int]
    global_model_version: int


@dataclass
class RoundRecord:
    round: int
    task: int
    client: int
    group: str
    n_samples: int
    ce: float
    gpl: float
    dpcl: float
    tau_prime: float


def initial_assignment(n_clients: int) -> ClientGroupAssignment:
    """Task 1: every starting client works on the first domain."""
    return ClientGroupAssignment(frozenset(), frozenset(), frozenset(range(n_clients)), 1)


def advance_task(
    prev: ClientGroupAssignment, transition_fraction: float, increment_count: int, seed: int
) -> ClientGroupAssignment:
    """Regroup for the next task.

    ``floor(fraction * M)`` existing clients move on to the new domain while
    keeping their last shard (in-between), the rest stay on old data, and
    ``increment_count`` fresh clients join with new-domain data only.
    """
    if not 0 <= transition_fraction <= 1:
        raise ValueError("transition_fraction must lie in [0, 1]")
    if increment_count < 0:
        raise ValueError("increment_count must be >= 0")
    population = sorted(prev.population)
    m = len(population)
    n_move = min(m, math.floor(transition_fraction * m + 1e-9))
    rng = np.random.default_rng(seed)
    moving = frozenset(int(c) for c in rng.choice(population, size=n_move, replace=False)) if n_move else frozenset()
    start = max(population, default=-1) + 1
    new = frozenset(range(start, start + increment_count))
    return ClientGroupAssignment(frozenset(population) - moving, moving, new, prev.task_index + 1)


def select_clients(population: Iterable[int], count: int, seed: int) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    pool = sorted(population)
    if count > len(pool) or count < 0:
        raise ValueError(f"cannot select {count} of {len(pool)} clients")
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(pool, size=count, replace=False))


def fedavg(updates: Sequence[tuple[Mapping, float]], keys: Sequence[str] | None = None) -> dict:
    """Sample-count weighted mean of parameter maps.

    Computed as ``first + sum_i w_i (theta_i - first)`` so averaging identical
    copies is exact. ``keys`` restricts (and orders) the tensors averaged.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    first = updates[0][0]
    names = list(keys) if keys is not None else list(first)
    for params, _ in updates:
        if set(params) != set(first):
            raise ValueError("parameter manifests differ between updates")
        for name in names:
            if tuple(getattr(params[name], "shape", ())) != tuple(getattr(first[name], "shape", ())):
                raise ValueError(f"shape mismatch for {name}")
    counts = np.array([float(c) for _, c in updates])
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("sample counts must be nonnegative with a positive total")
    weights = counts / counts.sum()
    out = {}
    for name in names:
        base = first[name]
        acc = base * 1.0
        for (params, _), w in zip(updates[1:], weights[1:]):
            acc = acc + w * (params[name] - base)
        out[name] = acc
    return out


class AccessViolation(RuntimeError):
    pass


class ShardStore:
    """Holds every client's raw shards and logs who reads what.

    A client may only read shards it is entitled to under its current group;
    anything else is recorded as a violation (and raised when ``strict``).
    """

    def __init__(self, strict: bool = True):
        self.strict = strict
        self._shards: dict[tuple[int, int], ClientShard] = {}
        self._entitled: dict[int, set[int]] = {}
        self.accesses: list[tuple[int, int]] = []
        self.violations: list[tuple[int, int]] = []

    def add(self, shard: ClientShard) -> None:
        self._shards[(shard.client_id, shard.task_id)] = shard

    def held_tasks(self, client_id: int) -> list[int]:
        return sorted(t for c, t in self._shards if c == client_id)

    def entitle(self, client_id: int, tasks: Iterable[int]) -> None:
        self._entitled[client_id] = set(tasks)

    def entitlement(self, client_id: int) -> set[int]:
        return set(self._entitled.get(client_id, ()))

    def read(self, client_id: int, task_id: int) -> ClientShard:
        self.accesses.append((client_id, task_id))
        if task_id not in self._entitled.get(client_id, ()):
            self.violations.append((client_id, task_id))
            if self.strict:
                raise AccessViolation(f"client {client_id} may not read task {task_id}")
        return self._shards[(client_id, task_id)]

    def audit(self) -> dict:
        return {"accesses": len(self.accesses), "violations": len(self.violations)}


def entitled_tasks(group: Group, held: Sequence[int], task_index: int) -> list[int]:
    """Tasks a client may read: current only (new), last + current (in-between), last (old)."""
    if group is Group.NEW:
        return [task_index]
    if group is Group.BETWEEN:
        past = [t for t in held if t < task_index]
        return ([max(past)] if past else []) + [task_index]
    return [max(held)] if held else []


@dataclass
class ClientState:
    client_id: int
    task_keys: torch.Tensor | None = None


@dataclass
class LocalResult:
    params: dict
    lpg: LocalPromptGroup | None
    n_samples: int
    ce: float
    gpl: float
    dpcl: float


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start : start + batch_size])


def run_local_training(
    net: RefFiLNet,
    x: torch.Tensor,
    y: torch.Tensor,
    task_ids: torch.Tensor,
    group: Group | str,
    global_prompts: GlobalPromptSet,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    tau_prime: float,
    rng: np.random.Generator,
    use_gpl: bool = True,
    use_dpcl: bool = True,
    client_id: int = -1,
) -> LocalResult:
    """Plain SGD on CE + GPL + DPCL; instance prompts of the final epoch form the LPG.

    ``net`` must already hold the broadcast global parameters (and the
    client's task keys); it is updated in place.
    """
    if len(y) == 0:
        raise ValueError("client has no data")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    prompted = net.generator is not None
    global_prompt = None
    if prompted and use_gpl and global_prompts:
        global_prompt = torch.as_tensor(
            unflatten_prompt(global_prompts.generalized(), net.generator.prompt_len), dtype=DTYPE
        )
    dpcl_on = prompted and use_dpcl and bool(global_prompts)

    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr)
    collected: dict[int, list[np.ndarray]] = {}
    sums = np.zeros(3)
    n_batches = 0
    net.train()
    for epoch in range(epochs):
        last = epoch == epochs - 1
        for idx in _minibatches(len(y), batch_size, rng):
            xb, yb, tb = x[idx], y[idx], task_ids[idx]
            logits, flat = net.local_forward(xb, tb)
            ce = ce_loss(logits, yb)
            gpl = gpl_loss(net.global_forward(xb, global_prompt), yb) if global_prompt is not None else 0.0
            dpcl = batch_dpcl(flat, yb, global_prompts, group, tau_prime) if dpcl_on else 0.0
            loss = total_loss(ce, gpl, dpcl)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if last:
                sums += [_scalar(ce), _scalar(gpl), _scalar(dpcl)]
                n_batches += 1
                if prompted:
                    flat_np = flat.detach().numpy()
                    for k, vec in zip(yb.tolist(), flat_np):
                        collected.setdefault(k, []).append(vec)
    lpg = build_lpg(collected, client_id) if prompted else None
    means = sums / max(n_batches, 1)
    return LocalResult(
        {k: v.detach().clone() for k, v in net.state_dict().items()}, lpg, len(y), *means.tolist()
    )


@torch.no_grad()
def evaluate(net: RefFiLNet, test_sets: Sequence[TaskData], seen_tasks: Sequence[int]) -> list[float]:
    """Top-1 accuracy of the global model on each test set."""
    net.eval()
    out = []
    for data in test_sets:
        logits = net.predict(torch.as_tensor(data.x, dtype=DTYPE), seen_tasks)
        out.append(float((logits.argmax(dim=-1).numpy() == data.y).mean()))
    return out


@dataclass
class FederatedResult:
    accuracy: list[list[float]]
    rounds: list[RoundRecord]
    assignments: list[ClientGroupAssignment]
    audit: dict
    net: RefFiLNet
    global_prompts: GlobalPromptSet
    summary: dict = field(default_factory=dict)


def make_task_data(cfg: ExperimentConfig) -> tuple[list[TaskData], list[TaskData]]:
    ds = cfg.dataset
    base = derive_seed(cfg.seed, "data")
    train = [generate_task(spec, ds.samples_per_task, ds.n_classes, base, dim=ds.in_dim) for spec in ds.domains]
    test = [
        generate_task(spec, ds.test_samples_per_task, ds.n_classes, base, dim=ds.in_dim, split="test")
        for spec in ds.domains
    ]
    return train, test


def run_federated(
    cfg: ExperimentConfig,
    *,
    on_round: Callable[[int, int, GlobalPromptSet, list[RoundRecord]], None] | None = None,
    on_task_end: Callable[[int, RefFiLNet, list[float]], None] | None = None,
    store: ShardStore | None = None,
) -> FederatedResult:
    """Run every task of ``cfg`` and return the after-task accuracy matrix and logs."""
    cfg.validate()
    ds, sc, lc = cfg.dataset, cfg.schedule, cfg.loss
    prompted = cfg.method == "reffil"
    use_gpl = prompted and lc.use_gpl
    use_dpcl = prompted and lc.use_dpcl
    root = cfg.seed

    train, test = make_task_data(cfg)
    net = build_model(ds.in_dim, ds.n_classes, cfg.model, cfg.tasks, derive_seed(root, "init"), prompts=prompted)
    manifest = aggregation_manifest(net)
    agg_keys = [k for k, v in manifest.items() if v["aggregate"]]
    global_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    store = store or ShardStore()
    clients: dict[int, ClientState] = {}
    global_prompts = GlobalPromptSet()
    all_classes = list(range(ds.n_classes))

    assignment = initial_assignment(sc.initial_clients)
    assignments, records, accuracy = [], [], []
    version = 0
    global_round = 0
    for t in range(1, cfg.tasks + 1):
        if t > 1:
            assignment = advance_task(
                assignment, sc.transition_fraction, sc.increment, derive_seed(root, f"groups:{t}")
            )
        assignments.append(assignment)
        for cid, shard in zip(
            assignment.active,
            partition_quantity_shift(
                train[t - 1], len(assignment.active), ds.dirichlet_alpha, derive_seed(root, f"partition:{t}"),
                client_ids=assignment.active,
            ),
        ):
            store.add(shard)
        for cid in sorted(assignment.population):
            clients.setdefault(cid, ClientState(cid))
            store.entitle(cid, entitled_tasks(assignment.group_of(cid), store.held_tasks(cid), t))
        tau_prime = temperature(lc.schedule, t)

        for r in range(1, sc.rounds + 1):
            global_round += 1
            plan = RoundPlan(
                global_round, t, select_clients(assignment.population, sc.select, derive_seed(root, f"selection:{t}:{r}")),
                version,
            )
            updates, lpgs = [], []
            first_record = len(records)
            for cid in plan.selected:
                state = clients[cid]
                group = assignment.group_of(cid)
                shards = [store.read(cid, task) for task in sorted(store.entitlement(cid))]
                x = torch.as_tensor(np.concatenate([s.x for s in shards]), dtype=DTYPE)
                y = torch.as_tensor(np.concatenate([s.y for s in shards]), dtype=torch.long)
                tids = torch.as_tensor(np.concatenate([np.full(len(s), s.task_id) for s in shards]), dtype=torch.long)

                net.load_state_dict(global_state)
                if prompted and state.task_keys is not None:
                    net.generator.task_keys.weight.data.copy_(state.task_keys)
                res = run_local_training(
                    net, x, y, tids, group, global_prompts,
                    epochs=sc.epochs, lr=sc.lr, batch_size=sc.batch_size, tau_prime=tau_prime,
                    rng=stream(root, "batching", global_round, cid),
                    use_gpl=use_gpl, use_dpcl=use_dpcl, client_id=cid,
                )
                if prompted:
                    state.task_keys = net.generator.task_keys.weight.detach().clone()
                updates.append((res.params, res.n_samples))
                if res.lpg is not None:
                    lpgs.append(res.lpg)
                records.append(
                    RoundRecord(global_round, t, cid, group.value, res.n_samples, res.ce, res.gpl, res.dpcl, tau_prime)
                )
            if updates:
                global_state.update(fedavg(updates, agg_keys))
                version += 1
            if lpgs:
                global_prompts = build_global_prompt_set(lpgs, previous=global_prompts, classes=all_classes)
            if on_round is not None:
                on_round(global_round, t, global_prompts, records[first_record:])
            log.info("task %d round %d clients %s", t, r, plan.selected)

        net.load_state_dict(global_state)
        row = evaluate(net, test[:t], list(range(1, t + 1)))
        accuracy.append(row)
        log.info("after task %d: %s", t, " ".join(f"{a:.3f}" for a in row))
        if on_task_end is not None:
            on_task_end(t, net, row)

    return FederatedResult(
        accuracy, records, assignments, store.audit(), net, global_prompts, metrics.summarize(accuracy)
    )
