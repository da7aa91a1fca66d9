"""Class partitioning and the prune / budget-check / assign loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cost
from .assignment import AssignmentPlan, DeviceSpec, SubModelProfile, greedy_assign
from .pruning import PruneSpec, SubModel, prune_pipeline, pruned_config, subset_head_size
from .vit import ViTConfig, ViTWeights

logger = logging.getLogger(__name__)


class InfeasibleBudgetError(RuntimeError):
    """No head-pruning vector within bounds yields a deployable plan."""


ClassPartition = tuple[tuple[int, ...], ...]


def partition_classes(classes: Sequence[int], n: int, seed: int = 0) -> ClassPartition:
    """Seeded shuffle of ``classes`` cut into ``n`` groups whose sizes differ by at most one."""
    classes = list(classes)
    if n < 1:
        raise ValueError("need at least one group")
    if n > len(classes):
        raise ValueError(f"cannot split {len(classes)} classes into {n} non-empty groups")
    shuffled = np.random.default_rng(seed).permutation(classes)
    return tuple(tuple(sorted(int(c) for c in chunk)) for chunk in np.array_split(shuffled, n))


@dataclass(frozen=True)
class SplitRequest:
    n_devices: int
    budget: float  # bytes
    hp: tuple[int, ...] | None = None  # initial heads to prune per sub-model (default all zero)
    L: int = 1
    required_accuracy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 1:
            raise ValueError("n_devices must be >= 1")
        if self.budget <= 0:
            raise ValueError("memory budget must be positive")
        hp = (0,) * self.n_devices if self.hp is None else tuple(int(v) for v in self.hp)
        if len(hp) != self.n_devices:
            raise ValueError(f"hp has {len(hp)} entries for {self.n_devices} sub-models")
        object.__setattr__(self, "hp", hp)


Pruner = Callable[[tuple[int, ...], int], SubModel]


class CostOnlyPruner:
    """Sub-models described by their pruned config only (no weights).

    Lets the splitting loop and the simulator run at full ViT scale, where
    actual KL scoring would be far too slow for a desk machine.
    """

    def __init__(self, config: ViTConfig):
        self.config = config

    def __call__(self, classes, hp) -> SubModel:
        spec = PruneSpec(hp=hp, h=self.config.h, classes=classes)
        n_out = subset_head_size(spec.classes, self.config.num_classes)
        cfg = pruned_config(self.config, spec, num_classes=n_out)
        return SubModel(weights=None, config=cfg, classes=spec.classes, hp=hp, original_h=self.config.h)


class KLPruner:
    """Real sub-models from :func:`prune_pipeline`, memoized by (classes, hp).

    Pruning is deterministic and always restarts from the original model, so
    a cached result is identical to a recomputation.
    """

    def __init__(self, weights: ViTWeights, config: ViTConfig, X, y, **prune_kwargs):
        self.weights = weights
        self.config = config
        self.X = X
        self.y = y
        self.prune_kwargs = prune_kwargs
        self._cache: dict[tuple, SubModel] = {}

    def __call__(self, classes, hp) -> SubModel:
        key = (tuple(classes), hp)
        if key not in self._cache:
            spec = PruneSpec(hp=hp, h=self.config.h, classes=classes)
            self._cache[key] = prune_pipeline(self.weights, self.config, self.X, self.y, spec, **self.prune_kwargs)
        return self._cache[key]


def sub_model_profiles(sub_models: Sequence[SubModel]) -> list[SubModelProfile]:
    return [
        SubModelProfile(
            id=i,
            memory=cost.mem_bytes(sm.config),
            flops=cost.model_macs(sm.config),
            classes=sm.classes,
        )
        for i, sm in enumerate(sub_models)
    ]


@dataclass
class SplitResult:
    partition: ClassPartition
    sub_models: list[SubModel]
    profiles: list[SubModelProfile]
    plan: AssignmentPlan
    hp: tuple[int, ...]
    history: list[tuple[tuple[int, ...], int, bool]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def total_memory(self) -> int:
        return sum(p.memory for p in self.profiles)


def split_loop(
    pruner: Pruner,
    config: ViTConfig,
    devices: Sequence[DeviceSpec],
    request: SplitRequest,
    classes: Sequence[int] | None = None,
) -> SplitResult:
    """Prune every sub-model, check the budget, try greedy placement; repeat.

    After a failed round the sub-model with the largest memory footprint
    (lowest index on ties) that can still lose a head gets one more head
    pruned. Each round re-prunes from the original model.
    """
    classes = list(range(config.num_classes)) if classes is None else list(classes)
    n = request.n_devices
    for v in request.hp:
        if not 0 <= v < config.h:
            raise ValueError(f"initial hp values must lie in [0, {config.h}), got {request.hp}")
    partition = partition_classes(classes, n, request.seed)
    hp = list(request.hp)
    history = []
    while True:
        subs = [pruner(partition[i], hp[i]) for i in range(n)]
        profiles = sub_model_profiles(subs)
        total = sum(p.memory for p in profiles)
        plan = greedy_assign(devices, profiles, request.L) if total <= request.budget else None
        history.append((tuple(hp), total, plan is not None))
        logger.info("hp=%s total=%.3f MiB placed=%s", hp, total / cost.MIB, plan is not None)
        if plan is not None:
            return SplitResult(partition, subs, profiles, plan, tuple(hp), history)
        open_ = [i for i in range(n) if hp[i] < config.h - 1]
        if not open_:
            raise InfeasibleBudgetError(
                f"no plan fits budget {request.budget / cost.MIB:.3f} MiB on {len(devices)} devices "
                f"even with hp={tuple(hp)}"
            )
        j = max(open_, key=lambda i: profiles[i].memory)
        hp[j] += 1
