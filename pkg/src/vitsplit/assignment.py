"""Placement of sub-models onto memory- and energy-limited devices.

Energy is measured in FLOPs. A device with energy budget ``E`` can serve
sub-models whose summed per-sample FLOPs times the sample count ``L`` stay
within ``E``; memory works the same way without the ``L`` factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

MAX_EXACT_DEVICES = 5
MAX_EXACT_SUBMODELS = 8


class InfeasiblePlanError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    memory: float  # bytes
    energy: float  # FLOPs available for the whole workload
    throughput: float = 0.46e9  # FLOP/s

    def __post_init__(self):
        if min(self.memory, self.energy, self.throughput) <= 0:
            raise ValueError(f"device {self.id}: memory, energy and throughput must be positive")


@dataclass(frozen=True)
class SubModelProfile:
    id: int
    memory: int  # bytes
    flops: int  # per sample
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.memory <= 0 or self.flops <= 0:
            raise ValueError(f"sub-model {self.id}: memory and flops must be positive")
        object.__setattr__(self, "classes", tuple(self.classes))


@dataclass(frozen=True)
class AssignmentPlan:
    """Sub-model -> device mapping with the per-device resources left over."""

    mapping: Mapping[int, int]
    residual_memory: Mapping[int, float]
    residual_energy: Mapping[int, float]
    L: int = 1
    order: tuple[int, ...] = field(default=(), compare=False)

    @classmethod
    def build(cls, mapping, devices, sub_models, L) -> "AssignmentPlan":
        """Recompute residuals for an arbitrary mapping (may be infeasible)."""
        dev_ids = {d.id for d in devices}
        res_m = {d.id: d.memory for d in devices}
        res_e = {d.id: d.energy for d in devices}
        by_id = {m.id: m for m in sub_models}
        for sid, did in mapping.items():
            if did not in dev_ids:
                raise KeyError(f"sub-model {sid} mapped to unknown device {did}")
            if sid not in by_id:
                raise KeyError(f"unknown sub-model {sid}")
            res_m[did] -= by_id[sid].memory
            res_e[did] -= L * by_id[sid].flops
        return cls(dict(mapping), res_m, res_e, L)

    def devices_for(self, device_id) -> list[int]:
        return sorted(s for s, d in self.mapping.items() if d == device_id)

    @property
    def feasible(self) -> bool:
        return all(v >= 0 for v in self.residual_memory.values()) and all(
            v >= 0 for v in self.residual_energy.values()
        )

    def class_indicator(self, sub_models) -> dict[int, dict[int, int]]:
        """Binary class/device indicator: ``x[device][class]``."""
        by_id = {m.id: m for m in sub_models}
        out: dict[int, dict[int, int]] = {d: {} for d in self.residual_energy}
        for sid, did in self.mapping.items():
            for c in by_id[sid].classes:
                out[did][c] = out[did].get(c, 0) + 1
        return out


def greedy_assign(devices: Sequence[DeviceSpec], sub_models: Sequence[SubModelProfile], L: int = 1):
    """Heaviest-first greedy placement onto the device with most energy left.

    Sub-models are taken in decreasing ``L * flops``. Each goes to the
    remaining candidate with the largest residual energy (lowest id on ties).
    A candidate that cannot host the current sub-model is dropped for good
    and the next one is tried. Returns ``None`` once no candidates remain.
    """
    res_m = {d.id: d.memory for d in devices}
    res_e = {d.id: d.energy for d in devices}
    candidates = sorted(res_e)
    order = sorted(sub_models, key=lambda m: (-L * m.flops, m.id))
    mapping = {}
    for m in order:
        while True:
            if not candidates:
                return None
            # max() keeps the first maximum, i.e. the lowest id among ties
            j = max(candidates, key=res_e.__getitem__)
            if res_m[j] >= m.memory and res_e[j] >= L * m.flops:
                res_m[j] -= m.memory
                res_e[j] -= L * m.flops
                mapping[m.id] = j
                break
            candidates.remove(j)
    return AssignmentPlan(mapping, res_m, res_e, L, order=tuple(m.id for m in order))


def objective_value(plan: AssignmentPlan) -> float:
    """Smallest residual energy over all devices."""
    if plan is None or not plan.feasible:
        raise InfeasiblePlanError("objective is only defined for feasible plans")
    return min(plan.residual_energy.values())


def exact_assign(devices: Sequence[DeviceSpec], sub_models: Sequence[SubModelProfile], L: int = 1):
    """Best feasible mapping by exhaustive enumeration (small instances only).

    Among mappings with the best objective, the lexicographically smallest
    tuple of device positions (sub-models in id order) wins.
    """
    n_dev, n_sub = len(devices), len(sub_models)
    if n_dev > MAX_EXACT_DEVICES or n_sub > MAX_EXACT_SUBMODELS:
        raise ValueError(
            f"enumeration bound is {MAX_EXACT_DEVICES} devices x {MAX_EXACT_SUBMODELS} sub-models, "
            f"got {n_dev} x {n_sub}"
        )
    devices = sorted(devices, key=lambda d: d.id)
    subs = sorted(sub_models, key=lambda m: m.id)
    if n_sub == 0:
        return AssignmentPlan.build({}, devices, subs, L)
    # rows enumerate mappings in lexicographic order of device positions
    combos = np.indices((n_dev,) * n_sub).reshape(n_sub, -1).T
    mem = np.array([m.memory for m in subs], dtype=np.float64)
    load = np.array([L * m.flops for m in subs], dtype=np.float64)
    cap_m = np.array([d.memory for d in devices], dtype=np.float64)
    cap_e = np.array([d.energy for d in devices], dtype=np.float64)
    res_e = np.empty((len(combos), n_dev))
    ok = np.ones(len(combos), dtype=bool)
    for j in range(n_dev):
        on_j = combos == j
        res_e[:, j] = cap_e[j] - on_j @ load
        ok &= (res_e[:, j] >= 0) & (cap_m[j] - on_j @ mem >= 0)
    if not ok.any():
        return None
    objective = np.where(ok, res_e.min(axis=1), -np.inf)
    best = int(np.flatnonzero(objective == objective.max())[0])
    mapping = {m.id: devices[j].id for m, j in zip(subs, combos[best])}
    return AssignmentPlan.build(mapping, devices, subs, L)


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    passed: bool | None  # None: not evaluated
    slack: float | None = None
    detail: str = ""


@dataclass(frozen=True)
class ConstraintReport:
    checks: tuple[ConstraintCheck, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def failed(self) -> list[ConstraintCheck]:
        return [c for c in self.checks if c.passed is False]

    def __str__(self):
        lines = []
        for c in self.checks:
            status = {True: "PASS", False: "FAIL", None: "SKIP"}[c.passed]
            slack = "" if c.slack is None else f" slack={c.slack:.6g}"
            lines.append(f"{status} {c.name}{slack}{(' ' + c.detail) if c.detail else ''}")
        return "\n".join(lines)


def verify_plan(
    plan: AssignmentPlan | None,
    devices: Sequence[DeviceSpec],
    sub_models: Sequence[SubModelProfile],
    L: int,
    budget: float,
    required_accuracy: float | None = None,
    fused_accuracy: float | None = None,
    classes=None,
) -> ConstraintReport:
    """Check every placement constraint and report the slack of each."""
    checks = []
    if plan is None:
        return ConstraintReport((ConstraintCheck("plan", False, detail="no plan"),))
    known = {m.id for m in sub_models}
    unmapped = sorted(known - set(plan.mapping))
    checks.append(
        ConstraintCheck("mapping", not unmapped, detail=f"unmapped sub-models {unmapped}" if unmapped else "")
    )
    try:
        rebuilt = AssignmentPlan.build(
            {s: d for s, d in plan.mapping.items() if s in known}, devices, sub_models, L
        )
    except KeyError as exc:
        return ConstraintReport(tuple(checks) + (ConstraintCheck("mapping", False, detail=str(exc)),))
    for d in sorted(devices, key=lambda d: d.id):
        e = rebuilt.residual_energy[d.id]
        m = rebuilt.residual_memory[d.id]
        checks.append(ConstraintCheck(f"energy[device {d.id}]", e >= 0, e))
        checks.append(ConstraintCheck(f"memory[device {d.id}]", m >= 0, m))
    total = sum(m.memory for m in sub_models)
    checks.append(ConstraintCheck("budget", total <= budget, budget - total))
    if fused_accuracy is None or required_accuracy is None:
        checks.append(ConstraintCheck("accuracy", None, detail="fused accuracy not evaluated"))
    else:
        checks.append(
            ConstraintCheck("accuracy", fused_accuracy >= required_accuracy, fused_accuracy - required_accuracy)
        )
    counts: dict[int, int] = {}
    for m in sub_models:
        if m.id in plan.mapping:
            for c in m.classes:
                counts[c] = counts.get(c, 0) + 1
    universe = set(counts) if classes is None else set(classes)
    bad = sorted(c for c in universe if counts.get(c, 0) != 1)
    checks.append(
        ConstraintCheck("coverage", not bad, detail=f"classes not covered exactly once: {bad}" if bad else "")
    )
    return ConstraintReport(tuple(checks))
