"""Timestamp-level simulation of distributed inference over an edge fleet.

Per sample, every device runs its sub-models back to back, then sends each
embedding over its own capped link to the aggregator. Links of different
devices overlap; the aggregator starts fusion once the last embedding lands.
All per-sample costs are deterministic, so one sample's timeline is
representative and the energy books scale with the sample count ``L``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

from . import cost
from .assignment import AssignmentPlan, DeviceSpec, objective_value
from .fusion import evaluate_accuracy, fusion_macs, train_fusion
from .pruning import SubModel
from .splitting import CostOnlyPruner, KLPruner, SplitRequest, split_loop, sub_model_profiles
from .vit import ViTConfig, ViTWeights

logger = logging.getLogger(__name__)

DEFAULT_THROUGHPUT = 0.46e9  # FLOP/s; ViT-Base 16.86 GFLOPs in 36.94 s
DEFAULT_BANDWIDTH_MBPS = 2.0


@dataclass(frozen=True)
class Fleet:
    devices: tuple[DeviceSpec, ...]
    aggregator: DeviceSpec
    bandwidth_mbps: float | dict = DEFAULT_BANDWIDTH_MBPS

    def __post_init__(self):
        if not self.devices:
            raise ValueError("fleet needs at least one device")
        object.__setattr__(self, "devices", tuple(self.devices))
        for d in self.devices:
            if self.bandwidth(d.id) <= 0:
                raise ValueError(f"bandwidth to device {d.id} must be positive")

    def bandwidth(self, device_id) -> float:
        if isinstance(self.bandwidth_mbps, dict):
            return self.bandwidth_mbps.get(device_id, DEFAULT_BANDWIDTH_MBPS)
        return self.bandwidth_mbps


@dataclass(frozen=True)
class FleetTemplate:
    """Identical devices; ``make(n)`` builds an n-device fleet."""

    memory_mib: float = 512.0
    energy_gflop: float = 20.0
    throughput: float = DEFAULT_THROUGHPUT
    bandwidth_mbps: float = DEFAULT_BANDWIDTH_MBPS
    aggregator_throughput: float = DEFAULT_THROUGHPUT

    def make(self, n: int) -> Fleet:
        devices = tuple(
            DeviceSpec(i, self.memory_mib * cost.MIB, self.energy_gflop * 1e9, self.throughput)
            for i in range(n)
        )
        aggregator = DeviceSpec(n, self.memory_mib * cost.MIB, self.energy_gflop * 1e9, self.aggregator_throughput)
        return Fleet(devices, aggregator, self.bandwidth_mbps)


@dataclass(frozen=True)
class DeviceRun:
    device: int
    sub_models: tuple[int, ...]
    compute_s: float
    comm_s: float
    bytes_sent: int
    flops_consumed: float
    residual_energy: float
    peak_memory: int
    over_budget: bool

    @property
    def finish_s(self) -> float:
        return self.compute_s + self.comm_s


@dataclass
class RunReport:
    devices: list[DeviceRun]
    fusion_s: float
    latency_s: float
    objective: float
    L: int
    bytes_per_sample: int
    input_bytes: int
    a_fus: float | None = None
    constraints: dict[str, bool | None] = field(default_factory=dict)
    events: list[tuple[float, str, str]] = field(default_factory=list)

    def to_text(self) -> str:
        out = [
            f"samples L: {self.L}",
            f"end-to-end latency per sample: {self.latency_s:.9g} s",
            f"fusion compute: {self.fusion_s:.9g} s",
            f"objective (min residual energy, FLOPs): {self.objective:.6g}",
            f"bytes per sample: {self.bytes_per_sample} (input {self.input_bytes})",
            f"fused accuracy: {'n/a' if self.a_fus is None else f'{self.a_fus:.4f}'}",
            "device  sub_models  compute_s  comm_s  flops  residual_energy  peak_mem_bytes  over_budget",
        ]
        for r in self.devices:
            out.append(
                f"{r.device}  {','.join(map(str, r.sub_models)) or '-'}  {r.compute_s:.6f}  "
                f"{r.comm_s:.6f}  {r.flops_consumed:.6g}  {r.residual_energy:.6g}  {r.peak_memory}  {r.over_budget}"
            )
        for name, ok in self.constraints.items():
            out.append(f"constraint {name}: {ok}")
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(DEVICE_CSV_COLUMNS)
        for r in self.devices:
            writer.writerow([
                r.device, " ".join(map(str, r.sub_models)), f"{r.compute_s:.9g}", f"{r.comm_s:.9g}",
                r.bytes_sent, f"{r.flops_consumed:.9g}", f"{r.residual_energy:.9g}", r.peak_memory,
                int(r.over_budget),
            ])
        return buf.getvalue()


DEVICE_CSV_COLUMNS = (
    "device", "sub_models", "compute_s", "comm_s", "bytes_sent", "flops", "residual_energy",
    "peak_memory_bytes", "over_budget",
)
CURVE_CSV_COLUMNS = ("n_devices", "latency_s", "speedup", "total_mem_mib", "max_sub_mem_mib", "max_sub_gflops", "hp", "a_fus")


def simulate(
    plan: AssignmentPlan,
    sub_models: Sequence[SubModel],
    fleet: Fleet,
    fusion=None,
    X=None,
    y=None,
    L: int | None = None,
    shrink: float = 0.5,
    n_classes: int | None = None,
) -> RunReport:
    """Run the plan on ``fleet`` and account time, traffic and energy.

    ``fusion`` is a fitted fusion classifier or ``None``; without it the
    fusion cost is derived from the embedding widths and ``shrink``. When
    ``X``/``y`` are given and the sub-models carry weights, the fused
    accuracy is measured on them.
    """
    by_dev = {d.id: d for d in fleet.devices}
    for sid, did in plan.mapping.items():
        if did not in by_dev:
            raise KeyError(f"plan maps sub-model {sid} to unknown device {did}")
        if not 0 <= sid < len(sub_models):
            raise KeyError(f"plan references unknown sub-model {sid}")
    if L is None:
        L = len(X) if X is not None else plan.L
    profiles = sub_model_profiles(sub_models)
    runs, events = [], []
    for dev in fleet.devices:
        ids = tuple(plan.devices_for(dev.id))
        t = 0.0
        for sid in ids:
            t_end = t + profiles[sid].flops / dev.throughput
            events.append((t, f"device {dev.id}", f"start sub-model {sid}"))
            events.append((t_end, f"device {dev.id}", f"end sub-model {sid}"))
            t = t_end
        compute = t
        sent = 0
        for sid in ids:
            payload = cost.feature_payload_bytes(sub_models[sid].config.d, 1.0)
            t_end = t + cost.comm_time(payload, fleet.bandwidth(dev.id))
            events.append((t_end, f"device {dev.id}", f"delivered {payload} B from sub-model {sid}"))
            t = t_end
            sent += payload
        flops = float(L * sum(profiles[s].flops for s in ids))
        runs.append(
            DeviceRun(
                device=dev.id,
                sub_models=ids,
                compute_s=compute,
                comm_s=t - compute,
                bytes_sent=sent,
                flops_consumed=flops,
                residual_energy=dev.energy - flops,
                peak_memory=sum(profiles[s].memory for s in ids),
                over_budget=flops > dev.energy or sum(profiles[s].memory for s in ids) > dev.memory,
            )
        )
    if fusion is not None:
        macs = fusion_macs(fusion.n_features_in_, len(fusion.classes_), fusion.shrink)
    else:
        width = sum(sm.config.d for sm in sub_models)
        n_out = n_classes or len({c for sm in sub_models for c in sm.classes})
        macs = fusion_macs(width, n_out, shrink)
    fusion_s = macs / fleet.aggregator.throughput
    arrival = max(r.finish_s for r in runs)
    events.append((arrival, "aggregator", "all embeddings received"))
    events.append((arrival + fusion_s, "aggregator", "fused prediction"))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    a_fus = None
    if fusion is not None and X is not None and y is not None and all(sm.weights is not None for sm in sub_models):
        a_fus = evaluate_accuracy(fusion, sub_models, X, y)
    first = sub_models[0].config
    report = RunReport(
        devices=runs,
        fusion_s=fusion_s,
        latency_s=arrival + fusion_s,
        objective=objective_value(plan) if plan.feasible else min(r.residual_energy for r in runs),
        L=L,
        bytes_per_sample=sum(r.bytes_sent for r in runs),
        input_bytes=first.channels * first.image_size**2,
        a_fus=a_fus,
        events=events,
    )
    report.constraints = {
        "energy": all(r.flops_consumed <= by_dev[r.device].energy for r in runs),
        "memory": all(r.peak_memory <= by_dev[r.device].memory for r in runs),
    }
    return report


def single_device_latency(config: ViTConfig, throughput: float = DEFAULT_THROUGHPUT) -> float:
    """Seconds for one unsplit model to process one sample on one device."""
    return cost.model_macs(config) / throughput


@dataclass(frozen=True)
class CurveRow:
    n_devices: int
    latency_s: float
    speedup: float
    total_mem_mib: float
    max_sub_mem_mib: float
    max_sub_gflops: float
    hp: tuple[int, ...]
    a_fus: float | None


def latency_curve(
    config: ViTConfig,
    device_counts: Sequence[int],
    template: FleetTemplate,
    budget_mib: float,
    *,
    L: int = 1,
    seed: int = 0,
    shrink: float = 0.5,
    weights: ViTWeights | None = None,
    X=None,
    y=None,
    prune_kwargs: dict | None = None,
    fusion_kwargs: dict | None = None,
) -> list[CurveRow]:
    """Split, place and simulate for each device count.

    With ``weights`` and data the sub-models are really pruned and a fusion
    MLP is trained (``a_fus`` filled in); otherwise sub-models are cost-only.
    """
    original = single_device_latency(config, template.throughput)
    rows = []
    pruner = (
        KLPruner(weights, config, X, y, **(prune_kwargs or {})) if weights is not None else CostOnlyPruner(config)
    )
    for n in device_counts:
        fleet = template.make(n)
        request = SplitRequest(n_devices=n, budget=budget_mib * cost.MIB, L=L, seed=seed)
        result = split_loop(pruner, config, fleet.devices, request)
        clf = None
        if weights is not None:
            clf = train_fusion(result.sub_models, X, y, shrink=shrink, n_classes=config.num_classes, seed=seed,
                               **(fusion_kwargs or {}))
        report = simulate(result.plan, result.sub_models, fleet, clf, X, y, L=L, shrink=shrink,
                          n_classes=config.num_classes)
        rows.append(
            CurveRow(
                n_devices=n,
                latency_s=report.latency_s,
                speedup=original / report.latency_s,
                total_mem_mib=result.total_memory / cost.MIB,
                max_sub_mem_mib=max(p.memory for p in result.profiles) / cost.MIB,
                max_sub_gflops=max(p.flops for p in result.profiles) / 1e9,
                hp=result.hp,
                a_fus=report.a_fus,
            )
        )
        logger.info("N=%d latency %.4f s", n, report.latency_s)
    return rows


def curve_to_csv(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            r.n_devices, f"{r.latency_s:.9g}", f"{r.speedup:.6g}", f"{r.total_mem_mib:.6f}",
            f"{r.max_sub_mem_mib:.6f}", f"{r.max_sub_gflops:.6f}", " ".join(map(str, r.hp)),
            "" if r.a_fus is None else f"{r.a_fus:.6f}",
        ])
    return buf.getvalue()


def curve_to_text(rows: Sequence[CurveRow], original_latency: float | None = None) -> str:
    lines = []
    if original_latency is not None:
        lines.append(f"original model, one device: {original_latency:.4f} s")
    lines.append(f"{'N':>3} {'latency_s':>10} {'speedup':>8} {'total_MiB':>10} {'max_sub_MiB':>11} {'max_GFLOPs':>10}  a_fus   hp")
    for r in rows:
        acc = "  n/a " if r.a_fus is None else f"{r.a_fus:6.4f}"
        lines.append(
            f"{r.n_devices:>3} {r.latency_s:>10.4f} {r.speedup:>8.2f} {r.total_mem_mib:>10.3f} "
            f"{r.max_sub_mem_mib:>11.3f} {r.max_sub_gflops:>10.4f}  {acc}  {','.join(map(str, r.hp))}"
        )
    return "\n".join(lines) + "\n"
