"""Command-line entry point: ``vitsplit {plan,prune,simulate,report,verify}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import cost
from .assignment import ConstraintCheck, ConstraintReport, verify_plan
from .config import ConfigError, ExperimentConfig, load_config, parse_config, serialize_config
from .data import generate_synthetic
from .estimator import fit_base_head
from .fusion import evaluate_accuracy, train_fusion
from .persistence import WeightFormatError, load_weights, read_bundle, save_weights, write_bundle
from .pruning import PruneSpec, prune_pipeline
from .simulator import (
    CURVE_CSV_COLUMNS,
    DEVICE_CSV_COLUMNS,
    FleetTemplate,
    curve_to_csv,
    curve_to_text,
    latency_curve,
    simulate,
    single_device_latency,
)
from .splitting import CostOnlyPruner, InfeasibleBudgetError, KLPruner, SplitRequest, split_loop, sub_model_profiles
from .vit import build_random

logger = logging.getLogger("vitsplit")

EXIT_OK = 0
EXIT_FAILED = 1  # infeasible request or failed constraint
EXIT_ERROR = 2  # bad input

CSV_HELP = f"""\
CSV schemas (stable; one header row, comma separated):
  simulate --csv: {', '.join(DEVICE_CSV_COLUMNS)}
      one row per device; sub_models is a space-separated id list,
      times in seconds, flops and residual_energy in FLOPs, over_budget 0/1
  report --csv:   {', '.join(CURVE_CSV_COLUMNS)}
      one row per device count; memory in MiB, max_sub_gflops in 1e9 FLOPs,
      hp is the space-separated heads-pruned vector, a_fus empty in cost mode
"""


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"seed": args.seed, "n_devices": getattr(args, "devices", None)}
    if getattr(args, "no_retrain", False):
        overrides["retrain"] = False
    return config.with_overrides(**overrides)


def _base_model(exp: ExperimentConfig, weights_path=None):
    """Base weights plus the synthetic dataset the run trains and evaluates on."""
    config = exp.vit_config()
    X, y = generate_synthetic(exp.dataset_spec())
    if weights_path:
        weights, stored = load_weights(weights_path)
        if stored != config:
            raise ConfigError(f"{weights_path} holds a different architecture than the config")
    else:
        weights = build_random(config, exp.seed)
        weights = fit_base_head(weights, config, X, y, exp.head_epochs, exp.head_lr, exp.batch_size, exp.seed)
    return config, weights, X, y


def _prune_kwargs(exp: ExperimentConfig) -> dict:
    return dict(
        retrain=exp.retrain, epochs=exp.head_epochs, lr=exp.head_lr,
        batch_size=exp.batch_size, calib_size=exp.calib_size, seed=exp.seed,
    )


def _fusion_kwargs(exp: ExperimentConfig) -> dict:
    return dict(epochs=exp.fusion_epochs, lr=exp.fusion_lr, batch_size=exp.batch_size)


def _write(text: str, path) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def cmd_plan(args) -> int:
    exp = _load(args)
    fleet = exp.fleet()
    request = SplitRequest(exp.n_devices, exp.budget_bytes, exp.hp or None, exp.L, exp.required_accuracy, exp.seed)
    fusion, a_fus = None, None
    if exp.mode == "cost":
        config = exp.vit_config()
        result = split_loop(CostOnlyPruner(config), config, fleet.devices, request)
    else:
        config, weights, X, y = _base_model(exp, args.weights)
        result = split_loop(KLPruner(weights, config, X, y, **_prune_kwargs(exp)), config, fleet.devices, request)
        fusion = train_fusion(result.sub_models, X, y, shrink=exp.shrink, seed=exp.seed,
                              n_classes=config.num_classes, **_fusion_kwargs(exp))
        a_fus = evaluate_accuracy(fusion, result.sub_models, X, y)
    extra = {"config": serialize_config(exp), "fused_accuracy": a_fus, "num_classes": config.num_classes}
    path = write_bundle(args.out, result.plan, result.sub_models, result.profiles, fleet.devices,
                        exp.budget_bytes, exp.L, fusion, extra)
    print(f"plan written to {path}")
    print(f"hp = {', '.join(map(str, result.hp))}  (after {result.iterations} round(s))")
    print(f"total memory {result.total_memory / cost.MIB:.4f} MiB of budget {exp.budget_mib} MiB")
    for p in result.profiles:
        print(f"sub-model {p.id} -> device {result.plan.mapping[p.id]}: classes {list(p.classes)}, "
              f"{p.memory} B, {p.flops} FLOPs")
    if a_fus is not None:
        print(f"fused training accuracy {a_fus:.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    exp = _load(args)
    config, weights, X, y = _base_model(exp, args.weights)
    classes = tuple(int(c) for c in args.classes.split(",")) if args.classes else tuple(range(config.num_classes))
    spec = PruneSpec(hp=args.hp, h=config.h, classes=classes)
    sub = prune_pipeline(weights, config, X, y, spec, **_prune_kwargs(exp))
    out = Path(args.out)
    if out.suffix != ".edvt":
        out = out / "submodel.edvt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(sub.weights, sub.config, out)
    c = sub.config
    print(f"pruned sub-model written to {out}")
    print(f"classes {list(sub.classes)}, hp {sub.hp}, s {sub.s:.4f}")
    print(f"d={c.d} h={c.h} head_dim={c.head_dim} c={c.c} outputs={c.num_classes}")
    print(f"params {cost.param_count(c)}, memory {cost.mem_mib(c):.4f} MiB, {cost.model_macs(c)} FLOPs")
    return EXIT_OK


def _bundle_config(bundle, args) -> ExperimentConfig:
    if args.config:
        return _load(args)
    exp = parse_config(bundle.data["config"])
    return exp.with_overrides(seed=args.seed)


def cmd_simulate(args) -> int:
    bundle = read_bundle(args.plan)
    exp = _bundle_config(bundle, args)
    subs = bundle.sub_models()
    fleet = exp.fleet(len(bundle.devices))
    fusion = bundle.fusion()
    X = y = None
    if fusion is not None and all(sm.weights is not None for sm in subs):
        X, y = generate_synthetic(exp.dataset_spec())
    report = simulate(bundle.plan(), subs, fleet, fusion, X, y, L=exp.L, shrink=exp.shrink,
                      n_classes=bundle.data.get("num_classes"))
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        _write(text, args.out)
    if args.csv:
        _write(report.to_csv(), args.csv)
    return EXIT_OK


def cmd_report(args) -> int:
    exp = _load(args)
    counts = [int(n) for n in args.counts.split(",")] if args.counts else list(exp.device_counts)
    config = exp.vit_config()
    template = FleetTemplate(
        memory_mib=exp.memory_mib[0], energy_gflop=exp.energy_gflop[0], throughput=exp.throughput[0],
        bandwidth_mbps=exp.bandwidth_mbps[0], aggregator_throughput=exp.aggregator_throughput,
    )
    kwargs = dict(L=exp.L, seed=exp.seed, shrink=exp.shrink)
    if exp.mode == "full":
        config, weights, X, y = _base_model(exp, args.weights)
        kwargs.update(weights=weights, X=X, y=y, prune_kwargs=_prune_kwargs(exp), fusion_kwargs=_fusion_kwargs(exp))
    rows = latency_curve(config, counts, template, exp.budget_mib, **kwargs)
    text = curve_to_text(rows, single_device_latency(config, template.throughput))
    sys.stdout.write(text)
    if args.out:
        _write(text, args.out)
    if args.csv:
        _write(curve_to_csv(rows), args.csv)
    return EXIT_OK


def cmd_verify(args) -> int:
    bundle = read_bundle(args.plan)
    profiles = bundle.profiles
    subs = bundle.sub_models(load=bundle.fusion() is not None)
    recomputed = sub_model_profiles(subs)
    drift = [p.id for p, q in zip(profiles, recomputed) if (p.memory, p.flops) != (q.memory, q.flops)]
    exp = parse_config(bundle.data["config"]) if "config" in bundle.data else None
    a_fus = required = None
    fusion = bundle.fusion()
    if exp is not None and fusion is not None and all(sm.weights is not None for sm in subs):
        X, y = generate_synthetic(exp.dataset_spec())
        a_fus = evaluate_accuracy(fusion, subs, X, y)
        required = exp.required_accuracy
    n_classes = bundle.data.get("num_classes")
    report = verify_plan(
        bundle.plan(), bundle.devices, recomputed, bundle.L, bundle.budget,
        required_accuracy=required, fused_accuracy=a_fus,
        classes=None if n_classes is None else range(n_classes),
    )
    report = ConstraintReport(report.checks + (
        ConstraintCheck("profiles", not drift, detail=f"stored cost differs for sub-models {drift}" if drift else ""),
    ))
    print(report)
    if report.all_passed:
        print("all constraints satisfied")
        return EXIT_OK
    print("violated: " + ", ".join(c.name for c in report.failed()), file=sys.stderr)
    return EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitsplit",
        description="Split a ViT into class-wise pruned sub-models, place them on edge devices, "
                    "fuse their embeddings and simulate distributed inference.",
        epilog=CSV_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, devices=True):
        p.add_argument("--config", help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if devices:
            p.add_argument("--devices", type=int, help="override the number of devices / sub-models")
        return p

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, epilog=CSV_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = common(add("plan", "split, prune and place; write plan.json, sub-model weights and fusion MLP"))
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.add_argument("--weights", help="base model weight file (default: seeded random body + fitted head)")
    p.add_argument("--no-retrain", action="store_true", help="skip head retraining after pruning")
    p.set_defaults(func=cmd_plan)

    p = common(add("prune", "prune one sub-model from the base model"), devices=False)
    p.add_argument("--classes", help="comma-separated class subset (default: all classes)")
    p.add_argument("--hp", type=int, default=0, help="heads' worth of width to prune (default 0)")
    p.add_argument("--out", default="submodel.edvt", help="output .edvt file or directory")
    p.add_argument("--weights", help="base model weight file")
    p.add_argument("--no-retrain", action="store_true", help="skip head retraining after pruning")
    p.set_defaults(func=cmd_prune)

    p = common(add("simulate", "simulate inference for a saved plan; print the run report"), devices=False)
    p.add_argument("--plan", default="run", help="plan directory or plan.json (default: run)")
    p.add_argument("--out", help="also write the text report here")
    p.add_argument("--csv", help="write per-device CSV rows here")
    p.set_defaults(func=cmd_simulate)

    p = common(add("report", "latency / memory / accuracy table over device counts"), devices=False)
    p.add_argument("--counts", help="comma-separated device counts (default: config device_counts)")
    p.add_argument("--out", help="also write the text table here")
    p.add_argument("--csv", help="write one CSV row per device count here")
    p.add_argument("--weights", help="base model weight file (full mode)")
    p.add_argument("--no-retrain", action="store_true", help="skip head retraining after pruning")
    p.set_defaults(func=cmd_report)

    p = add("verify", "re-check every deployment constraint of a saved plan; exit 0 iff all hold")
    p.add_argument("--plan", default="run", help="plan directory or plan.json (default: run)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: infeasible: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, WeightFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
