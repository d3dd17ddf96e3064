"""Command-line interface.

Subcommands: ``synth`` (generate the synthetic benchmark), ``caption`` (fill
captions from a captioner service), ``train``, ``eval``, ``crosseval``, and
``ablate`` (one-axis sweeps). Every command writes its outputs plus the fully
resolved configuration under ``--out`` and exits 0 only after re-reading what
it wrote. Config precedence: file < repeated ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import yaml

from .captions import caption_records, curate_captions
from .configs import (
    CaptionerEndpoint,
    CurationRules,
    SyntheticBenchConfig,
    TrainConfig,
    load_train_config,
    parse_override,
    save_train_config,
    train_config_from_flat,
    train_config_to_flat,
)
from .errors import ConfigError, DefitError
from .evaluation import CrossEvalSpec, cross_eval, evaluate
from .manifest import load_manifest, sample_few_shot, save_manifest
from .reports import emit_report, metrics_to_row, parse_report
from .synthetic import generate_synthetic_benchmark
from .trainer import load_checkpoint, read_train_log, train

_ABLATION_AXES = ("shots", "tokens", "depth", "backbone_width", "losses")


def _collect_overrides(items) -> dict:
    overrides = {}
    for item in items or []:
        key, value = parse_override(item)
        overrides[key] = value
    return overrides


def _load_synth_config(path, overrides: dict) -> SyntheticBenchConfig:
    flat = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            flat = yaml.safe_load(fh) or {}
        if not isinstance(flat, dict):
            raise ConfigError(f"config file {path} must contain a flat mapping")
    flat.update(overrides)
    known = {f.name for f in dataclasses.fields(SyntheticBenchConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown synth config key(s): {unknown}")
    try:
        return SyntheticBenchConfig(**flat)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc


def _resolved_train_config(args, overrides: dict) -> TrainConfig:
    if args.config:
        cfg = load_train_config(args.config, overrides)
    else:
        cfg = train_config_from_flat(overrides)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "device", None):
        updates["device"] = args.device
    if updates:
        flat = train_config_to_flat(cfg)
        flat.update(updates)
        cfg = train_config_from_flat(flat)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = _collect_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = _load_synth_config(args.config, overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    generate_synthetic_benchmark(cfg, out_dir)
    with open(out_dir / "synth_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(dataclasses.asdict(cfg), fh, sort_keys=True)
    manifest = load_manifest(out_dir / "manifest.jsonl")   # validates what we wrote
    print(f"wrote {len(manifest.records)} examples across "
          f"{len(manifest.class_names)} classes to {out_dir / 'manifest.jsonl'}")
    return 0


def cmd_caption(args) -> int:
    endpoint = CaptionerEndpoint(base_url=args.endpoint_url, timeout=args.timeout,
                                 retries=args.retries, auth_token=args.auth_token,
                                 **({"prompt": args.prompt} if args.prompt else {}))
    manifest = load_manifest(args.manifest)
    manifest = caption_records(manifest, endpoint, fallback=args.fallback_captions,
                               prompt=args.prompt)
    report = None
    if args.curate:
        records, report = curate_captions(manifest.records, CurationRules())
        manifest = dataclasses.replace(manifest, records=records)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = save_manifest(manifest, out_dir / "manifest.jsonl")
    with open(out_dir / "caption_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump({**dataclasses.asdict(endpoint),
                        "fallback_captions": bool(args.fallback_captions),
                        "curate": bool(args.curate)}, fh, sort_keys=True)
    if report is not None:
        with open(out_dir / "curation_report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(f"curation: kept {report['kept']}, replaced {report['replaced']} "
              f"(by rule: {report['by_rule']})")
    load_manifest(path, check_images=False)                # validates what we wrote
    print(f"wrote captioned manifest to {path}")
    return 0


def cmd_train(args) -> int:
    overrides = _collect_overrides(args.set)
    cfg = _resolved_train_config(args, overrides)
    out_dir = Path(args.out)
    cfg = train_config_from_flat({**train_config_to_flat(cfg), "out_dir": str(out_dir)})
    manifest = load_manifest(args.manifest)
    few = sample_few_shot(manifest, cfg.shots, cfg.seed)
    result = train(cfg, few)
    load_checkpoint(result.checkpoint_path)                # validates what we wrote
    read_train_log(result.log_path)
    final = result.log[-1].total if result.log else float("nan")
    print(f"trained {len(result.log)} steps; final batch loss {final:.4f}; "
          f"checkpoint at {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    adapted, cfg = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict = {}
    rows_detail: dict = {}
    for split in args.splits:
        metrics = evaluate(adapted, manifest, split, branch=args.branch)
        results[f"{manifest.name}:{split}"] = {cfg.loss_mode: metrics_to_row(metrics)}
        rows_detail[split] = {
            "top1": metrics.top1, "macro_f1": metrics.macro_f1, "auc": metrics.auc,
            "per_class": [list(r) for r in metrics.per_class],
            "auc_skipped": list(metrics.auc_skipped),
            "n_examples": metrics.n_examples,
        }
    report_path = emit_report(results, "table1", out_dir / "eval_report.tsv")
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(rows_detail, fh, indent=2, sort_keys=True)
    save_train_config(cfg, out_dir / "train_config.yaml")
    parse_report(report_path)                              # validates what we wrote
    for split, row in rows_detail.items():
        auc = "—" if row["auc"] is None else f"{row['auc']:.2f}"
        print(f"{manifest.name}:{split}  top1 {row['top1']:.2f}  "
              f"macro_f1 {row['macro_f1']:.2f}  auc {auc}")
    return 0


def cmd_crosseval(args) -> int:
    adapted, cfg = load_checkpoint(args.checkpoint)
    with open(args.spec, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    for key in ("source", "targets"):
        if key not in raw:
            raise ConfigError(f"cross-eval spec is missing {key!r}")
    targets = raw["targets"]
    if not isinstance(targets, dict) or not targets:
        raise ConfigError("cross-eval spec 'targets' must map names to manifest paths")
    spec = CrossEvalSpec(source=raw["source"], targets=tuple(targets))
    manifests = {name: load_manifest(path) for name, path in targets.items()}
    alignment = raw.get("alignment", {})
    split = raw.get("split", "test_id")
    result = cross_eval(adapted, spec, manifests, alignment, split=split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_desc = f"avg({', '.join(spec.targets)})"
    results = {result.source: {cfg.loss_mode: {"target": target_desc,
                                               "accuracy": result.average}}}
    report_path = emit_report(results, "table2", out_dir / "crosseval_report.tsv")
    with open(out_dir / "crosseval.json", "w", encoding="utf-8") as fh:
        json.dump({"source": result.source, "split": result.split,
                   "per_target": result.per_target, "average": result.average},
                  fh, indent=2, sort_keys=True)
    with open(out_dir / "crosseval_spec.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(raw, fh, sort_keys=True)
    parse_report(report_path)                              # validates what we wrote
    for name, acc in result.per_target.items():
        print(f"{result.source} -> {name}: top1 {acc:.2f}")
    print(f"average: {result.average:.2f}")
    return 0


def _ablation_configs(axis: str, values, base: TrainConfig):
    """(label, config) pairs for one sweep axis; validates before any run."""
    flat_base = train_config_to_flat(base)
    pairs = []
    if axis == "losses":
        alpha = base.weights.alpha_sp if base.weights.alpha_sp > 0 else 0.5
        beta = base.weights.beta if base.weights.beta > 0 else 0.5
        plan = [("ce", 0.0, 0.0), ("ce+sp", alpha, 0.0), ("ce+sp+con", alpha, beta)]
        for label, a, b in plan:
            flat = {**flat_base, "weights.alpha_sp": a, "weights.beta": b}
            pairs.append((label, train_config_from_flat(flat)))
        return pairs
    if not values:
        raise ConfigError(f"axis {axis!r} needs --values")
    for raw in values:
        try:
            value = int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"axis {axis!r} values must be integers, got {raw!r}")
        if axis == "shots":
            if value < 1:
                raise ConfigError(f"shots must be >= 1, got {value}")
            flat = {**flat_base, "shots": value}
        elif axis == "tokens":
            if value < 1:
                raise ConfigError(f"prompt token count must be >= 1, got {value}")
            flat = {**flat_base, "prompt_width": value}
        elif axis == "depth":
            if value < 0:
                raise ConfigError(f"prompt depth must be >= 0, got {value}")
            flat = {**flat_base, "prompt_depth": value}
        elif axis == "backbone_width":
            if value < 8 or value % 8:
                raise ConfigError(
                    f"backbone width must be a positive multiple of 8, got {value}")
            flat = dict(flat_base)
            flat.update({"backbone.text_dim": value, "backbone.vision_dim": value,
                         "backbone.joint_dim": value // 2})
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}")
        pairs.append((f"{axis}={value}", train_config_from_flat(flat)))
    return pairs


def cmd_ablate(args) -> int:
    overrides = _collect_overrides(args.set)
    base = _resolved_train_config(args, overrides)
    values = [v for chunk in (args.values or []) for v in str(chunk).split(",") if v]
    pairs = _ablation_configs(args.axis, values, base)     # validate before running
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict = {}
    sweep_rows = []
    for label, cfg in pairs:
        run_dir = out_dir / label.replace("=", "_").replace("+", "_")
        cfg = train_config_from_flat({**train_config_to_flat(cfg),
                                      "out_dir": str(run_dir)})
        few = sample_few_shot(manifest, cfg.shots, cfg.seed)
        result = train(cfg, few)
        row: dict = {}
        for split in ("test_id", "test_ood"):
            metrics = evaluate(result.adapted, manifest, split)
            row[split] = metrics_to_row(metrics)
        results[label.replace("=", " ")] = row
        sweep_rows.append({"label": label,
                           "config": train_config_to_flat(cfg),
                           "metrics": row})
    save_train_config(base, out_dir / "base_config.yaml")
    report_path = emit_report(results, "table1", out_dir / "ablation_report.tsv")
    with open(out_dir / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump(sweep_rows, fh, indent=2, sort_keys=True)
    parse_report(report_path)                              # validates what we wrote
    for label, row in results.items():
        print(f"{label}: id top1 {row['test_id']['top1']:.2f}, "
              f"ood top1 {row['test_ood']['top1']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defit",
        description="Decoupled few-shot fine-tuning for dual-encoder models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, device=True):
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")
        if device:
            p.add_argument("--device", help="torch device (default: cpu)")

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(p, device=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("caption", help="fill captions from a captioner service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--endpoint-url", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--auth-token")
    p.add_argument("--prompt", help="captioning prompt sent with each image")
    p.add_argument("--fallback-captions", action="store_true",
                   help="use the class template when the captioner is unreachable")
    p.add_argument("--curate", action="store_true",
                   help="apply the curation rules to the fetched captions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("train", help="few-shot adaptation on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one or more splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", nargs="+", default=["test_id"],
                   choices=["train", "test_id", "test_ood"])
    p.add_argument("--branch", default="invariant",
                   choices=["invariant", "spurious"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crosseval", help="evaluate a checkpoint across datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True,
                   help="YAML with source, targets {name: manifest}, alignment, split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crosseval)

    p = sub.add_parser("ablate", help="sweep one axis and tabulate the results")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", required=True, choices=_ABLATION_AXES)
    p.add_argument("--values", nargs="*",
                   help="axis values (ignored for --axis losses)")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DefitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
