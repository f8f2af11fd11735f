"""Command-line entry point: gen-data | pretrain | suite | embed | probe |
audit | report.

Exit codes: 0 success, 1 validation error (bad arguments, missing inputs,
incomplete report), 2 runtime failure. Diagnostics go to stderr; machine
output goes to files under --out. Every run writes a provenance.json
recording the effective config, seeds, and package version.

DUBCL_CACHE_DIR, when set, names a directory reusable across runs for
generated corpora (gen-data itself always writes to --out).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import apply_overrides, generator_config, load_config, suite_configs, train_config
from .probe import ProbeConfig, TASKS, dub_similarity_audit, extract_embeddings, train_probe
from .report import AblationReport, ReportCell, build_report
from .synthscenes import DatasetManifest, generate_dataset
from .trainer import load_runlog, pretrain, run_variant_suite


class UsageError(ValueError):
    pass


def _write_provenance(out_dir, command, payload):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "written_at": time.time(),
        **payload,
    }
    with open(out / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _load_cfg(args):
    cfg = load_config(args.config) if args.config else {}
    return apply_overrides(cfg, args.set or [])


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    gen = generator_config(cfg)
    seed = args.seed if args.seed is not None else cfg.get("generator", {}).get("seed", 0)
    manifest = generate_dataset(gen, seed, args.out)
    _write_provenance(args.out, "gen-data", {"config": asdict(gen), "seed": seed})
    print(
        f"wrote {len(manifest.titles)} titles / {len(manifest.shot_ids())} shots to {args.out}",
        file=sys.stderr,
    )
    return 0


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    tc = train_config(cfg, variant_id=args.variant, extra=extra)
    result = pretrain(DatasetManifest.load(args.data), tc, args.out)
    _write_provenance(args.out, "pretrain", {"config": tc.to_dict(), "data": args.data})
    print(
        f"variant {tc.variant_id}: {result.total_steps} steps -> {result.final_checkpoint}",
        file=sys.stderr,
    )
    return 0


def cmd_suite(args):
    cfg = _load_cfg(args)
    configs = suite_configs(cfg)
    if not configs:
        index_path = Path(args.out) / "index.json"
        index_path.parent.mkdir(parents=True, exist_ok=True)
        index_path.write_text("{}\n", encoding="utf-8")
        _write_provenance(args.out, "suite", {"variants": []})
        print("empty suite: wrote empty index", file=sys.stderr)
        return 0
    if args.seed is not None:
        configs = [
            type(c).from_dict({**c.to_dict(), "seed": args.seed}) for c in configs
        ]
    index_path, index = run_variant_suite(args.data, configs, args.out, jobs=args.jobs)
    _write_provenance(
        args.out,
        "suite",
        {"variants": [c.to_dict() for c in configs], "data": args.data},
    )
    failures = [v for v, r in index.items() if r["status"] != "ok"]
    for v in failures:
        print(f"variant {v} failed: {index[v]['error']}", file=sys.stderr)
    print(f"suite index: {index_path}", file=sys.stderr)
    return 2 if failures else 0


def cmd_embed(args):
    manifest = DatasetManifest.load(args.data)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    table = extract_embeddings(args.checkpoint, manifest, args.modality)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        out,
        modality=table.modality,
        vectors=table.vectors,
        shot_ids=table.shot_ids,
        languages=np.array([l or "" for l in table.languages]),
        splits=table.splits,
        **{f"label_{k}": v for k, v in table.labels.items()},
    )
    print(f"wrote {len(table.vectors)} {args.modality} embeddings to {out}", file=sys.stderr)
    return 0


def cmd_probe(args):
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {sorted(TASKS)}")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    manifest = DatasetManifest.load(args.data)
    modality = TASKS[args.task][0]
    table = extract_embeddings(args.checkpoint, manifest, modality)
    probe_cfg = ProbeConfig(kind=args.probe_kind, seed=args.seed or 0)
    result = train_probe(table, args.task, probe_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "task": result.task,
        "metric": result.metric,
        "variant": args.variant or Path(args.checkpoint).parent.name,
        "seed": probe_cfg.seed,
        "selected_epoch": result.selected_epoch,
        "val_acc": result.val_metric,
        "test_acc": result.test_metric,
        "val_by_epoch": result.val_by_epoch,
        "checkpoint": str(args.checkpoint),
    }
    name = f"{payload['variant']}__{args.task}__s{probe_cfg.seed}.json".replace("/", "_")
    with open(out / name, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_provenance(args.out, "probe", {"task": args.task, "seed": probe_cfg.seed})
    print(
        f"{args.task}: val {result.val_metric:.4f} test {result.test_metric:.4f} "
        f"(epoch {result.selected_epoch})",
        file=sys.stderr,
    )
    return 0


def cmd_audit(args):
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    manifest = DatasetManifest.load(args.data)
    audit = dub_similarity_audit(args.checkpoint, manifest, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "variant": args.variant or Path(args.checkpoint).parent.name,
        "same_snippet_mean": audit.same_snippet_mean,
        "random_pair_mean": audit.random_pair_mean,
        "gap": audit.gap,
        "n_pairs": audit.n_pairs,
        "checkpoint": str(args.checkpoint),
    }
    name = f"audit__{payload['variant']}.json".replace("/", "_")
    with open(out / name, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(
        f"audit: same {audit.same_snippet_mean:.4f} random {audit.random_pair_mean:.4f} "
        f"gap {audit.gap:+.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_report(args):
    probe_dir = Path(args.probes)
    cells = []
    for path in sorted(probe_dir.glob("*__*__s*.json")):
        with open(path, encoding="utf-8") as fh:
            p = json.load(fh)
        cells.append(
            ReportCell(
                variant=p["variant"],
                task=p["task"],
                seed=p["seed"],
                val_acc=p["val_acc"],
                test_acc=p["test_acc"],
                selected_epoch=p["selected_epoch"],
            )
        )
    if not cells:
        raise UsageError(f"no probe results found under {probe_dir}")
    audits = {}
    for path in sorted(probe_dir.glob("audit__*.json")):
        with open(path, encoding="utf-8") as fh:
            a = json.load(fh)
        audits[a["variant"]] = {
            "same_snippet_mean": a["same_snippet_mean"],
            "random_pair_mean": a["random_pair_mean"],
            "gap": a["gap"],
        }
    variants = sorted({c.variant for c in cells})
    tasks = sorted({c.task for c in cells})
    seeds = sorted({c.seed for c in cells})
    report = AblationReport(
        variants=variants, tasks=tasks, seeds=seeds, cells=cells,
        baseline=args.baseline, audits=audits,
    )
    runlogs = {}
    if args.runs:
        for runlog in sorted(Path(args.runs).glob("*/runlog.jsonl")):
            runlogs[runlog.parent.name] = load_runlog(runlog)
    paths, n_missing = build_report(report, args.out, runlogs=runlogs or None)
    _write_provenance(args.out, "report", {"cells": len(cells), "missing": n_missing})
    print(f"report written to {paths['csv']} (+table, figures)", file=sys.stderr)
    if n_missing:
        print(f"{n_missing} report cells are missing", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dubcl",
        description="Dub-augmented cross-modal contrastive learning pipeline",
    )
    parser.add_argument("--version", action="version", version=f"dubcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE",
            help="config override, repeatable",
        )
        if data:
            p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run one pretraining variant")
    common(p, data=True)
    p.add_argument("--variant", default=None, help="variant section to train")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("suite", help="train every [variant.*] in the config")
    common(p, data=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel variant processes")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("embed", help="extract frozen backbone embeddings")
    common(p, data=True, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=("audio", "video"), required=True)
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="train a frozen-embedding probe")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, help=f"one of {sorted(TASKS)}")
    p.add_argument("--probe-kind", choices=("linear", "mlp"), default=None)
    p.add_argument("--variant", default=None, help="variant label for report cells")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("audit", help="cross-language similarity audit")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="assemble CSV/table/figures from probe results")
    p.add_argument("--probes", required=True, help="directory of probe/audit JSON results")
    p.add_argument("--runs", default=None, help="suite output dir for loss-curve figures")
    p.add_argument("--baseline", default=None, help="baseline variant for deltas")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
