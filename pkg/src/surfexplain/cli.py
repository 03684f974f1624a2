"""Command-line interface.

Exit code families: 0 success, 1 failed check (gradcheck), 2 usage or
config error, 3 data/format error, 4 model or numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4

_THREAD_LIMITER = None


def _apply_runtime(cfg, args) -> None:
    """Precision/threads from config with CLI overrides on top."""
    from . import autodiff as ad
    precision = args.precision or cfg.train.precision
    cfg.train.precision = precision
    ad.set_default_dtype(precision)
    threads = args.threads if args.threads is not None else cfg.train.threads
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
        try:
            import threadpoolctl
            global _THREAD_LIMITER
            _THREAD_LIMITER = threadpoolctl.threadpool_limits(threads)
        except ImportError:
            print("note: threadpoolctl not installed; thread limit applies "
                  "to subprocesses only", file=sys.stderr)


def _load_run_config(args):
    from .config import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.synth.seed = args.seed
        cfg.model.seed = args.seed
        cfg.train.seed = args.seed
    _apply_runtime(cfg, args)
    return cfg


def _resolve_model_config(args):
    """Config for checkpoint-consuming commands: --config flag or the
    snapshot written next to the checkpoint."""
    from .config import ConfigError, load_config
    if args.config:
        return load_config(args.config)
    snapshot = Path(args.checkpoint).parent / "config.json"
    if snapshot.exists():
        return load_config(snapshot)
    raise ConfigError(
        "no --config given and no config.json found next to the checkpoint")


def cmd_synth(args) -> int:
    from .data import make_splits, save_manifest, synth_generate
    cfg = _load_run_config(args)
    out = Path(args.out)
    records = synth_generate(cfg.synth, out)
    train, test = make_splits(records, cfg.train.train_fraction, cfg.train.seed)
    save_manifest(train, out / "manifest_train.jsonl")
    save_manifest(test, out / "manifest_test.jsonl")
    from .config import save_config
    save_config(cfg, out / "config.json")
    print(f"wrote {len(records)} subjects ({len(train)} train / {len(test)} test) "
          f"at level {cfg.synth.high_level} to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = _load_run_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    outcome = train(cfg, args.data, args.out, resume=args.resume, quiet=args.quiet)
    print(f"checkpoint: {outcome.checkpoint}")
    print(f"log: {outcome.log_path} ({outcome.steps} steps)")
    if outcome.eval_result is not None:
        print(f"test: {outcome.eval_result}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest, ChannelStats
    from .icomesh import mesh_pyramid
    from .model import load_checkpoint
    from .train import evaluate
    cfg = _resolve_model_config(args)
    _apply_runtime(cfg, args)
    state, _ = load_checkpoint(args.checkpoint, cfg.model)
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    stats = ChannelStats.load(args.stats or Path(args.checkpoint).parent / "stats.json")
    meshes = mesh_pyramid(max(cfg.model.input_level, cfg.synth.high_level))
    result = evaluate(state, meshes, records, manifest.parent, stats)
    print(result)
    if args.out:
        Path(args.out).write_text(json.dumps(result.as_dict(), indent=2))
    return 0


def _load_high_samples(manifest_path, limit=None):
    from .data import load_manifest, load_sample
    manifest = Path(manifest_path)
    records = load_manifest(manifest)
    if limit:
        records = records[:limit]
    return [load_sample(r, manifest.parent) for r in records]


def cmd_explain(args) -> int:
    from .data import ChannelStats, apply_normalization, coarsen_mean
    from .explain import compute_map, save_map, write_colored_ply
    from .icomesh import build_icosphere, mesh_pyramid
    from .model import load_checkpoint
    cfg = _resolve_model_config(args)
    _apply_runtime(cfg, args)
    state, _ = load_checkpoint(args.checkpoint, cfg.model)
    stats = ChannelStats.load(args.stats or Path(args.checkpoint).parent / "stats.json")
    meshes = mesh_pyramid(max(cfg.model.input_level, cfg.synth.high_level))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_maps = 0
    for high in _load_high_samples(args.manifest, args.limit):
        coarse = high if high.level == cfg.model.input_level else \
            coarsen_mean(high, cfg.model.input_level)
        sample = apply_normalization(coarse, stats)
        emap = compute_map(state, sample, meshes, args.method,
                           target_class=args.target_class, layer=args.layer)
        save_map(emap, out)
        if args.ply:
            mesh = build_icosphere(emap.level)
            for hemi in ("lh", "rh"):
                write_colored_ply(mesh, emap.values[hemi],
                                  out / f"{emap.subject_id}_{args.method}_{hemi}.ply")
        n_maps += 1
    print(f"wrote {n_maps} {args.method} maps to {out}")
    return 0


def cmd_metrics(args) -> int:
    from .data import ChannelStats
    from .explain import compute_metrics
    from .icomesh import mesh_pyramid
    from .model import load_checkpoint
    cfg = _resolve_model_config(args)
    _apply_runtime(cfg, args)
    state, _ = load_checkpoint(args.checkpoint, cfg.model)
    stats = ChannelStats.load(args.stats or Path(args.checkpoint).parent / "stats.json")
    meshes = mesh_pyramid(max(cfg.model.input_level, cfg.synth.high_level))
    highs = _load_high_samples(args.manifest, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for method in args.methods.split(","):
        method = method.strip()
        report = compute_metrics(state, meshes, highs, stats, method,
                                 tau=args.tau, k_stability=args.k,
                                 seed=args.seed if args.seed is not None else 0,
                                 curves=not args.no_curves, layer=args.layer)
        path = out / f"metrics_{method}.json"
        report.save(path)
        gt = f" gt_iou={report.gt_iou:.4f}" if report.gt_iou is not None else ""
        print(f"{method}: fidelity={report.fidelity:.4f} "
              f"sparsity={report.sparsity:.4f} stability={report.stability:.4f}"
              f"{gt} -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from .gradcheck import run_gradcheck
    ad.set_default_dtype("f64")   # gradient checking is 64-bit only
    lines = []

    def emit(msg):
        lines.append(msg)
        print(msg)

    passed, _results = run_gradcheck(full_model=not args.skip_full, emit=emit)
    print("gradcheck:", "PASS" if passed else "FAIL")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0 if passed else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    from .train import ablate
    cfg = _load_run_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    rows = ablate(cfg, args.data, args.out, quiet=args.quiet)
    print(f"{'variant':<16} {'ACC':>6} {'AUC':>6} {'SEN':>6} {'SPE':>6}")
    for name, r in rows.items():
        print(f"{name:<16} {r.acc:>6.3f} {r.auc:>6.3f} {r.sen:>6.3f} {r.spe:>6.3f}")
    print(f"table: {Path(args.out) / 'ablation_table.tsv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfexplain",
        description="Explainable spherical CNN for cortical surface classification")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--precision", choices=("f32", "f64"), default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--stats", default=None,
                           help="stats.json (default: next to checkpoint)")

    p = sub.add_parser("synth", help="generate the synthetic dataset + splits")
    common(p)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="run")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ACC/AUC/SEN/SPE on a manifest")
    common(p, checkpoint=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="export explanation maps")
    common(p, checkpoint=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("attention", "cam", "gradcam"),
                   default="attention")
    p.add_argument("--layer", default="db3", help="stage for attention/gradcam")
    p.add_argument("--target-class", type=int, default=1)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--ply", action="store_true", help="also write colored meshes")
    p.add_argument("--out", default="maps")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("metrics", help="explainability metric reports")
    common(p, checkpoint=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="attention,cam,gradcam")
    p.add_argument("--layer", default="db3")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--k", type=int, default=10, help="stability perturbations")
    p.add_argument("--no-curves", action="store_true")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default="metrics")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--skip-full", action="store_true",
                   help="skip the (slower) whole-model check")
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the four loss variants")
    common(p)
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="ablation")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    from .autodiff import AutodiffError
    from .config import ConfigError
    from .data import FormatError
    from .icomesh import MeshError
    from .model import ModelError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, MeshError, FileNotFoundError) as exc:
        print(f"{args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelError, AutodiffError) as exc:
        print(f"{args.command}: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ValueError as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
