"""
DCMNet Command-Line Interface

Subcommands: synth (write a synthetic DYNF scene), train, eval, ablate and inspect.
Exit codes: 0 ok, 2 configuration error (including unwritable outputs), 3 dataset error,
4 checkpoint error.
"""

import argparse
import sys
from pathlib import Path

from .config import fit_to_dataset, load_run_config
from .encoders import build_encoder_spec
from .errors import CheckpointError, ConfigError, DatasetError
from .model import (
    PRESETS,
    build_model,
    layer_details,
    layer_table,
    load_checkpoint,
    save_checkpoint,
)
from .preprocessing import (
    SyntheticSpec,
    class_summary,
    generate_synthetic,
    load_dataset,
    prepare_dataset,
    prototype_oracle,
    save_dataset,
)
from .routing import BLOCKS, DEFAULT_ROUTE_THRESHOLD, extract_paths, trace_document
from .storage import atomic_write_text, check_writable, write_json
from .training import MODALITIES, OPTIMIZERS, SUITES, evaluate, predict_scene, run_ablation, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CHECKPOINT = 4


def _banner(title: str, quiet: bool) -> None:
    if quiet:
        return
    print()
    print("=" * 60)
    print(f"  {title}")
    print("=" * 60)
    print()


def _require_file(path: str | None, what: str, error: type[Exception]) -> Path:
    if path is None:
        raise ConfigError(f"no {what} path given (flag or config file)")
    path = Path(path)
    if not path.is_file():
        raise error(f"{what.capitalize()} file not found: {path}")
    return path


def _blocks(value: str) -> tuple[str, ...]:
    blocks = tuple(b.strip().upper() for b in value.split(",") if b.strip())
    unknown = [b for b in blocks if b not in BLOCKS]
    if unknown or not blocks:
        raise argparse.ArgumentTypeError(f"blocks must be a comma list of {', '.join(BLOCKS)}")
    return blocks


def _route_threshold(value: str) -> float:
    try:
        threshold = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not 0.0 <= threshold <= 1.0:
        raise argparse.ArgumentTypeError(f"route threshold must be in [0, 1], got {threshold}")
    return threshold


def _outputs(*paths: str | Path | None) -> list[Path]:
    """Check every given output path before any compute starts."""
    return [check_writable(p) for p in paths if p is not None]


def _resolve(args: argparse.Namespace, default_preset: str = "desk"):
    """Layer preset < config file < flags."""
    model_overrides = {
        "components": getattr(args, "components", None),
        "patch_size": getattr(args, "patch_size", None),
        "channels": getattr(args, "channels", None),
        "size": getattr(args, "size", None),
        "layers": getattr(args, "layers", None),
        "gate_hidden": getattr(args, "gate_hidden", None),
        "enabled_blocks": getattr(args, "blocks", None),
        "attention_kind": getattr(args, "attention", None),
        "router_mode": getattr(args, "router", None),
    }
    train_overrides = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "optimizer": getattr(args, "optimizer", None),
        "seed": getattr(args, "seed", None),
        "noise_sigma": getattr(args, "noise_sigma", None),
        "augment": False if getattr(args, "no_augment", False) else None,
        "modality": getattr(args, "modality", None),
    }
    path_overrides = {
        "dataset": getattr(args, "dataset", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "report_dir": getattr(args, "output_dir", None),
    }
    return load_run_config(
        getattr(args, "config", None),
        getattr(args, "preset", None),
        model_overrides,
        train_overrides,
        path_overrides,
        default_preset=default_preset,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> None:
    spec = SyntheticSpec(
        num_classes=args.classes,
        height=args.height,
        width=args.width,
        bands=args.bands,
        lidar_channels=args.lidar_channels,
        block_size=args.block_size,
        train_per_class=args.train_per_class,
        spectral_noise=args.spectral_noise,
        height_noise=args.height_noise,
        unlabeled_fraction=args.unlabeled_fraction,
        seed=args.seed,
    )
    _outputs(args.output)
    if not args.quiet:
        print(f"[*] Generating {spec.height}x{spec.width} scene with {spec.num_classes} classes")
    cube = generate_synthetic(spec)
    path = save_dataset(cube, args.output)

    summary = class_summary(cube)
    print(f"{'Class':>6} {'Train':>8} {'Test':>8} {'Total':>8}")
    for row in summary.iter_rows(named=True):
        print(f"{row['class']:>6} {row['train']:>8} {row['test']:>8} {row['total']:>8}")
    print(f"{'Total':>6} {summary['train'].sum():>8} {summary['test'].sum():>8} {summary['total'].sum():>8}")

    hsi_only = prototype_oracle(cube, use_lidar=False)
    joint = prototype_oracle(cube, use_lidar=True)
    print(f"[+] Prototype oracle OA: HSI only {hsi_only:.2%}, HSI+LiDAR {joint:.2%}")
    if not args.quiet:
        print(f"[+] Dataset saved: {path}")


def cmd_train(args: argparse.Namespace) -> None:
    run = _resolve(args)
    build_encoder_spec(run.model)
    dataset_path = _require_file(run.paths.dataset, "dataset", DatasetError)
    if run.paths.checkpoint is None:
        raise ConfigError("no checkpoint output path given (--checkpoint or config paths.checkpoint)")
    checkpoint_path = Path(run.paths.checkpoint)
    loss_log = Path(args.loss_log) if args.loss_log else checkpoint_path.with_suffix(".loss.json")
    _outputs(checkpoint_path, loss_log)

    cube = load_dataset(dataset_path)
    model_cfg = fit_to_dataset(run.model, cube)
    model = build_model(model_cfg, run.train.seed)
    if not args.quiet:
        print(f"[+] Loaded {dataset_path.name}: {cube.height}x{cube.width}, {cube.bands} bands")
        print(f"[*] Model has {model.parameter_count():,} parameters")

    prepared = prepare_dataset(cube, model_cfg.components, model_cfg.patch_size)
    model.preprocessor = prepared.preprocessor
    model, history = train(model, prepared.train, run.train, quiet=args.quiet)

    save_checkpoint(model, checkpoint_path)
    write_json(
        loss_log,
        {"config": {**run.to_dict(), "model": model_cfg.to_dict()}, **history.to_dict()},
    )
    if not args.quiet:
        print(f"[+] Checkpoint saved: {checkpoint_path}")
        print(f"[+] Loss history saved: {loss_log}")


def _load_eval_inputs(args: argparse.Namespace):
    checkpoint_path = _require_file(args.checkpoint, "checkpoint", CheckpointError)
    dataset_path = _require_file(args.dataset, "dataset", DatasetError)
    model = load_checkpoint(checkpoint_path)
    cube = load_dataset(dataset_path)
    config = model.config
    if (cube.bands, cube.lidar_channels, cube.num_classes) != (
        config.bands,
        config.lidar_channels,
        config.num_classes,
    ):
        raise CheckpointError(
            f"checkpoint expects {config.bands} bands, {config.lidar_channels} LiDAR channel(s) and "
            f"{config.num_classes} classes; {dataset_path.name} has {cube.bands}, "
            f"{cube.lidar_channels} and {cube.num_classes}"
        )
    if model.preprocessor is None:
        print("[!] Checkpoint has no preprocessing; refitting on the dataset's train split")
        model.preprocessor = prepare_dataset(cube, config.components, config.patch_size).preprocessor
    return model, cube, checkpoint_path, dataset_path


def cmd_eval(args: argparse.Namespace) -> None:
    output = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".eval.json")
    _outputs(output, args.routes, args.html, args.map)

    model, cube, checkpoint_path, dataset_path = _load_eval_inputs(args)
    patches = model.preprocessor.patches(cube, args.split)
    if not args.quiet:
        print(f"[*] Evaluating {len(patches)} {args.split} samples")
    report = evaluate(model, patches, args.modality)
    summary = extract_paths(report.trace, args.route_threshold, report.labels)

    print(f"[+] OA {report.oa:.2%}  AA {report.aa:.2%}  Kappa {report.kappa:.4f}")
    write_json(
        output,
        {
            "dataset": str(dataset_path),
            "checkpoint": str(checkpoint_path),
            "split": args.split,
            "modality": args.modality,
            "config": model.config.to_dict(),
            **report.to_dict(),
        },
    )
    if not args.quiet:
        print(f"[+] Evaluation report saved: {output}")

    if args.routes:
        write_json(
            args.routes, trace_document(report.trace, summary, report.labels, report.predictions)
        )
        if not args.quiet:
            print(f"[+] Routing trace saved: {args.routes}")

    label_map = None
    if args.map or args.html:
        label_map = predict_scene(model, cube)
    if args.map:
        from .charts import label_map_to_png

        label_map_to_png(label_map, args.map)
        if not args.quiet:
            print(f"[+] Classification map saved: {args.map}")
    if args.html:
        from .report import write_eval_report

        write_eval_report(
            args.html,
            report,
            config=model.config.to_dict(),
            summary=summary,
            label_map=label_map,
            title=f"DCMNet evaluation: {dataset_path.name} ({args.split})",
            quiet=args.quiet,
        )


def cmd_ablate(args: argparse.Namespace) -> None:
    if args.suite not in SUITES:
        raise ConfigError(f"Unknown ablation suite: {args.suite!r} (expected one of {', '.join(SUITES)})")
    run = _resolve(args)
    build_encoder_spec(run.model)
    dataset_path = _require_file(run.paths.dataset, "dataset", DatasetError)
    output_dir = Path(run.paths.report_dir or ".")
    _outputs(
        *(output_dir / f"ablation_{args.suite}.{ext}" for ext in ("csv", "json")),
        output_dir / f"ablation_{args.suite}.html" if args.html else None,
    )

    cube = load_dataset(dataset_path)
    model_cfg = fit_to_dataset(run.model, cube)
    result = run_ablation(
        args.suite, model_cfg, run.train, cube, workers=args.workers, quiet=args.quiet
    )

    csv_path = atomic_write_text(output_dir / f"ablation_{args.suite}.csv", result.table.write_csv())
    json_path = write_json(
        output_dir / f"ablation_{args.suite}.json",
        {
            "suite": args.suite,
            "config": {**run.to_dict(), "model": model_cfg.to_dict()},
            "variants": {name: report.to_dict() for name, report in result.reports.items()},
        },
    )
    for row in result.table.iter_rows(named=True):
        print(f"  {row['variant']:<24} OA {row['oa']:.2%}  AA {row['aa']:.2%}  Kappa {row['kappa']:.4f}")
    if not args.quiet:
        print(f"[+] Ablation table saved: {csv_path}")
        print(f"[+] Ablation reports saved: {json_path}")
    if args.html:
        from .report import write_ablation_report

        write_ablation_report(
            output_dir / f"ablation_{args.suite}.html", result, run.to_dict(), quiet=args.quiet
        )


def cmd_inspect(args: argparse.Namespace) -> None:
    if args.checkpoint:
        model = load_checkpoint(_require_file(args.checkpoint, "checkpoint", CheckpointError))
        config = model.config
    else:
        config = _resolve(args, default_preset="houston2013").model
        model = build_model(config)

    rows = layer_table(config)
    header = f"{'Layer Name':<50} {'Input Size':<26} {'Output Size':<16} {'Kernel Size':<44} {'Params':>12} {'FLOPs':>14}"

    def show(table):
        print(header)
        print("-" * 167)
        for row in table:
            print(
                f"{row.name:<50} {row.input:<26} {row.output:<16} {row.kernel:<44} "
                f"{row.params:>12,} {row.flops:>14,}"
            )
        print("-" * 167)

    show(rows)
    total_params = sum(r.params for r in rows)
    total_flops = sum(r.flops for r in rows)
    print(f"[+] Total parameters: {total_params:,}")
    print(f"[+] FLOPs per sample: {total_flops:,}")
    if total_params != model.parameter_count():
        print(f"[!] Layer table disagrees with the built model ({model.parameter_count():,})")
    if args.details:
        print("\n[*] Projector and routing breakdown (included in the rows above):")
        show(layer_details(config))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model (override preset and config file)")
    group.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Model preset")
    group.add_argument("--config", default=None, help="JSON run config file")
    group.add_argument("--components", type=int, default=None, help="PCA components K")
    group.add_argument("--patch-size", type=int, default=None, help="Patch size p (odd, >= 7)")
    group.add_argument("--channels", type=int, default=None, help="Routing channels c")
    group.add_argument("--size", type=int, default=None, help="Routing grid side s (d = s*s)")
    group.add_argument("--layers", type=int, choices=(1, 2, 3), default=None, help="Routing layers L")
    group.add_argument("--gate-hidden", type=int, default=None, help="Gate FC hidden width")
    group.add_argument("--blocks", type=_blocks, default=None, help="Enabled blocks, e.g. BSAB,ICB")
    group.add_argument("--attention", choices=("bilinear", "self"), default=None, help="Attention kind")
    group.add_argument(
        "--router", choices=("soft", "uniform_average", "off"), default=None, help="Router mode"
    )


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training (override config file)")
    group.add_argument("--epochs", type=int, default=None, help="Epochs (default: 200)")
    group.add_argument("--batch-size", type=int, default=None, help="Batch size (default: 64)")
    group.add_argument("--lr", type=float, default=None, help="Learning rate (default: 0.001)")
    group.add_argument("--optimizer", choices=OPTIMIZERS, default=None, help="Optimizer (default: adam)")
    group.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    group.add_argument("--noise-sigma", type=float, default=None, help="Augmentation noise (default: 0.05)")
    group.add_argument("--no-augment", action="store_true", help="Disable flips and noise")
    group.add_argument("--modality", choices=MODALITIES, default=None, help="Input modalities (default: HL)")


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(
        prog="dcmnet",
        description="Dynamic cross-modal routing network for HSI + LiDAR classification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  dcmnet synth --output scene.dynf
  dcmnet train --dataset scene.dynf --checkpoint model.dynm --epochs 200
  dcmnet eval --dataset scene.dynf --checkpoint model.dynm --routes routes.json --html report.html
  dcmnet ablate --suite blocks --dataset scene.dynf --output-dir ablations/ --workers 4
  dcmnet inspect --preset houston2013
        """,
    )
    parser.add_argument(
        "--version", action="version", version=f"dcmnet {__version__}", help="Show version number and exit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic HSI/LiDAR scene")
    synth.add_argument("-o", "--output", required=True, help="Output DYNF file")
    synth.add_argument("--classes", type=int, default=6, help="Number of classes (default: 6)")
    synth.add_argument("--height", type=int, default=64, help="Scene height (default: 64)")
    synth.add_argument("--width", type=int, default=64, help="Scene width (default: 64)")
    synth.add_argument("--bands", type=int, default=20, help="Spectral bands (default: 20)")
    synth.add_argument("--lidar-channels", type=int, default=1, help="LiDAR channels (default: 1)")
    synth.add_argument("--block-size", type=int, default=8, help="Class block side (default: 8)")
    synth.add_argument("--train-per-class", type=int, default=100, help="Train pixels per class (default: 100)")
    synth.add_argument("--spectral-noise", type=float, default=0.02, help="Spectral noise std (default: 0.02)")
    synth.add_argument("--height-noise", type=float, default=0.5, help="Elevation noise std in m (default: 0.5)")
    synth.add_argument(
        "--unlabeled-fraction", type=float, default=0.0, help="Share of unlabeled blocks (default: 0)"
    )
    synth.add_argument("--seed", type=int, default=7, help="Random seed (default: 7)")
    synth.set_defaults(handler=cmd_synth)

    train_cmd = sub.add_parser("train", help="Train a model and write a DYNM checkpoint")
    train_cmd.add_argument("--dataset", default=None, help="DYNF dataset")
    train_cmd.add_argument("--checkpoint", default=None, help="Output DYNM checkpoint")
    train_cmd.add_argument("--loss-log", default=None, help="Loss history JSON (default: <checkpoint>.loss.json)")
    _add_model_flags(train_cmd)
    _add_train_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset split")
    eval_cmd.add_argument("--dataset", required=True, help="DYNF dataset")
    eval_cmd.add_argument("--checkpoint", required=True, help="DYNM checkpoint")
    eval_cmd.add_argument("--split", choices=("train", "test"), default="test", help="Split (default: test)")
    eval_cmd.add_argument("--modality", choices=MODALITIES, default="HL", help="Input modalities (default: HL)")
    eval_cmd.add_argument("--report", default=None, help="Evaluation JSON (default: <checkpoint>.eval.json)")
    eval_cmd.add_argument("--routes", default=None, help="Write the routing trace JSON here")
    eval_cmd.add_argument(
        "--route-threshold",
        type=_route_threshold,
        default=DEFAULT_ROUTE_THRESHOLD,
        help=f"Gate threshold for active routing edges (default: {DEFAULT_ROUTE_THRESHOLD})",
    )
    eval_cmd.add_argument("--html", default=None, help="Write an HTML report here")
    eval_cmd.add_argument("--map", default=None, help="Write a classification map PNG here")
    eval_cmd.set_defaults(handler=cmd_eval)

    ablate = sub.add_parser("ablate", help="Run an ablation suite")
    ablate.add_argument("--suite", required=True, help=f"One of: {', '.join(SUITES)}")
    ablate.add_argument("--dataset", default=None, help="DYNF dataset")
    ablate.add_argument("--output-dir", default=None, help="Directory for CSV/JSON/HTML (default: .)")
    ablate.add_argument("--workers", type=int, default=1, help="Variants trained in parallel (default: 1)")
    ablate.add_argument("--html", action="store_true", help="Also write an HTML report")
    _add_model_flags(ablate)
    _add_train_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    inspect = sub.add_parser("inspect", help="Print the layer table of a config or checkpoint")
    inspect.add_argument("--checkpoint", default=None, help="DYNM checkpoint to inspect")
    inspect.add_argument(
        "--details", action="store_true", help="Also print per-projector and per-operator rows"
    )
    _add_model_flags(inspect)
    inspect.set_defaults(handler=cmd_inspect)

    for command in (synth, train_cmd, eval_cmd, ablate, inspect):
        command.add_argument("-q", "--quiet", action="store_true", help="Suppress progress messages")
    return parser


def main(argv: list[str] | None = None) -> None:
    """Command-line entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    _banner(f"DCMNET - {args.command.upper()}", args.quiet)
    try:
        args.handler(args)
    except ConfigError as e:
        print(f"[!] Error: {e}")
        sys.exit(EXIT_CONFIG)
    except DatasetError as e:
        print(f"[!] Error: {e}")
        sys.exit(EXIT_DATASET)
    except CheckpointError as e:
        print(f"[!] Error: {e}")
        sys.exit(EXIT_CHECKPOINT)
    _banner("DONE", args.quiet)


if __name__ == "__main__":
    main()
