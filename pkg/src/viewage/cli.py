"""Command line entry point: generate-dataset, train, sample, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .control import perimeter_poses, pose_sweep
from .dataset import DatasetError, read_png, write_png
from .diffusion import DivergenceError
from .evaluation import EvalReport, heldout_subjects
from .harness import (
    STAGES,
    TRAIN_STAGES,
    ConfigError,
    FreezeViolation,
    Run,
    RunConfig,
    StageOrderError,
    config_help,
    evaluate_run,
    protocol_from_config,
    run_pipeline,
    run_stage,
    sample_multiview,
)
from .world import CameraPose

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
# Flags whose values may legitimately start with "-".
_VALUE_FLAGS = ("--pose-sweep", "--azimuth", "--polar")


def _join_negative_values(argv: list[str]) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _VALUE_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat YAML config; keys are listed by viewage --help")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewage",
        description="Multiview face-aging toolkit: dataset generation, staged training, sampling and evaluation.",
        epilog="configuration keys:\n" + config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-dataset", help="train the age modulator if needed, then render the multiview dataset")
    _common(p)
    p.add_argument("--out", type=Path, help="dataset directory (overrides dataset.path)")

    p = sub.add_parser("train", help="run one training stage (or all of them)")
    _common(p)
    p.add_argument("--stage", required=True, choices=[*TRAIN_STAGES, "all"])
    p.add_argument("--data", type=Path, help="dataset manifest or directory (overrides dataset.path)")

    p = sub.add_parser("sample", help="age one input image and render it from several viewpoints")
    _common(p)
    p.add_argument("--input", type=Path, help="input PNG taken at pose (0, 0); default renders a held-out toy subject")
    p.add_argument("--subject", type=int, default=0, help="held-out toy subject index when --input is absent")
    p.add_argument("--age", type=float, required=True, help="target age in years")
    p.add_argument("--azimuth", type=float, help="relative azimuth in radians")
    p.add_argument("--polar", type=float, help="relative polar angle in radians")
    p.add_argument("--pose-sweep", help="azimuth sweep start:end:steps")
    p.add_argument("--frames", type=int, help="number of frames (defaults to the sweep length, or perimeter poses)")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--guidance-scale", type=float, help="classifier-free guidance scale")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--stage", choices=["aging", "controller", "controller-rgb", "temporal"], help="model stage (default: latest)")
    p.add_argument("--out", type=Path, default=Path("samples"), help="output directory")

    p = sub.add_parser("eval", help="evaluate a trained model on held-out subjects")
    _common(p)
    p.add_argument("--stage", choices=["aging", "controller", "controller-rgb", "temporal"], help="model stage (default: latest)")
    p.add_argument("--out", type=Path, help="report path (default <run_dir>/eval.json)")
    p.add_argument("--pipeline", action="store_true", help="run every stage first, then evaluate all variants")

    p = sub.add_parser("report", help="render image sheets and curves for a run")
    _common(p)
    p.add_argument("--out", type=Path, help="figure directory (default <run_dir>/report)")
    p.add_argument("--subjects", type=int, default=4, help="subjects in the image sheet")
    p.add_argument("--stage", choices=["aging", "controller", "controller-rgb", "temporal"], help="model stage (default: latest)")
    return parser


def load_config(args) -> RunConfig:
    overrides = dict(RunConfig.parse_override(s) for s in args.set)
    if args.config is not None:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def _emit(rows):
    for row in rows:
        print("\t".join(str(x) for x in row))


def cmd_generate(args, config: RunConfig) -> int:
    if args.out is not None:
        config = config.with_values(**{"dataset__path": str(args.out)})
    run = Run(config)
    if not run.has("modulator"):
        run_stage(config, "modulator")
    path = run_stage(config, "dataset")
    m = json.loads(path.read_text())
    _emit([("dataset", run.dataset_dir), ("records", m["records"]), ("dataset_hash", m["dataset_hash"]), ("lineage_hash", m["lineage_hash"])])
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    if args.data is not None:
        data = args.data.parent if args.data.suffix == ".jsonl" else args.data
        config = config.with_values(**{"dataset__path": str(data)})
    stages = [s for s in STAGES] if args.stage == "all" else [args.stage]
    for stage in stages:
        path = run_stage(config, stage)
        m = json.loads(path.read_text())
        _emit([(m["stage"], path, m["lineage_hash"])])
    return EXIT_OK


def _sample_poses(args) -> list[CameraPose]:
    if args.pose_sweep:
        poses = pose_sweep(args.pose_sweep)
        if args.frames is not None and args.frames != len(poses):
            raise ValueError(f"--frames {args.frames} does not match the sweep's {len(poses)} steps")
        return poses
    if args.azimuth is not None or args.polar is not None:
        return [CameraPose(args.azimuth or 0.0, args.polar or 0.0)] * (args.frames or 1)
    return perimeter_poses(args.frames or 8)


def cmd_sample(args, config: RunConfig) -> int:
    overrides = {}
    if args.steps is not None:
        overrides["sampler__steps"] = args.steps
    if args.guidance_scale is not None:
        overrides["sampler__guidance_scale"] = args.guidance_scale
    config = config.with_values(**overrides) if overrides else config
    run = Run(config)
    poses = _sample_poses(args)
    if args.input is not None:
        image = read_png(args.input)
    else:
        image = heldout_subjects(run.adapters, args.subject + 1, config["eval.seed"]).inputs[args.subject]
    frames = sample_multiview(run, image, args.age, poses, seed=args.seed, stage=args.stage)
    args.out.mkdir(parents=True, exist_ok=True)
    from .plotting import image_sheet

    rows = [("frame", "path", "azimuth", "polar", "predicted_age")]
    for i, f in enumerate(frames):
        path = args.out / f"frame_{i:03d}.png"
        write_png(path, f.pixels)
        age = float(run.adapters.age_predictor.predict_age(f.pixels))
        rows.append((i, path, f"{f.pose.azimuth:.4f}", f"{f.pose.polar:.4f}", f"{age:.2f}"))
    grid = image_sheet([[image, *[f.pixels for f in frames]]], args.out / "grid.png", ["input", *[f"{p.azimuth:+.2f},{p.polar:+.2f}" for p in poses]])
    _emit(rows)
    _emit([("grid", grid)])
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    report = run_pipeline(config) if args.pipeline else evaluate_run(config, args.stage)
    out = args.out or Path(config["run_dir"]) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.to_text())
    return EXIT_OK


@torch.no_grad()
def cmd_report(args, config: RunConfig) -> int:
    from .harness import make_sample_fn
    from .plotting import age_bucket_plot, age_view_sheet, loss_curves

    run = Run(config)
    out = args.out or run.run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    stage = args.stage or run.latest_model_stage()
    protocol = protocol_from_config(config)
    subjects = heldout_subjects(run.adapters, args.subjects, protocol.seed)
    fn = make_sample_fn(run, stage, subjects)
    poses = protocol.poses()
    pose_t = torch.tensor([p.as_tuple() for p in poses])
    zero = torch.zeros(1, 2)
    age_rows = [[] for _ in range(args.subjects)]
    idx = slice(0, args.subjects)
    for age in protocol.ages:
        imgs = fn(subjects.inputs, torch.full((args.subjects,), float(age)), zero, seed=int(age), idx=idx)
        for i in range(args.subjects):
            age_rows[i].append(imgs[i])
    view_age = float(protocol.ages[-1])
    views = fn(subjects.inputs, torch.full((args.subjects,), view_age), pose_t, seed=1, idx=idx).reshape(args.subjects, len(poses), *subjects.inputs.shape[1:])
    rows = [("figure", "path")]
    rows.append(("age_view_sheet", age_view_sheet(list(subjects.inputs), age_rows, [list(v) for v in views], protocol.ages, poses, out / "age_view_sheet.png")))
    curves = loss_curves(run.log_dir, out / "loss_curves.png")
    if curves:
        rows.append(("loss_curves", curves))
    eval_path = run.run_dir / "eval.json"
    report = None
    if eval_path.exists():
        report = EvalReport.from_dict(json.loads(eval_path.read_text()))
        rows.append(("age_buckets", age_bucket_plot(report, out / "age_buckets.png")))
    _emit(rows)
    if report is not None:
        print(report.to_text())
    return EXIT_OK


COMMANDS = {"generate-dataset": cmd_generate, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"viewage: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"viewage: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageOrderError, FreezeViolation, DatasetError, DivergenceError, ValueError, FileNotFoundError) as exc:
        print(f"viewage: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
