"""Command-line entry point: ``dilseg <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .io import FormatError, read_ntsr, write_ntsr, write_pgm
from .netspec import SCALES, SpecError, preset, preset_names

log = logging.getLogger("dilseg")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthdata import SceneConfig, generate_dataset, save_dataset

    config = SceneConfig(
        extent=args.extent, count=tuple(args.count), size=tuple(args.size),
        gap=args.gap, noise=args.noise, seed=args.seed,
    )
    dataset = generate_dataset(config, args.scenes, args.test_scenes, args.downsample)
    root = save_dataset(dataset, args.out, preview=args.preview)
    n_obj = sum(s.num_instances for s in dataset.train + dataset.test)
    print(f"wrote {len(dataset.train)} train + {len(dataset.test)} test scenes ({n_obj} objects) to {root}")
    return 0


def cmd_train(args) -> int:
    from .model import init_model
    from .synthdata import load_dataset, sample_patches
    from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_log

    config = TrainConfig(lr=args.lr, batch=args.batch, steps=args.steps, seed=args.seed,
                         checkpoint_interval=args.checkpoint_interval)
    dataset = load_dataset(args.data)
    patch_seed = args.seed if args.patch_seed is None else args.patch_seed
    patches = sample_patches(dataset.train, args.patches, patch_seed)
    if args.resume:
        model, state = load_checkpoint(args.resume)
        first = state.step if state else 0
    else:
        model, state, first = init_model(preset(args.preset, args.scale), seed=args.seed), None, 0

    out = Path(args.out)

    def on_step(step, loss, m, st):
        if config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
            save_checkpoint(m, st, out.with_name(f"{out.stem}.step{step + 1}{out.suffix}"))

    model, losses, state = train(model, patches, config, state, on_step=on_step)
    save_checkpoint(model, state, out)
    if args.log:
        write_loss_log(args.log, losses, first)
        from .plots import plot_losses

        plot_losses({model.spec.name: losses}, Path(args.log).with_suffix(".png"))
    last = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"trained {model.spec.name} to step {state.step}, last loss {last}; checkpoint {out}")
    return 0


def cmd_predict(args) -> int:
    from .inference import predict_scene
    from .plots import plot_map
    from .synthdata import load_scene
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    prob = predict_scene(model, scene.image, batch=args.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ntsr(out / "map.ntsr", prob)
    write_pgm(out / "map.pgm", prob, normalize=False)
    plot_map(prob, out / "map.png", title=f"{scene.scene_id}: P(building)", cmap="magma")
    print(f"wrote {prob.shape[0]}x{prob.shape[1]} probability map to {out}")
    return 0


def cmd_proposals(args) -> int:
    from .inference import extract_proposals

    prob = read_ntsr(args.map)
    if prob.ndim != 2:
        raise ValueError(f"expected a 2-D probability map, got shape {prob.shape}")
    props = extract_proposals(prob, args.threshold, args.min_area, scene_id=Path(args.map).parent.name)
    _write_json(args.out, props.to_json())
    print(f"{len(props)} proposals written to {args.out}")
    return 0


def _load_maps(directory, scenes) -> List[np.ndarray]:
    root = Path(directory)
    maps = []
    for s in scenes:
        for cand in (root / s.scene_id / "map.ntsr", root / f"{s.scene_id}.ntsr"):
            if cand.exists():
                maps.append(read_ntsr(cand))
                break
        else:
            raise FileNotFoundError(f"no probability map for scene {s.scene_id} under {root}")
    return maps


def cmd_eval(args) -> int:
    from .metrics import MetricsReport, evaluate
    from .synthdata import load_dataset
    from .training import load_checkpoint

    scenes = load_dataset(args.data).test
    if not scenes:
        raise ValueError(f"dataset {args.data} has no test scenes")
    if args.checkpoint:
        source, name = load_checkpoint(args.checkpoint)[0], Path(args.checkpoint).stem
    else:
        source, name = _load_maps(args.maps, scenes), Path(args.maps).name
    report = evaluate(source, scenes, args.threshold, args.min_area, args.margin)
    out = Path(args.out)
    _write_json(out, report.to_dict())
    row = MetricsReport.table_header() + "\n" + report.table_row(name) + "\n"
    out.with_suffix(".txt").write_text(row)
    out.with_suffix(".csv").write_text(MetricsReport.csv_header() + "\n" + report.csv_row(name) + "\n")
    print(row, end="")
    return 0


def cmd_rf(args) -> int:
    from .rf import theoretical_rf

    report = theoretical_rf(preset(args.preset, args.scale))
    if args.out:
        _write_json(args.out, report.to_dict())
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(report.format_table())
    return 0


def cmd_erf(args) -> int:
    from .model import init_model
    from .plots import plot_map
    from .rf import erf_map, grid_score, rf_box, theoretical_rf
    from .synthdata import load_dataset, sample_patches
    from .training import load_checkpoint

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[0]
    elif args.preset:
        model = init_model(preset(args.preset, args.scale), seed=args.seed)
    else:
        raise ValueError("erf needs --checkpoint or --preset")
    size = model.spec.input_patch
    if args.data:
        x = sample_patches(load_dataset(args.data).train, args.patches, args.seed).inputs
    else:
        x = np.random.default_rng(args.seed).uniform(0.0, 1.0, (args.patches, 3, size, size)).astype(np.float32)
    erf = erf_map(model, x, restrict=not args.full)
    report = theoretical_rf(model.spec)
    box = rf_box(model.spec, (size // 2, size // 2), size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ntsr(out / "erf.ntsr", erf.values)
    write_pgm(out / "erf.pgm", erf.values)
    plot_map(erf.normalized, out / "erf.png", title=f"ERF {model.spec.name}", box=box)
    inside = np.zeros(erf.values.shape, dtype=bool)
    inside[box[0]: box[1] + 1, box[2]: box[3] + 1] = True
    outside = float(erf.values[~inside].sum())
    score = grid_score(erf, report.grid_period) if report.grid_period >= 2 and erf.peak > 0 else None
    summary = {
        "model": model.spec.name,
        "patches": erf.patches,
        "theoretical_rf": report.final_rf,
        "rf_box": list(box),
        "support_box": list(erf.support_box() or []),
        "mass_outside_rf": outside,
        "grid_period": report.grid_period,
        "grid_score": score,
    }
    _write_json(out / "erf.json", summary)
    print(f"ERF support {summary['support_box']} within RF box {list(box)}; mass outside {outside:g}")
    print(f"grid score (period {report.grid_period}): {'n/a' if score is None else f'{score:.4f}'}")
    return 0


def cmd_experiment(args) -> int:
    from .experiment import ExperimentPlan, run_experiment

    plan = ExperimentPlan.from_json(args.plan)
    if args.out:
        plan.out = args.out
    summary = run_experiment(plan, progress=print)
    for name, deltas in summary.get("relative_improvement", {}).items():
        small = deltas.get("ar_small")
        print(f"{name}: AR(small) delta vs front-s {'n/a' if small is None else f'{small:+.4f}'}")
    print(f"results in {plan.out}")
    return 0


def cmd_presets(args) -> int:
    from .rf import theoretical_rf

    print(f"{'name':<20} {'params':>10} {'RF':>5} {'period':>6}")
    for name in preset_names():
        spec = preset(name, args.scale)
        rf = theoretical_rf(spec)
        print(f"{name:<20} {spec.parameter_count():>10} {rf.final_rf:>5} {rf.grid_period:>6}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dilseg", description="Dilated-convolution building segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=64, help="training scenes")
    g.add_argument("--test-scenes", type=int, default=16)
    g.add_argument("--extent", type=int, default=256)
    g.add_argument("--count", type=int, nargs=2, default=[80, 140], metavar=("LO", "HI"))
    g.add_argument("--size", type=int, nargs=2, default=[3, 12], metavar=("LO", "HI"))
    g.add_argument("--gap", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.06)
    g.add_argument("--downsample", type=int, default=1, choices=[1, 2, 3])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preview", action="store_true", help="also write preview.pgm per scene")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a preset on a dataset")
    t.add_argument("--preset", default="front-s-d-lfe", choices=preset_names())
    t.add_argument("--scale", default="micro", choices=SCALES)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--patches", type=int, default=20000)
    t.add_argument("--patch-seed", type=int, default=None, help="defaults to --seed")
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="CSV of (step, loss); a PNG plot is written alongside")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="whole-scene probability map")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scene", required=True, help="scene directory or image .ntsr")
    pr.add_argument("--batch", type=int, default=32)
    pr.add_argument("--out", required=True, help="output directory (map.ntsr, map.pgm, map.png)")
    pr.set_defaults(func=cmd_predict)

    po = sub.add_parser("proposals", help="mask proposals from a probability map")
    po.add_argument("--map", required=True)
    po.add_argument("--threshold", type=float, default=0.5)
    po.add_argument("--min-area", type=int, default=4)
    po.add_argument("--out", required=True)
    po.set_defaults(func=cmd_proposals)

    e = sub.add_parser("eval", help="pixel and instance metrics on the test split")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--maps", help="directory with <scene>/map.ntsr or <scene>.ntsr")
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--min-area", type=int, default=4)
    e.add_argument("--margin", type=int, default=3)
    e.add_argument("--out", required=True, help="report.json; .txt and .csv written alongside")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rf", help="theoretical receptive field of a preset")
    r.add_argument("--preset", required=True, choices=preset_names())
    r.add_argument("--scale", default="paper", choices=SCALES)
    r.add_argument("--json", action="store_true", help="print JSON instead of the table")
    r.add_argument("--out", default=None, help="also write the JSON report here")
    r.set_defaults(func=cmd_rf)

    f = sub.add_parser("erf", help="effective receptive field map")
    f.add_argument("--checkpoint", default=None)
    f.add_argument("--preset", default=None, choices=preset_names(), help="random-init model instead")
    f.add_argument("--scale", default="micro", choices=SCALES)
    f.add_argument("--data", default=None, help="sample patches from this dataset (else uniform noise)")
    f.add_argument("--patches", type=int, default=256)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--full", action="store_true", help="compute the full output map in the forward pass")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_erf)

    x = sub.add_parser("experiment", help="train and compare several presets")
    x.add_argument("--plan", required=True, help="JSON experiment plan")
    x.add_argument("--out", default=None, help="override the plan's output directory")
    x.set_defaults(func=cmd_experiment)

    ps = sub.add_parser("presets", help="list architecture presets")
    ps.add_argument("--scale", default="paper", choices=SCALES)
    ps.set_defaults(func=cmd_presets)
    return p


OPERATIONAL_ERRORS = (ValueError, OSError, FormatError, SpecError, KeyError, RuntimeError, FloatingPointError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except OPERATIONAL_ERRORS as exc:
        print(f"dilseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
