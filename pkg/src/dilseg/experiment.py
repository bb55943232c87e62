"""Controlled multi-preset comparison: same data, same patches, same seeds, different architectures."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .metrics import MetricsReport, evaluate
from .model import init_model
from .netspec import preset
from .plots import plot_losses, plot_relative_improvement
from .synthdata import SceneConfig, generate_dataset, load_dataset, sample_patches
from .training import TrainConfig, save_checkpoint, train, write_loss_log

logger = logging.getLogger(__name__)

COMPARISON_PRESETS = ("front-s", "front-s-d", "front-s-d-large", "front-s-d-lfe")
BASELINE = "front-s"
SMALL_BINS = ("VerySmall", "Small")


@dataclass
class ExperimentPlan:
    out: str = "experiment"
    presets: List[str] = field(default_factory=lambda: list(COMPARISON_PRESETS))
    scale: str = "micro"
    seeds: List[int] = field(default_factory=lambda: [0])
    scenes: dict = field(default_factory=dict)  # SceneConfig fields
    n_train: int = 64
    n_test: int = 16
    downsample: int = 1
    data: Optional[str] = None  # existing dataset directory, overrides scene generation
    patches: int = 20000
    patch_seed: int = 0
    train: dict = field(default_factory=dict)  # TrainConfig fields except seed
    threshold: float = 0.5
    min_area: int = 4
    margin: int = 3

    def __post_init__(self):
        if not self.presets:
            raise ValueError("experiment plan lists no presets")
        if not self.seeds:
            raise ValueError("experiment plan lists no seeds")
        self.train_config(self.seeds[0])  # validate early

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment plan keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# Desk-scale benchmark for the small-object comparison.
BENCHMARK = ExperimentPlan(
    out="benchmark",
    seeds=[0, 1, 2],
    scenes={"extent": 256, "size": [3, 12]},
    n_train=64,
    n_test=16,
    patches=20000,
    train={"steps": 10000, "batch": 32, "lr": 1e-3},
)
BENCHMARK_MARGIN_LFE = 0.05  # required AR(small) gain of front-s-d-lfe over front-s
BENCHMARK_CPU_MINUTES = 60.0


def small_ar(report: MetricsReport) -> Optional[float]:
    """Mean AR over the two smallest size bins, skipping absent bins."""
    vals = [report.ar_by_size.get(b) for b in SMALL_BINS]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _mean_reports(reports: List[MetricsReport]) -> Dict[str, Optional[float]]:
    cols: Dict[str, List[Optional[float]]] = {}
    for r in reports:
        for name, v in r.columns() + [("ar_small", small_ar(r))]:
            cols.setdefault(name, []).append(v)
    return {k: (None if any(x is None for x in v) else float(np.mean(v))) for k, v in cols.items()}


def relative_improvement(means: Dict[str, Dict[str, Optional[float]]], baseline: str = BASELINE):
    if baseline not in means:
        raise ValueError(f"baseline {baseline} was not part of the experiment")
    base = means[baseline]
    out = {}
    for name, row in means.items():
        if name == baseline:
            continue
        out[name] = {k: (None if v is None or base[k] is None else v - base[k]) for k, v in row.items()}
    return out


def _csv(rows: Dict[str, Dict[str, Optional[float]]]) -> str:
    if not rows:
        return ""
    keys = list(next(iter(rows.values())))
    lines = ["model," + ",".join(keys)]
    for name, row in rows.items():
        lines.append(name + "," + ",".join("" if row[k] is None else f"{row[k]:.6f}" for k in keys))
    return "\n".join(lines) + "\n"


def run_experiment(plan: ExperimentPlan, progress: Optional[Callable[[str], None]] = None) -> dict:
    """Train, evaluate and compare every preset of ``plan``; returns the summary dict.

    Every preset trains on the same PatchSet and, per seed, starts from that
    seed's initialization stream, so runs differ only in architecture.
    """
    say = progress or (lambda msg: logger.info(msg))
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    if plan.data:
        dataset = load_dataset(plan.data)
    else:
        dataset = generate_dataset(SceneConfig(**plan.scenes), plan.n_train, plan.n_test, plan.downsample)
    patches = sample_patches(dataset.train, plan.patches, plan.patch_seed)
    say(f"{len(dataset.train)} train / {len(dataset.test)} test scenes, {len(patches)} patches")

    per_preset: Dict[str, List[MetricsReport]] = {}
    curves: Dict[str, List[float]] = {}
    runs = []
    for name in plan.presets:
        spec = preset(name, plan.scale)
        for seed in plan.seeds:
            tag = f"{name}_seed{seed}"
            model = init_model(spec, seed=seed)
            model, losses, state = train(model, patches, plan.train_config(seed))
            save_checkpoint(model, state, out / f"{tag}.ckpt")
            write_loss_log(out / f"{tag}_loss.csv", losses)
            report = evaluate(model, dataset.test, plan.threshold, plan.min_area, plan.margin)
            per_preset.setdefault(name, []).append(report)
            curves[tag] = losses
            runs.append({"preset": name, "seed": seed, "final_loss": losses[-1] if losses else None,
                         "report": report.to_dict()})
            say(f"{tag}: loss {losses[-1] if losses else float('nan'):.4f} AR {report.ar}")

    means = {name: _mean_reports(reps) for name, reps in per_preset.items()}
    lines = [MetricsReport.table_header()]
    for name, reps in per_preset.items():
        lines.extend(r.table_row(f"{name}#{i}") for i, r in enumerate(reps))
    (out / "comparison.txt").write_text("\n".join(lines) + "\n")
    (out / "comparison.csv").write_text(_csv(means))
    summary = {"plan": plan.to_dict(), "runs": runs, "mean": means}
    if BASELINE in means and len(means) > 1:
        deltas = relative_improvement(means)
        (out / "relative_improvement.csv").write_text(_csv(deltas))
        plot_relative_improvement(deltas, out / "relative_improvement.png", BASELINE)
        summary["relative_improvement"] = deltas
    plot_losses(curves, out / "loss_curves.png")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
