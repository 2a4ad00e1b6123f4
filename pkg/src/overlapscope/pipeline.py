"""End-to-end experiment recipes shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .detector import ArchitectureSpec, TrainConfig
from .evalkit import Heatmap, SweepResult, accuracy_vs_n, gmean_threshold, heatmap_hits, sliding_heatmap
from .noise import Frame
from .optics import SensorModel
from .phantom import Annotation, PhantomSpec, TargetSpec, generate_phantom, overlap_frames, phantom_singles


@dataclass(frozen=True)
class SweepSettings:
    """Desk-scale defaults: 48 px patches keep a 12-model sweep in CPU minutes."""

    n_values: tuple[int, ...] = (1, 2, 4, 7)
    frames: int = 100
    frame_size: int = 512
    targets_per_frame: int = 10
    patch_size: int = 48
    inner_fraction: float = 1 / 3
    stride: int | None = None
    train_per_class: int = 600
    val_per_class: int = 300
    channels: tuple[int, ...] = (8, 16, 32, 32, 64)
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    ensemble: int = 3
    n_bit: int = 8
    well_depth: float = 10_000.0
    seed: int = 0

    @property
    def sensor(self) -> SensorModel:
        return SensorModel(n_bit=self.n_bit, v=self.well_depth)

    @property
    def arch(self) -> ArchitectureSpec:
        return ArchitectureSpec(input_size=self.patch_size, channels=tuple(self.channels))

    @property
    def phantom(self) -> PhantomSpec:
        return PhantomSpec(
            frame_size=self.frame_size,
            targets=TargetSpec(count=self.targets_per_frame),
            n_bit=self.n_bit,
        )

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            learning_rate=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_values"] = list(self.n_values)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSettings":
        d = dict(d)
        d["n_values"] = tuple(d["n_values"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def build_singles(s: SweepSettings):
    return phantom_singles(s.phantom, s.frames, s.patch_size, s.inner_fraction, s.stride, seed=s.seed)


def run_sweep(s: SweepSettings, log=None) -> SweepResult:
    singles = build_singles(s)
    return accuracy_vs_n(
        singles,
        s.n_values,
        s.train_config,
        s.seed,
        arch=s.arch,
        sensor=s.sensor,
        train_per_class=s.train_per_class,
        val_per_class=s.val_per_class,
        ensemble_size=s.ensemble,
        log=log,
    )


def overlapped_scene(s: SweepSettings, n: int, seed: int) -> tuple[Frame, list[Annotation]]:
    """Whole-frame n-fold overlap of fresh phantoms (groups unseen in training)."""
    ss = np.random.SeedSequence([int(seed), int(n), 0x5CE])
    seeds = [int(x) for x in ss.generate_state(n + 1)]
    scenes = [generate_phantom(s.phantom, seeds[i]) for i in range(n)]
    return overlap_frames(scenes, s.sensor, seeds[-1])


def localization_rate(
    models, s: SweepSettings, n: int, threshold: float, scenes: int = 4, step: int = 8, seed: int = 1000
) -> tuple[float, list[Heatmap]]:
    """Fraction of ground-truth targets whose nearest heatmap cell clears ``threshold``."""
    hits, maps = [], []
    for k in range(scenes):
        frame, anns = overlapped_scene(s, n, seed + k)
        hm = sliding_heatmap(models, frame, s.patch_size, step)
        hits.append(heatmap_hits(hm, anns, threshold))
        maps.append(hm)
    allhits = np.concatenate(hits)
    return float(allhits.mean()) if allhits.size else float("nan"), maps
