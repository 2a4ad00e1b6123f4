"""Detection metrics, sliding-window heatmaps, trace contrast and the accuracy-vs-n sweep."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import ArchitectureSpec, DetectorModel, TrainConfig, build_model, forward, predict_ensemble, train
from .errors import InvalidArgument, TrainingFailure, UndefinedMetric
from .noise import Frame
from .optics import SensorModel
from .phantom import LabeledPatch, compose_overlap_dataset, split_by_group

SWEEP_COLUMNS = ["n", "train_acc", "val_acc", "auc", "threshold", "tp", "fp", "tn", "fn"]


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InvalidArgument(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgument("labels must be 0 or 1")
    return s, y.astype(np.int64)


# ------------------------------------------------------------------------ ROC


@dataclass
class RocResult:
    points: list[tuple[float, float]]  # (fpr, tpr), thresholds descending
    auc: float
    thresholds: list[float] = field(default_factory=list)

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def roc_curve(scores, labels) -> RocResult:
    """ROC over every unique score plus +/-inf, with the trapezoidal AUC.

    A sample is called positive when ``score >= threshold``. The AUC is
    accumulated in integer counts and divided once, so it equals the
    Mann-Whitney pair count exactly up to one rounding.
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.r_[0, np.cumsum(y_sorted)[ends], n_pos]
    fp = np.r_[0, np.cumsum(1 - y_sorted)[ends], n_neg]
    thresholds = [math.inf] + s_sorted[ends].tolist() + [-math.inf]
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    points = [(f / n_neg, t / n_pos) for f, t in zip(fp.tolist(), tp.tolist())]
    return RocResult(points, auc, thresholds)


# ------------------------------------------------------------------ threshold


@dataclass
class ThresholdChoice:
    threshold: float
    gmean: float
    tpr: float
    tnr: float
    degenerate: bool = False


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return (u[:-1] + u[1:]) / 2


def gmean_threshold(scores, labels) -> ThresholdChoice:
    """Midpoint threshold maximizing sqrt(TPR * TNR); ties go to the lowest."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("threshold selection needs both classes")
    cands = candidate_thresholds(s)
    if cands.size == 0:
        t = float(s[0])
        tpr = 1.0
        tnr = 0.0
        return ThresholdChoice(t, 0.0, tpr, tnr, degenerate=True)
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    tp = n_pos - np.searchsorted(pos, cands, side="left")
    tn = np.searchsorted(neg, cands, side="left")
    # integer objective: maximizing tp*tn maximizes the geometric mean
    k = int(np.argmax(tp * tn))
    tpr, tnr = tp[k] / n_pos, tn[k] / n_neg
    return ThresholdChoice(float(cands[k]), math.sqrt(tpr * tnr), float(tpr), float(tnr))


# ------------------------------------------------------------------ confusion


@dataclass
class ConfusionReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def tpr(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else math.nan

    @property
    def tnr(self) -> float:
        d = self.tn + self.fp
        return self.tn / d if d else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(accuracy=self.accuracy, tpr=self.tpr, tnr=self.tnr)
        return d


def confusion(scores, labels, threshold: float) -> ConfusionReport:
    s, y = _scores_labels(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionReport(
        float(threshold),
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


# -------------------------------------------------------------------- heatmap


@dataclass
class Heatmap:
    grid: np.ndarray  # rows x cols, aligned to window top-left corners
    window: int
    step: int

    def cell_for(self, x: float, y: float) -> tuple[int, int]:
        """Grid cell whose window centre is nearest to pixel (x, y)."""
        r = int(round((y - self.window / 2) / self.step))
        c = int(round((x - self.window / 2) / self.step))
        rows, cols = self.grid.shape
        return min(max(r, 0), rows - 1), min(max(c, 0), cols - 1)

    def to_frame(self, n_bit: int = 8) -> Frame:
        top = 2**n_bit - 1
        data = np.clip(np.rint(self.grid * top), 0, top).astype(np.uint8 if n_bit <= 8 else np.uint16)
        return Frame(data, n_bit=n_bit)

    def sidecar(self) -> dict:
        return {"window": self.window, "step": self.step, "rows": int(self.grid.shape[0]), "cols": int(self.grid.shape[1])}


def heatmap_shape(frame_shape, window: int, step: int) -> tuple[int, int]:
    h, w = frame_shape[:2]
    return (h - window) // step + 1, (w - window) // step + 1


def sliding_heatmap(models, frame: Frame, window: int, step: int, chunk: int = 256) -> Heatmap:
    """Probability map from sliding the detector (or an ensemble) over ``frame``.

    Windows are visited in row-major order and evaluated in fixed-size chunks,
    so the result does not depend on chunking.
    """
    if isinstance(models, DetectorModel):
        models = [models]
    models = list(models)
    if step < 1:
        raise InvalidArgument("step must be >= 1")
    if window > frame.height or window > frame.width:
        raise InvalidArgument(f"window {window} larger than frame {frame.width}x{frame.height}")
    if window != models[0].arch.input_size:
        raise InvalidArgument(f"window {window} must equal the model input size {models[0].arch.input_size}")
    rows, cols = heatmap_shape(frame.data.shape, window, step)
    img = frame.normalized()
    if img.ndim == 2:
        img = img[..., None]
    views = np.lib.stride_tricks.sliding_window_view(img, (window, window), axis=(0, 1))
    views = views[::step, ::step][:rows, :cols]  # rows, cols, C, win, win
    out = np.empty(rows * cols, dtype=np.float64)
    flat = views.reshape(rows * cols, img.shape[2], window, window)
    for i in range(0, rows * cols, chunk):
        batch = np.ascontiguousarray(flat[i : i + chunk].transpose(0, 2, 3, 1))
        out[i : i + chunk] = predict_ensemble(models, batch)
    return Heatmap(out.reshape(rows, cols), window, step)


def heatmap_hits(heatmap: Heatmap, annotations, threshold: float) -> np.ndarray:
    """Boolean per target: does the cell nearest its centroid reach ``threshold``?"""
    hits = []
    for a in annotations:
        if getattr(a, "class_tag", "target") != "target":
            continue
        r, c = heatmap.cell_for(a.x, a.y)
        hits.append(heatmap.grid[r, c] >= threshold)
    return np.array(hits, dtype=bool)


# ------------------------------------------------------------------- contrast


def trace_contrast(
    image: Frame,
    row: int,
    rows_to_average: int = 20,
    span: tuple[int, int] | None = None,
    full_scale: float | None = None,
) -> float:
    """Peak-to-valley height of a row-averaged intensity trace.

    Rows ``row .. row + rows_to_average - 1`` are averaged; the trace is
    divided by the full-scale digital number and ``max - min`` is taken over
    columns ``span = (start, stop)``.
    """
    data = np.asarray(image.data, dtype=np.float64)
    if data.ndim == 3:
        data = data.mean(axis=2)
    h, w = data.shape
    if rows_to_average < 1 or row < 0 or row + rows_to_average > h:
        raise InvalidArgument(f"rows {row}..{row + rows_to_average - 1} outside image of height {h}")
    start, stop = span if span is not None else (0, w)
    if not 0 <= start < stop <= w:
        raise InvalidArgument(f"span {span} outside image of width {w}")
    if full_scale is None:
        if image.n_bit is None:
            raise InvalidArgument("real-valued frames need an explicit full_scale")
        full_scale = 2**image.n_bit - 1
    trace = data[row : row + rows_to_average, start:stop].mean(axis=0) / full_scale
    return float(trace.max() - trace.min())


# ---------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    n: int
    train_acc: float
    val_acc: float
    auc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    models: dict[int, list[DetectorModel]] = field(default_factory=dict)
    histories: dict[int, list] = field(default_factory=dict)


def member_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


def accuracy_vs_n(
    singles: Sequence[LabeledPatch],
    n_values: Sequence[int],
    config: TrainConfig,
    seed: int,
    *,
    arch: ArchitectureSpec,
    sensor: SensorModel | None = None,
    train_per_class: int = 600,
    val_per_class: int = 300,
    ensemble_size: int = 3,
    val_fraction: float = 0.3,
    log: Callable[[str], None] | None = None,
) -> SweepResult:
    """Train an ensemble per overlap number and score it on held-out groups.

    Singles are split by group (train/val, default 7:3) once, so every ``n``
    composes from disjoint specimens. Validation accuracy is taken at the
    geometric-mean threshold of the ensemble's validation scores.
    """
    sensor = sensor or SensorModel()
    tr_singles, va_singles, _ = split_by_group(list(singles), (1 - val_fraction, val_fraction, 0.0), seed)
    result = SweepResult([])
    for n in n_values:
        n_seed = int(np.random.SeedSequence([int(seed), int(n)]).generate_state(1)[0])
        tr = compose_overlap_dataset(tr_singles.patches, n, train_per_class, sensor, n_seed)
        va = compose_overlap_dataset(va_singles.patches, n, val_per_class, sensor, n_seed + 1)
        models, hists = [], []
        for k, ms in enumerate(member_seeds(n_seed, ensemble_size)):
            cfg = TrainConfig(**{**asdict(config), "seed": ms})
            try:
                m, h = train(build_model(arch, ms), tr, va, cfg)
            except TrainingFailure as exc:
                raise TrainingFailure(exc.epoch, f"training failed for n={n}, member {k}") from exc
            models.append(m)
            hists.append(h)
        y_va = np.array([p.label for p in va])
        y_tr = np.array([p.label for p in tr])
        s_va = predict_ensemble(models, [p.pixels for p in va])
        s_tr = predict_ensemble(models, [p.pixels for p in tr])
        choice = gmean_threshold(s_va, y_va)
        cm = confusion(s_va, y_va, choice.threshold)
        row = SweepRow(
            n=int(n),
            train_acc=confusion(s_tr, y_tr, choice.threshold).accuracy,
            val_acc=cm.accuracy,
            auc=roc_curve(s_va, y_va).auc,
            threshold=choice.threshold,
            tp=cm.tp,
            fp=cm.fp,
            tn=cm.tn,
            fn=cm.fn,
        )
        result.rows.append(row)
        result.models[int(n)] = models
        result.histories[int(n)] = hists
        if log is not None:
            log(f"n={n}: train_acc={row.train_acc:.4f} val_acc={row.val_acc:.4f} auc={row.auc:.4f}")
    return result


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SWEEP_COLUMNS)
        for r in rows:
            wr.writerow([r.n, f"{r.train_acc:.6f}", f"{r.val_acc:.6f}", f"{r.auc:.6f}", f"{r.threshold:.6f}", r.tp, r.fp, r.tn, r.fn])


def write_roc_csv(path, roc: RocResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["fpr", "tpr"])
        for f, t in roc.points:
            wr.writerow([f"{f:.6f}", f"{t:.6f}"])


def write_heatmap(path, heatmap: Heatmap, extra: dict | None = None) -> None:
    """PGM of the probability grid plus a JSON sidecar with window/step."""
    from .pnm import write_pnm

    path = Path(path)
    write_pnm(path, heatmap.to_frame())
    meta = heatmap.sidecar()
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
