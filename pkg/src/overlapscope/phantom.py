"""Procedural specimen phantoms, patch labeling and overlapped dataset composition.

Phantoms imitate a brightfield blood smear: a bright field densely covered by
mid-gray discs (red-cell analogues) and a few small dark blobs (the sparse
targets). Only targets are annotated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, LoadError, UnsatisfiableBalance
from .noise import Frame, quantize, synthesize_overlap
from .optics import SensorModel
from .pnm import read_pnm, write_pnm

REFERENCE_PATCH = 96


@dataclass(frozen=True)
class BackgroundSpec:
    disc_density_per_mm2: float = 15_000.0
    radius_px: tuple[float, float] = (7.0, 11.0)
    intensity: tuple[float, float] = (150.0, 185.0)
    field_level: float = 215.0
    texture_sigma: float = 2.0


@dataclass(frozen=True)
class TargetSpec:
    count: int = 10
    radius_px: tuple[float, float] = (3.0, 5.0)
    intensity: tuple[float, float] = (25.0, 60.0)
    max_eccentricity: float = 1.5  # major/minor axis ratio
    margin_px: int = 16


@dataclass(frozen=True)
class PhantomSpec:
    frame_size: int = 512
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    targets: TargetSpec = field(default_factory=TargetSpec)
    group_id: str = "g000"
    pixel_um: float = 0.4  # object-plane sampling
    blur_sigma: float = 0.8
    n_bit: int = 8

    def __post_init__(self):
        if self.frame_size < 1:
            raise InvalidArgument("frame_size must be positive")
        if self.targets.count < 0:
            raise InvalidArgument("target count must be non-negative")
        if 2 * self.targets.margin_px >= self.frame_size:
            raise InvalidArgument("target margin leaves no room in the frame")
        per_patch = self.targets.count * REFERENCE_PATCH**2 / self.frame_size**2
        if per_patch >= 0.5:
            raise InvalidArgument(
                f"targets too dense: {per_patch:.2f} expected per {REFERENCE_PATCH}px patch (must be < 0.5)"
            )

    @property
    def area_mm2(self) -> float:
        return (self.frame_size * self.pixel_um * 1e-3) ** 2


@dataclass(frozen=True)
class Annotation:
    x: float
    y: float
    radius: float
    class_tag: str = "target"

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class LabeledPatch:
    pixels: Frame
    label: int
    source: tuple  # (group_id, frame_id, x, y)
    contributors: list = field(default_factory=list)  # [(patch_id, label), ...]

    @property
    def group_id(self) -> str:
        return self.source[0]

    @property
    def id(self) -> str:
        g, f, x, y = self.source
        return f"{g}-{f}-{x}-{y}"


def _paint_ellipse(img, cx, cy, a, b, theta, level):
    """Darken pixels inside the ellipse to ``level`` (never brighten)."""
    r = int(math.ceil(max(a, b))) + 1
    h, w = img.shape
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 2)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    inside = u * u + v * v <= 1.0
    region = img[y0:y1, x0:x1]
    np.minimum(region, np.where(inside, level, region), out=region)


def generate_phantom(spec: PhantomSpec, seed) -> tuple[Frame, list[Annotation]]:
    size = spec.frame_size
    rng = np.random.default_rng(seed)
    bg, tg = spec.background, spec.targets
    img = np.full((size, size), bg.field_level, dtype=np.float64)

    n_discs = rng.poisson(bg.disc_density_per_mm2 * spec.area_mm2)
    centers = rng.uniform(0, size, size=(n_discs, 2))
    radii = rng.uniform(*bg.radius_px, size=n_discs)
    levels = rng.uniform(*bg.intensity, size=n_discs)
    for (cx, cy), r, lv in zip(centers, radii, levels):
        _paint_ellipse(img, cx, cy, r, r, 0.0, lv)

    annotations = []
    lo, hi = tg.margin_px, size - tg.margin_px
    for _ in range(tg.count):
        cx, cy = rng.uniform(lo, hi, size=2)
        r = rng.uniform(*tg.radius_px)
        ecc = rng.uniform(1.0, tg.max_eccentricity)
        theta = rng.uniform(0, math.pi)
        level = rng.uniform(*tg.intensity)
        _paint_ellipse(img, cx, cy, r * math.sqrt(ecc), r / math.sqrt(ecc), theta, level)
        annotations.append(Annotation(float(cx), float(cy), float(r), "target"))

    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if bg.texture_sigma > 0:
        img = img + rng.normal(0.0, bg.texture_sigma, size=img.shape)
    return quantize(Frame(img), spec.n_bit), annotations


def extract_patches(
    frame: Frame,
    annotations: Sequence[Annotation],
    patch_size: int,
    inner_fraction: float = 1 / 3,
    stride: int | None = None,
    *,
    group_id: str = "g000",
    frame_id: int = 0,
    sampling: str = "grid",
    seed=None,
) -> list[LabeledPatch]:
    """Cut square patches and label them by the inner-region rule.

    A patch is positive when a target centroid falls inside the centred square
    of side ``inner_fraction * patch_size``. Patches touched by a target whose
    centroid lies outside that square are dropped as ambiguous.

    ``sampling="grid"`` walks a regular grid with the given stride;
    ``sampling="random"`` draws the same number of uniformly random origins.
    """
    h, w = frame.height, frame.width
    if patch_size > min(h, w):
        raise InvalidArgument(f"patch_size {patch_size} exceeds frame {w}x{h}")
    if not 0 < inner_fraction <= 1:
        raise InvalidArgument("inner_fraction must lie in (0, 1]")
    if stride is None:
        stride = max(1, int(round(inner_fraction * patch_size)))
    ys = list(range(0, h - patch_size + 1, stride))
    xs = list(range(0, w - patch_size + 1, stride))
    if sampling == "grid":
        origins = [(x, y) for y in ys for x in xs]
    elif sampling == "random":
        rng = np.random.default_rng(seed)
        k = len(ys) * len(xs)
        oy = rng.integers(0, h - patch_size + 1, size=k)
        ox = rng.integers(0, w - patch_size + 1, size=k)
        origins = list(zip(ox.tolist(), oy.tolist()))
    else:
        raise InvalidArgument(f"unknown sampling policy {sampling!r}")

    side = inner_fraction * patch_size
    lo = (patch_size - side) / 2
    hi = lo + side
    targets = [a for a in annotations if a.class_tag == "target"]
    t_xy = np.array([[a.x, a.y] for a in targets], dtype=np.float64).reshape(-1, 2)
    t_r = np.array([a.radius for a in targets], dtype=np.float64)

    patches = []
    for x, y in origins:
        label = 0
        if len(targets):
            px = t_xy[:, 0] - x
            py = t_xy[:, 1] - y
            inner = (px >= lo) & (px < hi) & (py >= lo) & (py < hi)
            # nearest point of the patch square to each centroid
            nx = np.clip(px, 0, patch_size) - px
            ny = np.clip(py, 0, patch_size) - py
            touches = nx * nx + ny * ny <= t_r * t_r
            if inner.any():
                label = 1
            elif touches.any():
                continue
        pix = frame.data[y : y + patch_size, x : x + patch_size].copy()
        patches.append(LabeledPatch(Frame(pix, frame.n_bit), label, (group_id, frame_id, x, y)))
    return patches


def balance(patches: Sequence[LabeledPatch], ratio=(1, 1), seed=0) -> list[LabeledPatch]:
    """Keep the smaller class whole and subsample the larger one to ``ratio``.

    ``ratio`` is (positive, negative). The output preserves input order.
    """
    pos = [i for i, p in enumerate(patches) if p.label == 1]
    neg = [i for i, p in enumerate(patches) if p.label == 0]
    if not pos or not neg:
        raise UnsatisfiableBalance(f"need both classes, got {len(pos)} positive / {len(neg)} negative")
    a, b = ratio
    if a <= 0 or b <= 0:
        raise InvalidArgument("ratio terms must be positive")
    rng = np.random.default_rng(seed)
    if len(pos) <= len(neg):
        keep, pool, need = pos, neg, len(pos) * b / a
    else:
        keep, pool, need = neg, pos, len(neg) * a / b
    need = int(round(need))
    if need > len(pool) or need < 1:
        raise UnsatisfiableBalance(
            f"ratio {a}:{b} needs {need} from a class of {len(pool)}; cannot upsample"
        )
    chosen = rng.choice(len(pool), size=need, replace=False)
    selected = sorted(keep + [pool[i] for i in chosen])
    return [patches[i] for i in selected]


@dataclass
class DatasetManifest:
    patches: list[LabeledPatch]
    split: str = "train"
    patch_size: int = REFERENCE_PATCH
    inner_fraction: float = 1 / 3
    seed: int = 0

    def __len__(self):
        return len(self.patches)

    @property
    def group_ids(self) -> set:
        return {p.group_id for p in self.patches}

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patches], dtype=np.int64)

    def save(self, root) -> Path:
        """Write ``<split>/<label>/<id>.pgm`` files and ``<split>.json`` under ``root``."""
        root = Path(root)
        entries = []
        for idx, p in enumerate(self.patches):
            rel = Path(self.split) / str(p.label) / f"{idx:06d}.pgm"
            write_pnm(root / rel, p.pixels)
            entries.append(
                {
                    "path": rel.as_posix(),
                    "label": p.label,
                    "source": list(p.source),
                    "contributors": [list(c) for c in p.contributors],
                }
            )
        doc = {
            "patch_size": self.patch_size,
            "inner_fraction": self.inner_fraction,
            "split": self.split,
            "seed": self.seed,
            "entries": entries,
        }
        path = root / f"{self.split}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path


def _allocate(total, fractions):
    """Largest-remainder apportionment; every positive fraction gets >= 1."""
    raw = [f * total for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(3), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if fractions[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_by_group(patches: Sequence[LabeledPatch], fractions=(0.7, 0.15, 0.15), seed=0, **meta):
    """Partition whole groups into train/val/test manifests."""
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise InvalidArgument(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    groups = sorted({p.group_id for p in patches})
    needed = sum(1 for f in fractions if f > 0)
    if len(groups) < needed:
        raise InvalidArgument(f"{len(groups)} groups cannot fill {needed} non-empty splits")
    counts = _allocate(len(groups), fractions)
    rng = np.random.default_rng(seed)
    order = [groups[i] for i in rng.permutation(len(groups))]
    assign = {}
    for i, g in enumerate(order):
        assign[g] = "train" if i < counts[0] else ("val" if i < counts[0] + counts[1] else "test")
    out = []
    for name in ("train", "val", "test"):
        out.append(
            DatasetManifest([p for p in patches if assign[p.group_id] == name], split=name, seed=seed, **meta)
        )
    return tuple(out)


def compose_overlap_dataset(
    singles: Sequence[LabeledPatch],
    n: int,
    count_per_class: int,
    sensor: SensorModel,
    seed,
) -> list[LabeledPatch]:
    """Build ``count_per_class`` positive and negative n-fold overlapped patches.

    A positive combines one positive single with ``n - 1`` distinct negatives;
    a negative combines ``n`` distinct negatives. Each example draws from its
    own ``(seed, index)`` stream, so examples can be generated in any order.
    """
    if n < 1:
        raise InvalidArgument(f"overlap number must be >= 1, got {n}")
    pos = [p for p in singles if p.label == 1]
    neg = [p for p in singles if p.label == 0]
    if count_per_class > 0 and (not pos or len(neg) < n):
        raise InvalidArgument(
            f"need >=1 positive and >={n} negative singles, got {len(pos)} / {len(neg)}"
        )
    out = []
    for idx in range(2 * count_per_class):
        rng = np.random.default_rng([int(seed), idx])
        positive = idx < count_per_class
        if positive:
            parts = [pos[rng.integers(len(pos))]]
            parts += [neg[i] for i in rng.choice(len(neg), size=n - 1, replace=False)]
        else:
            parts = [neg[i] for i in rng.choice(len(neg), size=n, replace=False)]
        noise_seed = int(rng.integers(2**63))
        pix = synthesize_overlap([p.pixels for p in parts], sensor, noise_seed)
        label = int(any(p.label for p in parts))
        out.append(
            LabeledPatch(
                pix,
                label,
                (parts[0].group_id, f"n{n}", idx, 0),
                [(p.id, p.label) for p in parts],
            )
        )
    return out


def overlap_frames(scenes, sensor: SensorModel, seed) -> tuple[Frame, list[Annotation]]:
    """Superimpose whole phantom frames; annotations are the union of all inputs."""
    frames = [f for f, _ in scenes]
    merged = [a for _, anns in scenes for a in anns]
    return synthesize_overlap(frames, sensor, seed), merged


def load_external(manifest_path) -> list[LabeledPatch]:
    """Read a DatasetManifest JSON and the PGM/PPM files it references."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"missing manifest: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed manifest JSON in {manifest_path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise LoadError(f"{manifest_path}: manifest must be an object with an 'entries' list")
    base = manifest_path.parent
    out = []
    for k, e in enumerate(doc["entries"]):
        try:
            rel, label = e["path"], e["label"]
        except (KeyError, TypeError) as exc:
            raise LoadError(f"{manifest_path}: entry {k} lacks path/label") from exc
        if label not in (0, 1) or isinstance(label, bool):
            raise LoadError(f"{manifest_path}: entry {k} has label {label!r}, expected 0 or 1")
        frame = read_pnm(base / rel)
        source = e.get("source") or [doc.get("split", "external"), k, 0, 0]
        if len(source) != 4:
            raise LoadError(f"{manifest_path}: entry {k} source must have 4 fields")
        contributors = [tuple(c) for c in e.get("contributors", [])]
        out.append(LabeledPatch(frame, int(label), tuple(source), contributors))
    return out


def write_annotations_csv(path, rows) -> None:
    """``rows`` is an iterable of (frame_id, Annotation)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame_id", "x", "y", "radius", "class"])
        for frame_id, a in rows:
            wr.writerow([frame_id, f"{a.x:.4f}", f"{a.y:.4f}", f"{a.radius:.4f}", a.class_tag])


def read_annotations_csv(path) -> dict:
    """Return ``{frame_id: [Annotation, ...]}``."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            a = Annotation(float(row["x"]), float(row["y"]), float(row["radius"]), row["class"])
            out.setdefault(row["frame_id"], []).append(a)
    return out


def with_group(spec: PhantomSpec, group_id: str) -> PhantomSpec:
    return replace(spec, group_id=group_id)


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)


def phantom_singles(
    spec: PhantomSpec,
    n_frames: int,
    patch_size: int,
    inner_fraction: float = 1 / 3,
    stride: int | None = None,
    seed: int = 0,
    balance_ratio=(1, 1),
) -> list[LabeledPatch]:
    """Single-FOV patch set from ``n_frames`` phantoms, one group per frame."""
    out = []
    for i in range(n_frames):
        gid = f"g{i:04d}"
        frame, anns = generate_phantom(with_group(spec, gid), [int(seed), i])
        out.extend(extract_patches(frame, anns, patch_size, inner_fraction, stride, group_id=gid, frame_id=i))
    if balance_ratio is None:
        return out
    return balance(out, balance_ratio, seed)
