"""VGG-like binary patch classifier written directly in numpy.

Each block is a stride-1 3x3 convolution followed by a stride-2 3x3
convolution, both with leaky ReLU. Five blocks give ten convolutional layers;
a global average pool feeds the single fully connected unit and a sigmoid.

Tensors are NHWC. Convolutions are lowered to one GEMM per layer on an
explicit im2col buffer; the backward pass scatters the column gradient back
with nine strided adds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, LoadError, TrainingFailure
from .noise import Frame

PROB_EPS = 1e-7
WEIGHTS_MAGIC = "overlapscope-weights/1"


@dataclass(frozen=True)
class ArchitectureSpec:
    input_size: int = 96
    input_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    leaky_slope: float = 0.01
    kernel: int = 3
    fc_outputs: int = 1
    head: str = "sigmoid"

    def __post_init__(self):
        if self.input_channels not in (1, 3):
            raise InvalidArgument("input_channels must be 1 or 3")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise InvalidArgument(f"invalid channel ladder {self.channels}")
        if self.kernel != 3 or self.fc_outputs != 1 or self.head != "sigmoid":
            raise InvalidArgument("only 3x3 kernels with a single sigmoid output are supported")
        if self.input_size < 2 ** len(self.channels):
            raise InvalidArgument(
                f"input_size {self.input_size} collapses below 1 px after {len(self.channels)} blocks"
            )

    @property
    def blocks(self) -> list[tuple[int, int, int, int]]:
        """(channels_out, conv1 stride, conv2 stride, kernel) per block."""
        return [(c, 1, 2, self.kernel) for c in self.channels]

    @property
    def n_conv_layers(self) -> int:
        return 2 * len(self.channels)

    def feature_sizes(self, size: int | None = None) -> list[int]:
        """Spatial side after each block."""
        s = self.input_size if size is None else size
        out = []
        for _ in self.channels:
            s = s // 2
            out.append(s)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class DetectorModel:
    """Architecture, trainable tensors and a fixed input standardization.

    ``input_mean``/``input_std`` are set from the training set by ``train``
    and applied before the first convolution; they are not trained.
    """

    arch: ArchitectureSpec
    params: dict[str, np.ndarray]
    init_seed: int = 0
    input_mean: float = 0.0
    input_std: float = 1.0

    def copy(self) -> "DetectorModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "DetectorModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    loss: str = "bce"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    augment: bool = True
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "bce":
            raise InvalidArgument("only binary cross-entropy is supported")


def _conv_names(arch: ArchitectureSpec):
    for b in range(len(arch.channels)):
        for j, stride in ((1, 1), (2, 2)):
            yield f"b{b + 1}c{j}", stride


def param_shapes(arch: ArchitectureSpec) -> dict[str, tuple]:
    shapes = {}
    cin = arch.input_channels
    for b, cout in enumerate(arch.channels):
        shapes[f"b{b + 1}c1.w"] = (3, 3, cin, cout)
        shapes[f"b{b + 1}c1.b"] = (cout,)
        shapes[f"b{b + 1}c2.w"] = (3, 3, cout, cout)
        shapes[f"b{b + 1}c2.b"] = (cout,)
        cin = cout
    shapes["fc.w"] = (cin, 1)
    shapes["fc.b"] = (1,)
    return shapes


def build_model(arch: ArchitectureSpec, seed, dtype=np.float32) -> DetectorModel:
    """He-normal kernels (std sqrt(2 / fan_in)) and zero biases."""
    if not isinstance(arch, ArchitectureSpec):
        raise InvalidArgument("arch must be an ArchitectureSpec")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return DetectorModel(arch, params, int(seed) if seed is not None else 0)


def leaky_relu(x, slope: float = 0.01):
    return np.where(x >= 0, x, slope * x)


# ---------------------------------------------------------------- conv kernels


def _pad(x, stride):
    # stride 2 pads only top/left so the output side is floor(H / 2)
    if stride == 1:
        return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.pad(x, ((0, 0), (1, 0), (1, 0), (0, 0)))


def _out_size(h, stride):
    return h if stride == 1 else h // 2


def conv_forward(x, w, b, stride):
    n, h, wd, cin = x.shape
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    xp = _pad(x, stride)
    cols = np.empty((n, ho, wo, 9, cin), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx, :] = xp[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :
            ]
    cols = cols.reshape(n * ho * wo, 9 * cin)
    out = cols @ w.reshape(9 * cin, -1)
    out += b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride)


def conv_backward(dout, w, cache):
    cols, xshape, stride = cache
    n, h, wd, cin = xshape
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(n, ho, wo, 9, cin)
    pad_hi = 1 if stride == 1 else 0
    dxp = np.zeros((n, h + 1 + pad_hi, wd + 1 + pad_hi, cin), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :
            ] += dcols[:, :, :, 3 * ky + kx, :]
    dx = dxp[:, 1 : 1 + h, 1 : 1 + wd, :]
    return dx, dw, db


# ------------------------------------------------------------- forward/backward


def as_batch(batch, arch: ArchitectureSpec, dtype=np.float32) -> np.ndarray:
    """Stack Frames (normalized by their bit depth) or pass through an array.

    Arrays are assumed already scaled to [0, 1]; shape (N, H, W) or (N, H, W, C).
    """
    if isinstance(batch, np.ndarray):
        x = batch.astype(dtype, copy=False)
    else:
        batch = list(batch)
        if batch and isinstance(batch[0], Frame):
            x = np.stack([f.normalized() for f in batch]).astype(dtype, copy=False)
        else:
            x = np.asarray(batch, dtype=dtype)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise InvalidArgument(f"batch must be 3-D or 4-D, got shape {x.shape}")
    expected = (arch.input_size, arch.input_size, arch.input_channels)
    if x.shape[1:] != expected:
        raise InvalidArgument(f"batch items have shape {x.shape[1:]}, architecture expects {expected}")
    return x


def _forward(model: DetectorModel, x: np.ndarray):
    arch, p = model.arch, model.params
    slope = x.dtype.type(arch.leaky_slope)
    caches = []
    h = x
    if model.input_mean != 0.0 or model.input_std != 1.0:
        h = (x - x.dtype.type(model.input_mean)) / x.dtype.type(model.input_std)
    for name, stride in _conv_names(arch):
        z, cc = conv_forward(h, p[name + ".w"], p[name + ".b"], stride)
        mask = z >= 0
        h = np.where(mask, z, slope * z)
        caches.append((name, cc, mask))
    n, hh, ww, c = h.shape
    feat = h.mean(axis=(1, 2))
    logits = (feat @ p["fc.w"])[:, 0] + p["fc.b"][0]
    return logits, (caches, feat, h.shape)


def forward_logits(model: DetectorModel, batch) -> np.ndarray:
    x = as_batch(batch, model.arch, model.dtype)
    return _forward(model, x)[0]


def forward(model: DetectorModel, batch, chunk: int = 256) -> np.ndarray:
    """Probability of the positive class, clipped into [eps, 1 - eps]."""
    x = as_batch(batch, model.arch, model.dtype)
    out = np.empty(len(x), dtype=np.float64)
    for i in range(0, len(x), chunk):
        out[i : i + chunk] = expit(_forward(model, x[i : i + chunk])[0].astype(np.float64))
    return np.clip(out, PROB_EPS, 1 - PROB_EPS)


def bce(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def loss_and_grad(model: DetectorModel, batch, labels):
    """Mean binary cross-entropy and its gradient for every parameter."""
    loss, grads, _ = _loss_grad_probs(model, batch, labels)
    return loss, grads


def _loss_grad_probs(model, batch, labels):
    x = as_batch(batch, model.arch, model.dtype)
    y = np.asarray(labels)
    if y.shape != (len(x),) or not np.isin(y, (0, 1)).all():
        raise InvalidArgument("labels must be a 0/1 vector matching the batch")
    y = y.astype(x.dtype)
    p_ = model.params
    logits, (caches, feat, last_shape) = _forward(model, x)
    raw = expit(logits)
    p = np.clip(raw, PROB_EPS, 1 - PROB_EPS)
    loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))

    nb = len(x)
    live = (raw > PROB_EPS) & (raw < 1 - PROB_EPS)
    dlogit = np.where(live, raw - y, 0).astype(x.dtype) / x.dtype.type(nb)
    grads = {}
    grads["fc.b"] = np.array([dlogit.sum()], dtype=x.dtype)
    grads["fc.w"] = (feat.T @ dlogit)[:, None]
    dfeat = dlogit[:, None] * p_["fc.w"][:, 0][None, :]
    _, hh, ww, c = last_shape
    dh = np.broadcast_to(dfeat[:, None, None, :] / x.dtype.type(hh * ww), last_shape)
    slope = x.dtype.type(model.arch.leaky_slope)
    for name, cc, mask in reversed(caches):
        dz = np.where(mask, dh, slope * dh)
        dh, dw, db = conv_backward(dz, p_[name + ".w"], cc)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
    return loss, {k: grads[k] for k in p_}, p


def numerical_grad(model: DetectorModel, x, y, epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the mean BCE, one parameter at a time."""

    def loss_at():
        logits = _forward(model, x)[0]
        return bce(expit(logits), y)

    out = {}
    for name, arr in model.params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_at()
            flat[i] = orig - epsilon
            lm = loss_at()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * epsilon)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor); the floor absorbs finite-difference roundoff on near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


def gradient_check(arch: ArchitectureSpec, seed, epsilon: float = 1e-5, batch: int = 4) -> float:
    """Max elementwise relative error of analytic vs central-difference gradients.

    Runs in float64 on a random batch with random labels. Biases are drawn
    non-zero so their gradients are exercised away from the init point.
    """
    rng = np.random.default_rng([int(seed), 1])
    model = build_model(arch, seed, dtype=np.float64)
    for k, v in model.params.items():
        if k.endswith(".b"):
            v[...] = rng.normal(0, 0.1, size=v.shape)
    x = rng.uniform(0, 1, size=(batch, arch.input_size, arch.input_size, arch.input_channels))
    y = (np.arange(batch) % 2).astype(np.float64)
    rng.shuffle(y)
    _, analytic = loss_and_grad(model, x, y)
    numeric = numerical_grad(model, x, y, epsilon)
    return max(relative_error(analytic[k], numeric[k]) for k in model.params)


# -------------------------------------------------------------------- training


class _Adam:
    def __init__(self, params, lr, betas):
        self.lr, (self.b1, self.b2) = lr, betas
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)).astype(params[k].dtype)


class _SGDMomentum:
    def __init__(self, params, lr, momentum):
        self.lr, self.mu = lr, momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            vel = self.vel[k]
            vel *= self.mu
            vel -= self.lr * g
            params[k] += vel


def _dataset_arrays(data, arch: ArchitectureSpec):
    patches = getattr(data, "patches", data)
    if len(patches) == 0:
        raise InvalidArgument("dataset is empty")
    x = as_batch([p.pixels for p in patches], arch)
    y = np.array([p.label for p in patches], dtype=np.float32)
    return x, y


def _augment(xb, rng):
    # random dihedral transform per example
    out = np.empty_like(xb)
    ks = rng.integers(0, 4, size=len(xb))
    flips = rng.integers(0, 2, size=len(xb))
    for i in range(len(xb)):
        img = np.rot90(xb[i], k=int(ks[i]), axes=(0, 1))
        if flips[i]:
            img = img[:, ::-1]
        out[i] = img
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def train(model: DetectorModel, train_data, val_data, config: TrainConfig, log=None):
    """Fit ``model`` and return the weights with the best validation accuracy.

    Returns ``(best_model, history)``. ``model`` itself is not modified.
    """
    # overflow shows up as a non-finite loss, reported as TrainingFailure
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(model, train_data, val_data, config, log)


def _train(model, train_data, val_data, config, log):
    arch = model.arch
    xtr, ytr = _dataset_arrays(train_data, arch)
    xva, yva = _dataset_arrays(val_data, arch)
    model = model.copy()
    if config.standardize:
        model.input_mean = float(xtr.mean(dtype=np.float64))
        model.input_std = float(max(xtr.std(dtype=np.float64), 1e-6))
    rng = np.random.default_rng([int(config.seed), 7])
    if config.optimizer == "adam":
        opt = _Adam(model.params, config.learning_rate, config.betas)
    else:
        opt = _SGDMomentum(model.params, config.learning_rate, config.momentum)

    history: list[EpochRecord] = []
    best, best_acc = model.copy(), -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xtr))
        tot_loss, tot_correct = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            xb = xtr[idx]
            if config.augment:
                xb = _augment(xb, rng)
            loss, grads, probs = _loss_grad_probs(model, xb, ytr[idx])
            if not np.isfinite(loss):
                raise TrainingFailure(epoch)
            opt.step(model.params, grads)
            tot_loss += loss * len(idx)
            tot_correct += int(np.sum((probs >= 0.5) == (ytr[idx] == 1)))
        # running metrics over the epoch's minibatches
        tr_loss = tot_loss / len(order)
        tr_acc = tot_correct / len(order)
        va_probs = forward(model, xva)
        va_loss = bce(va_probs, yva)
        va_acc = float(np.mean((va_probs >= 0.5) == (yva == 1)))
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise TrainingFailure(epoch)
        history.append(EpochRecord(epoch, tr_loss, tr_acc, va_loss, va_acc))
        if log is not None:
            log(f"epoch {epoch}: train_loss={tr_loss:.4f} train_acc={tr_acc:.4f} val_loss={va_loss:.4f} val_acc={va_acc:.4f}")
        if va_acc > best_acc:
            best, best_acc = model.copy(), va_acc
    return best, history


def predict_ensemble(models: Sequence[DetectorModel], batch) -> np.ndarray:
    """Arithmetic mean of per-model probabilities."""
    models = list(models)
    if not models:
        raise InvalidArgument("ensemble needs at least one model")
    arch = models[0].arch
    if any(m.arch != arch for m in models[1:]):
        raise InvalidArgument("ensemble members must share one architecture")
    x = as_batch(batch, arch)
    return np.mean([forward(m, x) for m in models], axis=0)


# ------------------------------------------------------------------ persistence


def save_weights(path, model: DetectorModel, extra: dict | None = None) -> None:
    """One JSON header line, then the concatenated little-endian float32 tensors."""
    layers, blobs, offset = [], [], 0
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": WEIGHTS_MAGIC,
        "arch": model.arch.to_dict(),
        "init_seed": model.init_seed,
        "input_mean": model.input_mean,
        "input_std": model.input_std,
        "layers": layers,
    }
    if extra:
        header["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> DetectorModel:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"missing weights file: {path}") from exc
    head, sep, data = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: weights header is not JSON") from exc
    if not sep or header.get("format") != WEIGHTS_MAGIC:
        raise LoadError(f"{path}: not an overlapscope weights file")
    arch = ArchitectureSpec.from_dict(header["arch"])
    params = {}
    for layer in header["layers"]:
        chunk = data[layer["offset"] : layer["offset"] + layer["nbytes"]]
        if len(chunk) != layer["nbytes"]:
            raise LoadError(f"{path}: truncated tensor {layer['name']}")
        params[layer["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(layer["shape"])
    expected = param_shapes(arch)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise LoadError(f"{path}: tensor shapes do not match the stored architecture")
    return DetectorModel(
        arch,
        params,
        header.get("init_seed", 0),
        float(header.get("input_mean", 0.0)),
        float(header.get("input_std", 1.0)),
    )


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in history:
            wr.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_loss:.6f}", f"{r.val_acc:.6f}"])
