"""Digital overlap synthesis with shot-noise-consistent compensation noise.

Averaging ``n`` single-FOV exposures leaves a pixel with ``1/n`` of the
shot-noise variance a physical ``n``-fold overlap would have. The missing
variance is restored with zero-mean Gaussian noise whose variance is
``x_avg * (1 - 1/n) * 2**n_bit / v`` in digital numbers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .optics import SensorModel


@dataclass
class Frame:
    """Image buffer of shape (height, width) or (height, width, channels).

    ``n_bit`` is None for real-valued frames and the quantization depth for
    digital-number frames.
    """

    data: np.ndarray
    n_bit: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (2, 3):
            raise InvalidArgument(f"frame data must be 2-D or 3-D, got shape {self.data.shape}")
        if self.data.ndim == 3 and self.data.shape[2] not in (1, 3):
            raise InvalidArgument(f"frames carry 1 or 3 channels, got {self.data.shape[2]}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def quantized(self) -> bool:
        return self.n_bit is not None

    def normalized(self) -> np.ndarray:
        """Float32 copy scaled to [0, 1] by the full-scale digital number."""
        if self.n_bit is None:
            raise InvalidArgument("only quantized frames have a full scale")
        return self.data.astype(np.float32) / np.float32(2**self.n_bit - 1)


def _dtype_for(n_bit: int):
    return np.uint8 if n_bit <= 8 else np.uint16


def quantize(frame: Frame, n_bit: int) -> Frame:
    """Round half to even, then clamp to [0, 2**n_bit - 1]."""
    if n_bit < 1:
        raise InvalidArgument(f"n_bit must be >= 1, got {n_bit}")
    top = 2**n_bit - 1
    q = np.clip(np.rint(np.asarray(frame.data, dtype=np.float64)), 0, top)
    return Frame(q.astype(_dtype_for(n_bit)), n_bit=n_bit)


def average_stack(patches: Sequence[Frame]) -> Frame:
    if len(patches) == 0:
        raise InvalidArgument("cannot average an empty stack")
    shape = patches[0].data.shape
    for p in patches[1:]:
        if p.data.shape != shape:
            raise InvalidArgument(f"shape mismatch in stack: {p.data.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for p in patches:
        acc += p.data
    return Frame(acc / len(patches), n_bit=None)


def compensation_variance(x_avg, n: int, sensor: SensorModel):
    x_avg = np.asarray(x_avg, dtype=np.float64)
    if n < 1:
        raise InvalidArgument(f"overlap number must be >= 1, got {n}")
    if np.any(x_avg < 0):
        raise InvalidArgument("pixel values must be non-negative")
    return x_avg * (1.0 - 1.0 / n) * (2.0**sensor.n_bit) / sensor.v


def compensation_sigma(x_avg_pixel, n: int, sensor: SensorModel):
    """Std. dev. (digital numbers) of the noise restoring shot-noise variance.

    Accepts a scalar or an array of averaged pixel values.
    """
    return np.sqrt(compensation_variance(x_avg_pixel, n, sensor))


def synthesize_overlap(patches: Sequence[Frame], sensor: SensorModel, seed) -> Frame:
    """Simulate a physical n-fold overlap from n single-FOV quantized frames."""
    if len(patches) == 0:
        raise InvalidArgument("need at least one frame to overlap")
    for p in patches:
        if p.n_bit != sensor.n_bit:
            raise InvalidArgument(
                f"frame bit depth {p.n_bit} does not match sensor n_bit={sensor.n_bit}"
            )
    n = len(patches)
    avg = average_stack(patches)
    if n == 1:
        return quantize(avg, sensor.n_bit)
    rng = np.random.default_rng(seed)
    sigma = compensation_sigma(avg.data, n, sensor)
    noisy = avg.data + rng.standard_normal(avg.data.shape) * sigma
    return quantize(Frame(noisy), sensor.n_bit)


@dataclass
class OracleStats:
    lambda_total: float
    mean_real: float
    var_real: float
    mean_sim: float
    var_sim: float
    trials: int
    n: int = 1

    @property
    def mean_rel_error(self) -> float:
        return abs(self.mean_sim - self.lambda_total) / self.lambda_total

    @property
    def var_rel_error(self) -> float:
        return abs(self.var_sim - self.lambda_total) / self.lambda_total

    def within(self, mean_rtol: float = 0.01, var_rtol: float = 0.02) -> bool:
        return self.mean_rel_error <= mean_rtol and self.var_rel_error <= var_rtol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_rel_error"] = self.mean_rel_error
        d["var_rel_error"] = self.var_rel_error
        return d


def poisson_oracle(lambdas: Sequence[float], sensor: SensorModel | None, trials: int, seed) -> OracleStats:
    """Monte Carlo comparison of physical overlap against compensated averaging.

    Works in photoelectron units, so ``sensor`` only matters for callers that
    want to record it; it is accepted to keep the signature aligned with the
    image-domain path.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise InvalidArgument("lambdas must be a non-empty 1-D sequence")
    if np.any(lam <= 0):
        raise InvalidArgument("all Poisson rates must be positive")
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    n = lam.size
    total = float(lam.sum())
    rng = np.random.default_rng(seed)

    x_real = rng.poisson(total, size=trials).astype(np.float64)
    # each FOV imaged alone at n-fold illumination
    x_q = rng.poisson(n * lam, size=(trials, n)).astype(np.float64)
    x_sim = x_q.mean(axis=1)
    z = rng.standard_normal(trials) * np.sqrt((1.0 - 1.0 / n) * x_sim)
    x_sim_c = x_sim + z

    ddof = 1 if trials > 1 else 0
    return OracleStats(
        lambda_total=total,
        mean_real=float(x_real.mean()),
        var_real=float(x_real.var(ddof=ddof)),
        mean_sim=float(x_sim_c.mean()),
        var_sim=float(x_sim_c.var(ddof=ddof)),
        trials=trials,
        n=n,
    )
