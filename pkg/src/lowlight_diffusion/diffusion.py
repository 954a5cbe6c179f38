"""Closed-form forward sampling, the learnable previous-step sample and the reverse sampler."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np

from . import denoiser
from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, NumericalError
from .schedules import InferenceSchedule, NoiseSchedule


def forward_sample(x0, alpha_bar, eps):
    """x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps.

    ``alpha_bar`` may be a scalar or one value per leading-axis sample.
    """
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = _per_sample(alpha_bar, x0)
    if np.any(ab <= 0) or np.any(ab > 1):
        raise NumericalError("alpha_bar must lie in (0, 1]")
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def predict_x0(x_t, eps_hat, alpha_bar):
    """Invert the closed form: (x_t - sqrt(1 - alpha_bar) eps_hat) / sqrt(alpha_bar)."""
    x_t, eps_hat = np.asarray(x_t), np.asarray(eps_hat)
    ab = _per_sample(alpha_bar, x_t)
    if np.any(ab <= 0):
        raise NumericalError(f"alpha_bar must be positive, got {alpha_bar}")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def _per_sample(value, like: np.ndarray) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        return v
    if v.shape != (like.shape[0],):
        raise DimensionError(f"need a scalar or one value per sample, got {v.shape} for {like.shape}")
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def learnable_prev(x_t, eps_hat, t, schedule: NoiseSchedule, z=None) -> Tensor:
    """X_{t-1} = (X_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t) + sigma_t z.

    ``eps_hat`` may be a tensor on a tape, in which case the result carries the
    gradient path back into the network. ``t`` is a step or one step per sample;
    z must be zero wherever t == 1 (it is forced to zero there).
    """
    eps_hat = dc.as_tensor(eps_hat)
    x_t = np.asarray(getattr(x_t, "data", x_t))
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    t_arr = np.asarray(t)
    schedule._check(t_arr)
    idx = t_arr.astype(int) - 1
    alpha, alpha_bar, sigma = schedule.alpha[idx], schedule.alpha_bar[idx], schedule.sigma[idx]
    sigma = np.where(t_arr == 1, 0.0, sigma)
    dtype = eps_hat.dtype

    def full(v):
        return np.broadcast_to(_per_sample(v, x_t), x_t.shape).astype(dtype)

    coef = full((1.0 - alpha) / (np.sqrt(1.0 - alpha_bar) * np.sqrt(alpha)))
    out = dc.add(dc.mul(eps_hat, -coef), (x_t / full(np.sqrt(alpha))).astype(dtype))
    if z is not None:
        out = dc.add(out, (full(sigma) * np.asarray(z)).astype(dtype))
    return out


# -- reverse process ---------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """Snapshots of one reverse run, from step S (pure noise) down to 0."""

    steps: list = field(default_factory=list)
    alpha_bars: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def add(self, step: int, alpha_bar: float, x: np.ndarray) -> None:
        self.steps.append(int(step))
        self.alpha_bars.append(float(alpha_bar))
        self.snapshots.append(np.array(x, dtype=np.float32, copy=True))

    def to_csv(self, path, ground_truth: Optional[np.ndarray] = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step", "alpha_bar", "mean_intensity"]
            if ground_truth is not None:
                header.append("dist_to_gt")
            w.writerow(header)
            for s, ab, x in zip(self.steps, self.alpha_bars, self.snapshots):
                row = [s, f"{ab:.9g}", f"{float(x.mean(dtype=np.float64)):.9g}"]
                if ground_truth is not None:
                    d = np.sqrt(np.sum((x.astype(np.float64) - ground_truth) ** 2))
                    row.append(f"{d:.9g}")
                w.writerow(row)


NoiseFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def params_noise_fn(params: Mapping[str, np.ndarray]) -> NoiseFn:
    """Wrap network parameters as ``fn(y_hwc, x_hwc, alpha_bar) -> eps_hwc``."""
    def fn(y, x, alpha_bar):
        out = denoiser.forward(params, denoiser.hwc_to_nchw(y), denoiser.hwc_to_nchw(x), alpha_bar)
        return denoiser.nchw_to_hwc(out.data)[0]
    return fn


def enhance(
    model: Union[Mapping[str, np.ndarray], NoiseFn],
    y: np.ndarray,
    schedule: InferenceSchedule,
    rng: np.random.Generator,
    record: bool = False,
    noise_scale: float = 1.0,
) -> tuple[np.ndarray, Optional[TrajectoryRecord]]:
    """Reverse process conditioned on the low-light image ``y`` (H, W, 3).

    Starts from standard Gaussian noise and applies the ancestral update over
    the inference schedule; ``noise_scale=0`` drops the injected noise. The
    result is clamped to [0, 1] once, after the last step.
    """
    if schedule.S < 1:
        raise ConfigError("inference schedule is empty")
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 3 or y.shape[0] % 4 or y.shape[1] % 4:
        raise DimensionError(f"y must be (H, W, 3) with H, W divisible by 4, got {y.shape}")
    fn = model if callable(model) else params_noise_fn(model)
    x = rng.standard_normal(y.shape).astype(np.float32)
    rec = TrajectoryRecord() if record else None
    if rec is not None:
        rec.add(schedule.S, schedule.alpha_bar_seq[schedule.S], x)
    for s in range(schedule.S, 0, -1):
        alpha, alpha_bar, sigma = schedule.row(s)
        eps_hat = np.asarray(fn(y, x, alpha_bar), dtype=np.float64)
        x64 = (x - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha)
        if s > 1:
            z = rng.standard_normal(y.shape)
            x64 = x64 + noise_scale * sigma * z
        x = x64.astype(np.float32)
        if rec is not None:
            rec.add(s - 1, schedule.alpha_bar_seq[s - 1], x)
    if not np.all(np.isfinite(x)):
        raise NumericalError("reverse process produced non-finite values")
    return np.clip(x, 0.0, 1.0), rec
