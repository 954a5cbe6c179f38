"""Noise schedules for training and reduced-step inference."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step quantities for t = 1..T, stored 0-based (index t-1)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kappa: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def row(self, t: int) -> tuple[float, float, float]:
        """(alpha_t, alpha_bar_t, sigma_t) for 1 <= t <= T."""
        self._check(t)
        i = t - 1
        return float(self.alpha[i]), float(self.alpha_bar[i]), float(self.sigma[i])

    def _check(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise IndexError(f"step {t} outside 1..{self.T}")

    def descriptor(self) -> dict:
        return {"kind": "linear", "T": self.T,
                "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar", "sigma", "kappa"])
            for i in range(self.T):
                w.writerow([i + 1, repr(float(self.beta[i])), repr(float(self.alpha_bar[i])),
                            repr(float(self.sigma[i])), repr(float(self.kappa[i]))])


@dataclass(frozen=True)
class InferenceSchedule:
    """Reverse-process schedule with S steps.

    ``alpha_bar_seq[s]`` for s = 0..S, with ``alpha_bar_seq[0] = 1``; reverse
    step s uses ``alpha[s-1]``, ``alpha_bar_seq[s]`` and ``sigma[s-1]``.
    """

    S: int
    one_minus_alpha: np.ndarray
    alpha: np.ndarray
    alpha_bar_seq: np.ndarray
    sigma: np.ndarray

    def row(self, s: int) -> tuple[float, float, float]:
        if not 1 <= s <= self.S:
            raise IndexError(f"step {s} outside 1..{self.S}")
        return float(self.alpha[s - 1]), float(self.alpha_bar_seq[s]), float(self.sigma[s - 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "one_minus_alpha", "alpha", "alpha_bar", "sigma"])
            for s in range(1, self.S + 1):
                w.writerow([s, repr(float(self.one_minus_alpha[s - 1])), repr(float(self.alpha[s - 1])),
                            repr(float(self.alpha_bar_seq[s])), repr(float(self.sigma[s - 1]))])


def build_linear(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    sigma = np.sqrt(beta)
    kappa = alpha_bar ** 2
    sigma.setflags(write=False)
    kappa.setflags(write=False)
    return NoiseSchedule(int(T), beta, alpha, alpha_bar, sigma, kappa)


def sample_noise_level(schedule: NoiseSchedule, rng: np.random.Generator) -> tuple[int, float]:
    """Uniform step t, then a continuous alpha_bar uniform in [alpha_bar_t, alpha_bar_{t-1}]."""
    t = int(rng.integers(1, schedule.T + 1))
    lo = schedule.alpha_bar_at(t)
    hi = schedule.alpha_bar_at(t - 1)
    return t, float(rng.uniform(lo, hi))


SIGMA_RULES = ("posterior", "beta")


def build_inference(S: int, one_minus_alpha_first: float, one_minus_alpha_last: float,
                    sigma_rule: str = "posterior") -> InferenceSchedule:
    """Linear 1 - alpha from first to last over S reverse steps.

    ``posterior`` noise uses the DDPM posterior std
    sqrt(beta_s (1 - alpha_bar_{s-1}) / (1 - alpha_bar_s)); ``beta`` uses
    sqrt(beta_s). The two agree for fine schedules, but on a coarse one the
    beta rule injects noise at step 2 that the final step cannot remove.
    """
    if sigma_rule not in SIGMA_RULES:
        raise ConfigError(f"sigma_rule must be one of {SIGMA_RULES}, got {sigma_rule!r}")
    if int(S) != S or S < 1:
        raise ConfigError(f"step count must be a positive integer, got {S}")
    first, last = float(one_minus_alpha_first), float(one_minus_alpha_last)
    if not 0.0 < first <= last < 1.0:
        raise ConfigError(f"need 0 < first <= last < 1, got {first}, {last}")
    oma = np.linspace(first, last, int(S), dtype=np.float64)
    alpha = 1.0 - oma
    alpha_bar_seq = np.concatenate([[1.0], np.cumprod(alpha)])
    if sigma_rule == "beta":
        sigma = np.sqrt(oma)
    else:
        sigma = np.sqrt(oma * (1.0 - alpha_bar_seq[:-1]) / (1.0 - alpha_bar_seq[1:]))
    return InferenceSchedule(int(S), oma, alpha, alpha_bar_seq, sigma)


# Reverse-process presets (steps, 1-alpha first, 1-alpha last).
PRESETS = {
    "lolv1": (20, 6e-4, 0.88),
    "lolv2-real": (10, 9e-4, 0.85),
    "lolv2-synthetic": (10, 2e-3, 0.84),
}


def read_schedule_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
