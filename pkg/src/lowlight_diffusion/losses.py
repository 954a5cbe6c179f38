"""Uncertainty pretraining objective and the uncertainty-weighted noise objective."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError

WEIGHT_MIN, WEIGHT_MAX = 0.1, 10.0
WEIGHT_MODES = ("exp", "normalized", "raw")


def _same_shape(*xs) -> None:
    shapes = {tuple(np.shape(getattr(x, "data", x))) for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"operands must share a shape, got {sorted(shapes)}")


def uncertainty_loss(eps, eps_hat, p) -> Tensor:
    """mean(exp(-p) * |eps - eps_hat|) + 2 * mean(p).

    Per pixel the minimizer over p is ln(|eps - eps_hat| / 2).
    """
    _same_shape(eps, eps_hat, p)
    p = dc.as_tensor(p)
    resid = dc.abs(dc.sub(dc.as_tensor(eps_hat), np.asarray(getattr(eps, "data", eps))))
    return dc.add(dc.mean(dc.mul(dc.exp(dc.neg(p)), resid)), dc.mul(dc.mean(p), 2.0))


def uncertainty_weights(p: Optional[np.ndarray], shape=None, mode: str = "exp") -> np.ndarray:
    """Positive per-pixel weights from a (frozen) log-uncertainty map.

    ``exp``: clamp(e^p, 0.1, 10). ``normalized``: the same weights divided by
    their per-sample mean, so only the spatial pattern matters and every noise
    level carries equal total weight. ``raw`` multiplies by p itself, as literally
    written in the training algorithm; it is only meaningful when p > 0.
    """
    if p is None:
        return np.ones(shape, dtype=np.float32)
    p = np.asarray(p)
    if mode == "exp":
        return np.clip(np.exp(p), WEIGHT_MIN, WEIGHT_MAX).astype(p.dtype)
    if mode == "normalized":
        w = np.clip(np.exp(p), WEIGHT_MIN, WEIGHT_MAX)
        axes = tuple(range(1, w.ndim))
        return (w / w.mean(axis=axes, keepdims=True)).astype(p.dtype)
    if mode == "raw":
        return p
    raise ConfigError(f"unknown weight mode {mode!r}; choose from {WEIGHT_MODES}")


def weighted_noise_loss(eps, eps_hat, p=None, lam: float = 10.0, mode: str = "exp") -> Tensor:
    """lam * mean(w * |eps - eps_hat|); ``p=None`` gives unit weights.

    ``p`` is treated as a constant: the uncertainty branch is frozen here.
    """
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    eps_hat = dc.as_tensor(eps_hat)
    eps = np.asarray(getattr(eps, "data", eps))
    if p is not None:
        _same_shape(eps, eps_hat, p)
    else:
        _same_shape(eps, eps_hat)
    w = uncertainty_weights(None if p is None else np.asarray(getattr(p, "data", p)), eps.shape, mode)
    if mode == "raw" and p is not None:
        resid = dc.sub(dc.mul(eps_hat, w.astype(eps_hat.dtype)), (w * eps).astype(eps_hat.dtype))
        return dc.mul(dc.mean(dc.abs(resid)), float(lam))
    resid = dc.abs(dc.sub(eps_hat, eps.astype(eps_hat.dtype)))
    return dc.mul(dc.mean(dc.mul(resid, w.astype(eps_hat.dtype))), float(lam))
