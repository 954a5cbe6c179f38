"""Conditional noise-estimation U-Net and its uncertainty head.

Layout (c = base_channels, all convs 3x3, inputs NCHW):

    concat(y, x_t) 6ch -> enc1 (c) -> pool -> enc2 (2c) -> pool -> mid (4c)
    -> up + conv (2c) ++ enc2 -> dec2 (2c) -> up + conv (c) ++ enc1 -> dec1 (c)
    -> out conv (3ch eps_hat);  dec1 features -> head conv (3ch uncertainty)

Each stage is conv -> FiLM(scale, shift from the noise-level embedding) ->
SiLU -> conv -> SiLU. The embedding is sinusoidal in sqrt(alpha_bar).
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError

EMBED_DIM = 16
STAGES = ("enc1", "enc2", "mid", "dec2", "dec1")

Params = Mapping[str, Union[np.ndarray, Tensor]]


def _stage_channels(c: int) -> dict[str, tuple[int, int]]:
    """(input channels, output channels) of each stage's first conv."""
    return {"enc1": (6, c), "enc2": (c, 2 * c), "mid": (2 * c, 4 * c),
            "dec2": (4 * c, 2 * c), "dec1": (2 * c, c)}


def param_shapes(base_channels: int) -> "OrderedDict[str, tuple]":
    c = base_channels
    shapes: OrderedDict[str, tuple] = OrderedDict()
    for name, (cin, cout) in _stage_channels(c).items():
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.b"] = (cout,)
        shapes[f"{name}.film.scale_w"] = (EMBED_DIM, cout)
        shapes[f"{name}.film.scale_b"] = (cout,)
        shapes[f"{name}.film.shift_w"] = (EMBED_DIM, cout)
        shapes[f"{name}.film.shift_b"] = (cout,)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.b"] = (cout,)
        if name == "mid":
            shapes["up2.w"] = (2 * c, 4 * c, 3, 3)
            shapes["up2.b"] = (2 * c,)
        if name == "dec2":
            shapes["up1.w"] = (c, 2 * c, 3, 3)
            shapes["up1.b"] = (c,)
    shapes["out.w"] = (3, c, 3, 3)
    shapes["out.b"] = (3,)
    return shapes


def head_shapes(base_channels: int) -> "OrderedDict[str, tuple]":
    return OrderedDict([("head.w", (3, base_channels, 3, 3)), ("head.b", (3,))])


def _init_tensor(rng: np.random.Generator, name: str, shape: tuple) -> np.ndarray:
    if name.endswith(".b") or name.endswith("_b"):
        return np.zeros(shape, dtype=np.float32)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
    else:
        std = np.sqrt(1.0 / shape[0]) * 0.1  # FiLM projections start near identity
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init(seed: int, base_channels: int = 16):
    """Fresh (trunk params, head params) as ordered dicts of float32 arrays."""
    if base_channels < 4:
        raise ConfigError(f"base_channels must be >= 4, got {base_channels}")
    rng = np.random.default_rng(seed)
    trunk = OrderedDict((k, _init_tensor(rng, k, s)) for k, s in param_shapes(base_channels).items())
    head = OrderedDict((k, _init_tensor(rng, k, s)) for k, s in head_shapes(base_channels).items())
    return trunk, head


def count_params(params: Params) -> int:
    return int(sum(np.asarray(getattr(v, "data", v)).size for v in params.values()))


def noise_embedding(alpha_bar) -> np.ndarray:
    """(N, 16) sinusoidal features of sqrt(alpha_bar), frequencies 1 .. 1e4."""
    level = np.sqrt(np.atleast_1d(np.asarray(alpha_bar, dtype=np.float64)))
    freqs = np.geomspace(1.0, 1e4, EMBED_DIM // 2)
    arg = level[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _check_inputs(y, x_t, alpha_bar):
    ys, xs = y.shape, x_t.shape
    if len(xs) != 4 or xs[1] != 3 or ys != xs:
        raise DimensionError(f"expected matching (N, 3, H, W) inputs, got y {ys} and x_t {xs}")
    if xs[2] % 4 or xs[3] % 4:
        raise DimensionError(f"spatial dims must be divisible by 4, got {xs[2]}x{xs[3]}")
    ab = np.atleast_1d(np.asarray(alpha_bar, dtype=np.float64))
    if ab.size == 1 and xs[0] > 1:
        ab = np.full(xs[0], ab[0])
    if ab.shape != (xs[0],):
        raise DimensionError(f"need one alpha_bar per sample, got {ab.shape} for batch {xs[0]}")
    if np.any(ab <= 0) or np.any(ab > 1):
        raise DimensionError("alpha_bar must lie in (0, 1]")
    return ab


def _trunk(params: Params, y, x_t, alpha_bar) -> Tensor:
    """Final decoder features (N, c, H, W)."""
    ab = _check_inputs(y, x_t, alpha_bar)
    dtype = dc.default_dtype()
    p = {k: dc.as_tensor(v) for k, v in params.items()}
    emb = Tensor(noise_embedding(ab).astype(dtype))

    def stage(name, h):
        h = dc.conv2d(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
        scale = dc.linear(emb, p[f"{name}.film.scale_w"], p[f"{name}.film.scale_b"])
        shift = dc.linear(emb, p[f"{name}.film.shift_w"], p[f"{name}.film.shift_b"])
        h = dc.silu(dc.channel_affine(h, scale, shift))
        return dc.silu(dc.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))

    h = dc.concat([dc.as_tensor(y), dc.as_tensor(x_t)], axis=1)
    s1 = stage("enc1", h)
    s2 = stage("enc2", dc.avg_pool2(s1))
    m = stage("mid", dc.avg_pool2(s2))
    u2 = dc.conv2d(dc.upsample2(m), p["up2.w"], p["up2.b"])
    d2 = stage("dec2", dc.concat([u2, s2], axis=1))
    u1 = dc.conv2d(dc.upsample2(d2), p["up1.w"], p["up1.b"])
    return stage("dec1", dc.concat([u1, s1], axis=1))


def forward(params: Params, y, x_t, alpha_bar) -> Tensor:
    """Noise estimate eps_hat with the same (N, 3, H, W) shape as ``x_t``."""
    feats = _trunk(params, y, x_t, alpha_bar)
    return dc.conv2d(feats, dc.as_tensor(params["out.w"]), dc.as_tensor(params["out.b"]))


def forward_with_uncertainty(params: Params, head: Params, y, x_t, alpha_bar) -> tuple[Tensor, Tensor]:
    """(eps_hat, log-scale uncertainty map p_t); both (N, 3, H, W)."""
    feats = _trunk(params, y, x_t, alpha_bar)
    eps_hat = dc.conv2d(feats, dc.as_tensor(params["out.w"]), dc.as_tensor(params["out.b"]))
    p_t = dc.conv2d(feats, dc.as_tensor(head["head.w"]), dc.as_tensor(head["head.b"]))
    return eps_hat, p_t


def hwc_to_nchw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    return img.transpose(2, 0, 1)[None] if img.ndim == 3 else img.transpose(0, 3, 1, 2)


def nchw_to_hwc(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1)
