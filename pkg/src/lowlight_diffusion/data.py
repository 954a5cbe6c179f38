"""Synthetic paired low/normal-light data, PPM image I/O and patch sampling.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError, FormatError

MOTIF_TILE = 8


@dataclass(frozen=True)
class DegradationParams:
    illum_scale_range: tuple[float, float] = (0.05, 0.35)
    illum_smoothness: float = 8.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        s_min, s_max = self.illum_scale_range
        if not 0.0 < s_min <= s_max <= 1.0:
            raise ConfigError(f"illumination range must satisfy 0 < s_min <= s_max <= 1, got {self.illum_scale_range}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.illum_smoothness < 0:
            raise ConfigError(f"illum_smoothness must be >= 0, got {self.illum_smoothness}")


@dataclass
class ImagePair:
    x0: np.ndarray
    y: np.ndarray
    meta: Optional[DegradationParams] = None
    pair_id: str = ""
    origin: tuple[int, int] = (0, 0)
    # only populated by degrade(); not stored on disk
    illumination: Optional[np.ndarray] = field(default=None, repr=False)
    noise: Optional[np.ndarray] = field(default=None, repr=False)
    clamped: bool = False

    def __post_init__(self):
        if self.x0.shape != self.y.shape:
            raise DimensionError(f"pair shapes differ: {self.x0.shape} vs {self.y.shape}")


@dataclass
class SceneLayout:
    image: np.ndarray
    motif_layer: np.ndarray
    mask: np.ndarray
    stamps: list  # (motif index, row, col) of each tile's top-left corner


def _motif(rng: np.random.Generator) -> np.ndarray:
    n = MOTIF_TILE
    yy, xx = np.mgrid[0:n, 0:n] / n
    kind = rng.integers(0, 3)
    if kind == 0:  # oriented stripes
        theta = rng.uniform(0, np.pi)
        freq = rng.choice([1.0, 2.0])
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    elif kind == 1:  # checkerboard
        cell = rng.choice([2, 4])
        pattern = ((np.arange(n)[:, None] // cell + np.arange(n)[None, :] // cell) % 2).astype(float)
    else:  # random binary texture
        pattern = (rng.random((n, n)) > 0.5).astype(float)
    c_lo = rng.uniform(0.05, 0.45, size=3)
    c_hi = rng.uniform(0.55, 0.95, size=3)
    return c_lo + pattern[..., None] * (c_hi - c_lo)


def compose_scene(seed: int, H: int, W: int, motif_count: int,
                  stamps_per_motif: Optional[int] = None) -> SceneLayout:
    """Smooth background plus ``motif_count`` textures, each stamped at >= 3 places.

    Stamps sit on a grid of 8x8 cells so that they align with 4x4 and 8x8 blocks.
    """
    if H < 16 or W < 16:
        raise DimensionError(f"scene must be at least 16x16, got {H}x{W}")
    if stamps_per_motif is not None and stamps_per_motif < 3:
        raise ConfigError("each motif needs at least 3 stamps")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    yy, xx = yy / max(H - 1, 1), xx / max(W - 1, 1)
    base = rng.uniform(0.35, 0.65, size=3)
    gy = rng.uniform(-0.25, 0.25, size=3)
    gx = rng.uniform(-0.25, 0.25, size=3)
    background = base + gy * (yy[..., None] - 0.5) + gx * (xx[..., None] - 0.5)

    motif_layer = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    stamps = []
    if motif_count > 0:
        cells = [(r, c) for r in range(0, H - MOTIF_TILE + 1, MOTIF_TILE)
                 for c in range(0, W - MOTIF_TILE + 1, MOTIF_TILE)]
        counts = [stamps_per_motif or int(rng.integers(3, 6)) for _ in range(motif_count)]
        if stamps_per_motif is None:
            # small canvases: trim random counts toward the minimum of 3
            while sum(counts) > len(cells) and max(counts) > 3:
                counts[counts.index(max(counts))] -= 1
        if sum(counts) > len(cells):
            raise ConfigError(f"{motif_count} motifs need {sum(counts)} cells, image has {len(cells)}")
        order = rng.permutation(len(cells))
        k = 0
        for m, count in enumerate(counts):
            tile = _motif(rng)
            for _ in range(count):
                r, c = cells[order[k]]
                k += 1
                motif_layer[r:r + MOTIF_TILE, c:c + MOTIF_TILE] = tile
                mask[r:r + MOTIF_TILE, c:c + MOTIF_TILE] = True
                stamps.append((m, r, c))
    image = np.where(mask[..., None], motif_layer, background)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneLayout(image, motif_layer.astype(np.float32), mask, stamps)


def synth_scene(seed: int, H: int, W: int, motif_count: int) -> np.ndarray:
    return compose_scene(seed, H, W, motif_count).image


def illumination_field(shape: tuple[int, int], params: DegradationParams,
                       rng: np.random.Generator) -> np.ndarray:
    """Low-pass filtered uniform noise rescaled into [s_min, s_max]."""
    s_min, s_max = params.illum_scale_range
    raw = rng.random(shape)
    if s_max == s_min:
        return np.full(shape, s_min)
    smooth = gaussian_filter(raw, sigma=params.illum_smoothness, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    u = (smooth - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    return s_min + (s_max - s_min) * u


def degrade(x0: np.ndarray, params: DegradationParams, rng: np.random.Generator) -> ImagePair:
    """Low-light observation ``clamp(x0 * S + N, 0, 1)``.

    S is a smooth illumination field shared across the three channels; N is
    i.i.d. Gaussian per pixel and channel.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.min() < 0 or x0.max() > 1:
        raise ConfigError("x0 must lie in [0, 1]")
    S = illumination_field(x0.shape[:2], params, rng)[..., None]
    N = rng.normal(0.0, params.noise_sigma, size=x0.shape) if params.noise_sigma > 0 else np.zeros(x0.shape)
    raw = x0 * S + N
    y = np.clip(raw, 0.0, 1.0)
    return ImagePair(x0, y.astype(np.float32), params, illumination=S, noise=N,
                     clamped=bool(np.any(raw != y)))


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_dataset(seed: int, n_pairs: int, size: int, motif_count: int = 4,
                 params: Optional[DegradationParams] = None, start: int = 0) -> list[ImagePair]:
    params = params or DegradationParams(seed=seed)
    pairs = []
    for i in range(start, start + n_pairs):
        rng = pair_rng(seed, i)
        scene_seed = int(rng.integers(0, 2**31 - 1))
        x0 = synth_scene(scene_seed, size, size, motif_count)
        pair = degrade(x0, params, rng)
        pair.pair_id = f"pair{i:04d}"
        pairs.append(pair)
    return pairs


def crop_patch_pair(pair: ImagePair, size: int, rng: np.random.Generator) -> ImagePair:
    H, W = pair.x0.shape[:2]
    if size > min(H, W) or size < 1:
        raise DimensionError(f"crop size {size} does not fit a {H}x{W} image")
    r = int(rng.integers(0, H - size + 1))
    c = int(rng.integers(0, W - size + 1))
    return replace(pair, x0=pair.x0[r:r + size, c:c + size], y=pair.y[r:r + size, c:c + size],
                   origin=(r, c), illumination=None, noise=None)


# -- PPM ---------------------------------------------------------------------

def save_ppm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got {img.shape}")
    q = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + q.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"PPM header truncated at byte offset {start}")
    return buf[start:pos], pos


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: bad magic {buf[:2]!r} at byte offset 0 (expected binary P6)")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{path}: non-numeric header field {tok!r} near byte offset {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} near byte offset {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header at byte offset {pos}")
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"{path}: payload truncated at byte offset {len(buf)} "
                          f"(expected {need} bytes from offset {pos})")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (data.reshape(height, width, 3).astype(np.float32) / 255.0)


# -- dataset on disk --------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(pairs: list[ImagePair], outdir) -> Path:
    """Write pairs as PPM files plus a manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in pairs:
        x0_path = outdir / f"{pair.pair_id}_x0.ppm"
        y_path = outdir / f"{pair.pair_id}_y.ppm"
        save_ppm(pair.x0, x0_path)
        save_ppm(pair.y, y_path)
        lines.append(f"{pair.pair_id} {x0_path.name} {y_path.name} {sha256_file(x0_path)} {sha256_file(y_path)}")
    manifest = outdir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path, verify: bool = True) -> list[ImagePair]:
    path = Path(path)
    pairs, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        pid, x0_rel, y_rel, x0_sha, y_sha = parts
        if pid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate pair id {pid}")
        seen.add(pid)
        x0_path, y_path = path.parent / x0_rel, path.parent / y_rel
        if verify:
            for p, expected in ((x0_path, x0_sha), (y_path, y_sha)):
                if sha256_file(p) != expected:
                    raise FormatError(f"{path}:{lineno}: checksum mismatch for {p.name}")
        pairs.append(ImagePair(load_ppm(x0_path), load_ppm(y_path), pair_id=pid))
    return pairs
