"""Two-phase training: uncertainty pretraining, then regularized noise training.

Every iteration draws its randomness from ``SeedSequence([seed, phase, iteration])``
so a resumed run replays exactly the iterations an uninterrupted run would.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import denoiser
from . import diffcore as dc
from . import losses, structure
from .data import ImagePair, crop_patch_pair
from .diffusion import forward_sample, learnable_prev
from .errors import CheckpointError, ConfigError, NumericalError
from .schedules import build_linear, sample_noise_level

log = logging.getLogger(__name__)

MAGIC = b"LLDCKPT\x00"
FORMAT_VERSION = 1
PHASE_IDS = {"pretrain": 1, "train": 2}
LOG_COLUMNS = ["iter", "phase", "loss_total", "loss_noise", "loss_rank", "kappa_t", "t", "lr"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_channels: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    lam: float = 10.0
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    patch_size: int = 32
    batch_size: int = 4
    micro_batch: int = 2
    pretrain_iters: int = 5000
    train_iters: int = 5000
    block_edge: int = 4
    clusters: int = 0  # 0 -> max(2, n // 16)
    cluster_algo: str = "hierarchical"
    structure_reg: bool = True  # ablation switch (a)
    kappa_schedule: bool = True  # ablation switch (b), needs (a)
    uncertainty: bool = True  # ablation switch (c)
    weight_mode: str = "exp"
    uncertainty_from_frozen_trunk: bool = True
    train_noise: bool = True  # keep sigma_t Z in the learnable sample
    checkpoint_interval: int = 1000
    seed: int = 0

    def validate(self) -> "TrainConfig":
        positive = ["base_channels", "learning_rate", "adam_eps", "lam", "T", "patch_size",
                    "batch_size", "micro_batch", "block_edge", "checkpoint_interval"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pretrain_iters", "train_iters", "clusters", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        for name in ("adam_beta1", "adam_beta2", "ema_decay"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.patch_size % 4 or self.patch_size % self.block_edge:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by 4 and by block_edge {self.block_edge}")
        if self.kappa_schedule and not self.structure_reg:
            raise ConfigError("the kappa schedule (ablation b) requires structure regularization (ablation a)")
        if self.cluster_algo not in structure.CLUSTERERS:
            raise ConfigError(f"cluster_algo must be one of {structure.CLUSTERERS}")
        if self.weight_mode not in losses.WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {losses.WEIGHT_MODES}")
        n_blocks = (self.patch_size // self.block_edge) ** 2
        if self.clusters > n_blocks:
            raise ConfigError(f"clusters={self.clusters} exceeds {n_blocks} blocks per patch")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_hash(self) -> str:
        """Hash of the fields a checkpoint's tensors depend on."""
        key = {"base_channels": self.base_channels, "T": self.T,
               "beta_start": self.beta_start, "beta_end": self.beta_end}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()

    def full_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def resume_key(self) -> str:
        """Hash of everything except run length, so a resumed run may be extended."""
        d = self.to_dict()
        for name in ("pretrain_iters", "train_iters", "checkpoint_interval"):
            d.pop(name)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def schedule(self):
        return build_linear(self.T, self.beta_start, self.beta_end)


@dataclass
class Checkpoint:
    config: TrainConfig
    phase: str
    iteration: int
    params: "OrderedDict[str, np.ndarray]"
    head: "OrderedDict[str, np.ndarray]"
    ema: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_step: int = 0
    frozen: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def groups(self) -> "OrderedDict[str, OrderedDict]":
        return OrderedDict([("params", self.params), ("head", self.head), ("ema", self.ema),
                            ("adam_m", self.adam_m), ("adam_v", self.adam_v), ("frozen", self.frozen)])


def _copy(d) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, np.array(v, copy=True)) for k, v in d.items())


# -- optimizer and EMA ----------------------------------------------------------

class Adam:
    """Adam without weight decay; updates parameter arrays in place."""

    def __init__(self, cfg: TrainConfig, m=None, v=None, step: int = 0):
        self.lr, self.b1, self.b2, self.eps = cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = OrderedDict() if m is None else m
        self.v = OrderedDict() if v is None else v
        self.step_count = step

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def ema_decay_at(cfg: TrainConfig, step: int) -> float:
    """Decay used for the update after optimizer step ``step`` (1-based)."""
    if cfg.ema_warmup:
        return min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
    return cfg.ema_decay


def ema_update(shadow: dict, params: dict, decay: float) -> None:
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p


# -- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, chunks, offset = [], [], 0
    for group, tensors in ckpt.groups().items():
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype=np.dtype(arr.dtype).newbyteorder("<"))
            raw = a.tobytes()
            entries.append({"name": f"{group}/{name}", "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": ckpt.config.to_dict(),
        "phase": ckpt.phase,
        "iteration": ckpt.iteration,
        "adam_step": ckpt.adam_step,
        "schedule": ckpt.config.schedule().descriptor(),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = (MAGIC + struct.pack("<I", FORMAT_VERSION) + bytes.fromhex(ckpt.config.model_hash())
            + struct.pack("<Q", len(hbytes)) + hbytes + payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path, expect: Optional[TrainConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` also check it fits that architecture."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 4 + 32 + 8
    if len(blob) < fixed:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    model_hash = blob[12:44].hex()
    (hlen,) = struct.unpack("<Q", blob[44:52])
    if len(blob) < fixed + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = blob[fixed + hlen:]
    expected_len = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected_len:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest lists {expected_len}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    cfg = TrainConfig.from_dict(header["config"])
    if cfg.model_hash() != model_hash:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    groups: dict[str, OrderedDict] = {g: OrderedDict() for g in
                                      ("params", "head", "ema", "adam_m", "adam_v", "frozen")}
    for e in header["tensors"]:
        group, name = e["name"].split("/", 1)
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        groups[group][name] = arr

    if expect is not None:
        want = denoiser.param_shapes(expect.base_channels)
        diffs = [f"{k}: checkpoint {tuple(groups['params'][k].shape) if k in groups['params'] else None}"
                 f" vs config {s}"
                 for k, s in want.items() if k not in groups["params"] or groups["params"][k].shape != s]
        if diffs:
            raise CheckpointError(f"{path}: incompatible with base_channels={expect.base_channels}:\n  "
                                  + "\n  ".join(diffs[:8]))
        if expect.model_hash() != model_hash:
            raise CheckpointError(f"{path}: config hash mismatch (schedule or architecture differ)")
    return Checkpoint(cfg, header["phase"], int(header["iteration"]), groups["params"], groups["head"],
                      groups["ema"], groups["adam_m"], groups["adam_v"], int(header["adam_step"]),
                      groups["frozen"])


# -- training ------------------------------------------------------------------

@dataclass
class _Sample:
    pair_index: int
    crop: ImagePair
    t: int
    alpha_bar: float
    eps: np.ndarray


class _ClusterCache:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.store: dict = {}

    def get(self, s: _Sample):
        cfg = self.cfg
        key = (s.pair_index, s.crop.origin, s.crop.x0.shape)
        hit = self.store.get(key)
        if hit is None:
            k = cfg.clusters or None
            cs = structure.cluster_image(s.crop.x0, cfg.block_edge, k, cfg.cluster_algo, seed=cfg.seed)
            _, blocks = structure.patchify(s.crop.x0.astype(np.float64), cfg.block_edge)
            gt = structure.spectra(structure.build_matrices(cs, blocks))
            hit = (cs, gt)
            if len(self.store) < 50000:
                self.store[key] = hit
        return hit


def _iteration_rng(cfg: TrainConfig, phase: str, it: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, PHASE_IDS[phase], it]))


def _draw_batch(cfg: TrainConfig, dataset: list, schedule, rng) -> list[_Sample]:
    batch = []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(len(dataset)))
        size = min(cfg.patch_size, *dataset[i].x0.shape[:2])
        crop = crop_patch_pair(dataset[i], size, rng)
        t, ab = sample_noise_level(schedule, rng)
        eps = rng.standard_normal(crop.x0.shape).astype(np.float32)
        batch.append(_Sample(i, crop, t, ab, eps))
    return batch


def _stack(samples, attr) -> np.ndarray:
    return np.stack([denoiser.hwc_to_nchw(getattr(s.crop, attr))[0] for s in samples]).astype(np.float32)


def _leaves(arrays: dict) -> dict:
    return {k: dc.Tensor(v, requires_grad=True) for k, v in arrays.items()}


def _accumulate(acc: dict, leaves: dict) -> None:
    for k, t in leaves.items():
        if t.grad is None:
            continue
        acc[k] = t.grad if k not in acc else acc[k] + t.grad


class _Logger:
    def __init__(self, path: Optional[Path], append: bool):
        self.fh = None
        if path is not None:
            path = Path(path)
            new = not (append and path.exists())
            self.fh = open(path, "a" if append else "w", newline="")
            self.writer = csv.writer(self.fh)
            if new:
                self.writer.writerow(LOG_COLUMNS)

    def write(self, row: dict) -> None:
        if self.fh is not None:
            self.writer.writerow([row[c] if isinstance(row[c], (int, str)) else f"{row[c]:.8g}"
                                  for c in LOG_COLUMNS])

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    trunk, head = denoiser.init(cfg.seed, cfg.base_channels)
    return Checkpoint(cfg, "init", 0, trunk, head, _copy(trunk))


def pretrain(cfg: TrainConfig, dataset: list, out_dir=None, log_path=None,
             resume: Optional[Checkpoint] = None, callback: Optional[Callable] = None) -> Checkpoint:
    """Phase 1: fit trunk and uncertainty head jointly under the uncertainty loss."""
    cfg.validate()
    if not dataset:
        raise ConfigError("dataset is empty")
    schedule = cfg.schedule()
    ckpt = resume if resume is not None else _init_checkpoint(cfg)
    if resume is not None and resume.phase != "pretrain":
        raise ConfigError(f"cannot resume pretraining from a '{resume.phase}' checkpoint")
    params, head, ema = _copy(ckpt.params), _copy(ckpt.head), _copy(ckpt.ema)
    joint = OrderedDict(list(params.items()) + list(head.items()))
    opt = Adam(cfg, _copy(ckpt.adam_m), _copy(ckpt.adam_v), ckpt.adam_step)
    start = ckpt.iteration if resume is not None else 0
    logger = _Logger(log_path, append=resume is not None)
    last_good = None
    try:
        for it in range(start + 1, cfg.pretrain_iters + 1):
            rng = _iteration_rng(cfg, "pretrain", it)
            batch = _draw_batch(cfg, dataset, schedule, rng)
            grads: dict = {}
            total = 0.0
            for lo in range(0, len(batch), cfg.micro_batch):
                mb = batch[lo:lo + cfg.micro_batch]
                x0, y = _stack(mb, "x0"), _stack(mb, "y")
                eps = np.stack([denoiser.hwc_to_nchw(s.eps)[0] for s in mb])
                ab = np.array([s.alpha_bar for s in mb])
                x_t = forward_sample(x0, ab, eps)
                P, H = _leaves(params), _leaves(head)
                eps_hat, p_t = denoiser.forward_with_uncertainty(P, H, y, x_t, ab)
                loss = dc.mul(losses.uncertainty_loss(eps, eps_hat, p_t), len(mb) / len(batch))
                loss.backward()
                total += float(loss.data)
                _accumulate(grads, P)
                _accumulate(grads, H)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at pretrain iteration {it}; last good checkpoint: {last_good}")
            opt.step(joint, grads)
            ema_update(ema, params, ema_decay_at(cfg, opt.step_count))
            row = {"iter": it, "phase": "pretrain", "loss_total": total, "loss_noise": total,
                   "loss_rank": 0.0, "kappa_t": 0.0, "t": float(np.mean([s.t for s in batch])),
                   "lr": cfg.learning_rate}
            logger.write(row)
            if callback:
                callback(row)
            if out_dir is not None and it % cfg.checkpoint_interval == 0 and it < cfg.pretrain_iters:
                last_good = Path(out_dir) / "pretrain_latest.ckpt"
                save_checkpoint(Checkpoint(cfg, "pretrain", it, params, head, ema, opt.m, opt.v,
                                           opt.step_count), last_good)
    finally:
        logger.close()
    result = Checkpoint(cfg, "pretrain", max(start, cfg.pretrain_iters), params, head, ema,
                        opt.m, opt.v, opt.step_count)
    if out_dir is not None:
        save_checkpoint(result, Path(out_dir) / "pretrain.ckpt")
    return result


def train(cfg: TrainConfig, dataset: list, pretrained: Checkpoint, out_dir=None, log_path=None,
          resume: Optional[Checkpoint] = None, callback: Optional[Callable] = None) -> Checkpoint:
    """Phase 2: weighted noise loss plus the kappa-scheduled structure loss.

    The uncertainty head stays frozen. The map P_t comes from a frozen copy of
    the pretrained trunk unless ``uncertainty_from_frozen_trunk`` is off.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("dataset is empty")
    want = denoiser.param_shapes(cfg.base_channels)
    bad = [k for k, s in want.items() if k not in pretrained.params or pretrained.params[k].shape != s]
    if bad:
        raise CheckpointError(f"pretrained checkpoint incompatible with base_channels={cfg.base_channels}: {bad[:4]}")
    schedule = cfg.schedule()
    if resume is not None:
        if resume.phase != "train":
            raise ConfigError(f"cannot resume training from a '{resume.phase}' checkpoint")
        src = resume
        frozen = _copy(resume.frozen)
        start = resume.iteration
    else:
        src = Checkpoint(cfg, "train", 0, pretrained.params, pretrained.head, pretrained.params)
        frozen = _copy(pretrained.params)
        start = 0
    params, head, ema = _copy(src.params), _copy(src.head), _copy(src.ema)
    for a in head.values():
        a.setflags(write=False)
    for a in frozen.values():
        a.setflags(write=False)
    opt = Adam(cfg, _copy(src.adam_m), _copy(src.adam_v), src.adam_step)
    cache = _ClusterCache(cfg)
    logger = _Logger(log_path, append=resume is not None)
    b = cfg.block_edge
    last_good = None
    try:
        for it in range(start + 1, cfg.train_iters + 1):
            rng = _iteration_rng(cfg, "train", it)
            batch = _draw_batch(cfg, dataset, schedule, rng)
            z_all = [rng.standard_normal(s.crop.x0.shape).astype(np.float32) for s in batch]
            grads: dict = {}
            tot_noise = tot_rank = 0.0
            try:
                for lo in range(0, len(batch), cfg.micro_batch):
                    mb = batch[lo:lo + cfg.micro_batch]
                    frac = len(mb) / len(batch)
                    x0, y = _stack(mb, "x0"), _stack(mb, "y")
                    eps = np.stack([denoiser.hwc_to_nchw(s.eps)[0] for s in mb])
                    ab = np.array([s.alpha_bar for s in mb])
                    ts = np.array([s.t for s in mb])
                    x_t = forward_sample(x0, ab, eps)
                    P = _leaves(params)
                    eps_hat = denoiser.forward(P, y, x_t, ab)
                    p_map = None
                    if cfg.uncertainty:
                        trunk = frozen if cfg.uncertainty_from_frozen_trunk else params
                        p_map = denoiser.forward_with_uncertainty(trunk, head, y, x_t, ab)[1].data
                    loss = dc.mul(losses.weighted_noise_loss(eps, eps_hat, p_map, cfg.lam, cfg.weight_mode), frac)
                    tot_noise += float(loss.data)
                    if cfg.structure_reg:
                        z = np.stack([denoiser.hwc_to_nchw(z_all[lo + i])[0] for i in range(len(mb))])
                        if not cfg.train_noise:
                            z = np.zeros_like(z)
                        x_prev = learnable_prev(x_t, eps_hat, ts, schedule, z)
                        _, blocks = structure.patchify(dc.transpose(x_prev, (0, 2, 3, 1)), b)
                        hits = [cache.get(s) for s in mb]
                        weights = [float(schedule.kappa[s.t - 1]) if cfg.kappa_schedule else 1.0 for s in mb]
                        l_rank = structure.batch_structure_loss(blocks, [h[0] for h in hits],
                                                                [h[1] for h in hits], weights)
                        l_rank = dc.mul(l_rank, frac)
                        tot_rank += float(l_rank.data)
                        loss = dc.add(loss, l_rank)
                    loss.backward()
                    _accumulate(grads, P)
            except NumericalError as exc:
                raise TrainingError(f"non-finite values at train iteration {it} ({exc}); "
                                    f"last good checkpoint: {last_good}") from exc
            total = tot_noise + tot_rank
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at train iteration {it}; last good checkpoint: {last_good}")
            opt.step(params, grads)
            ema_update(ema, params, ema_decay_at(cfg, opt.step_count))
            kappas = [float(schedule.kappa[s.t - 1]) for s in batch] if cfg.kappa_schedule else [1.0]
            row = {"iter": it, "phase": "train", "loss_total": total, "loss_noise": tot_noise,
                   "loss_rank": tot_rank, "kappa_t": float(np.mean(kappas)) if cfg.structure_reg else 0.0,
                   "t": float(np.mean([s.t for s in batch])), "lr": cfg.learning_rate}
            logger.write(row)
            if callback:
                callback(row)
            if out_dir is not None and it % cfg.checkpoint_interval == 0 and it < cfg.train_iters:
                last_good = Path(out_dir) / "train_latest.ckpt"
                save_checkpoint(Checkpoint(cfg, "train", it, params, head, ema, opt.m, opt.v,
                                           opt.step_count, frozen), last_good)
    finally:
        logger.close()
    result = Checkpoint(cfg, "train", max(start, cfg.train_iters), params, _copy(head), ema,
                        opt.m, opt.v, opt.step_count, _copy(frozen))
    if out_dir is not None:
        save_checkpoint(result, Path(out_dir) / "train.ckpt")
    return result
