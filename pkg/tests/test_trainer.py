import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lowlight_diffusion import data, denoiser, structure
from lowlight_diffusion import diffcore as dc
from lowlight_diffusion.diffusion import forward_sample, learnable_prev
from lowlight_diffusion.errors import CheckpointError, ConfigError
from lowlight_diffusion.trainer import (
    LOG_COLUMNS, MAGIC, Checkpoint, TrainConfig, TrainingError, ema_decay_at, ema_update,
    load_checkpoint, pretrain, save_checkpoint, train,
)

TINY = TrainConfig(base_channels=4, patch_size=16, batch_size=2, micro_batch=1, pretrain_iters=3,
                   train_iters=3, checkpoint_interval=2, seed=5)


@pytest.fixture(scope="module")
def ds():
    return data.make_dataset(3, 2, 32)


@pytest.fixture(scope="module")
def pre(ds):
    return pretrain(TINY, ds)


def same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- config ----------------------------------------------------------------------

@pytest.mark.parametrize("change", [
    {"learning_rate": 0.0}, {"base_channels": 2}, {"patch_size": 18}, {"ema_decay": 1.0},
    {"beta_start": 0.1, "beta_end": 0.01}, {"structure_reg": False}, {"cluster_algo": "dbscan"},
    {"weight_mode": "sqrt"}, {"clusters": 100}, {"train_iters": -1},
])
def test_config_validation(change):
    with pytest.raises(ConfigError):
        dataclasses.replace(TINY, **change).validate()


def test_kappa_off_with_structure_off_is_valid():
    dataclasses.replace(TINY, structure_reg=False, kappa_schedule=False).validate()


def test_config_dict_round_trip():
    assert TrainConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_hashes():
    assert TINY.model_hash() == dataclasses.replace(TINY, learning_rate=1.0).model_hash()
    assert TINY.model_hash() != dataclasses.replace(TINY, base_channels=8).model_hash()
    assert TINY.resume_key() == dataclasses.replace(TINY, train_iters=99).resume_key()
    assert TINY.resume_key() != dataclasses.replace(TINY, lam=2.0).resume_key()


# -- phases ------------------------------------------------------------------------

def test_zero_iterations_returns_initialization(ds):
    cfg = dataclasses.replace(TINY, pretrain_iters=0)
    ck = pretrain(cfg, ds)
    trunk, head = denoiser.init(cfg.seed, cfg.base_channels)
    assert same(ck.params, trunk) and same(ck.head, head) and ck.iteration == 0


def test_pretrain_deterministic_bytes(ds, tmp_path):
    pretrain(TINY, ds, out_dir=tmp_path / "a")
    pretrain(TINY, ds, out_dir=tmp_path / "b")
    assert (tmp_path / "a/pretrain.ckpt").read_bytes() == (tmp_path / "b/pretrain.ckpt").read_bytes()


def test_train_keeps_head_and_frozen_trunk(ds, pre):
    ck = train(TINY, ds, pre)
    assert same(ck.head, pre.head) and same(ck.frozen, pre.params)
    assert not same(ck.params, pre.params)
    assert ck.phase == "train" and ck.iteration == TINY.train_iters


def test_structure_off_gives_noise_loss_only(ds, pre):
    rows = []
    train(dataclasses.replace(TINY, structure_reg=False, kappa_schedule=False), ds, pre, callback=rows.append)
    assert all(r["loss_rank"] == 0.0 and r["loss_total"] == r["loss_noise"] for r in rows)
    rows = []
    train(TINY, ds, pre, callback=rows.append)
    assert all(r["loss_rank"] > 0 for r in rows)


def test_all_switches_off_is_plain_l1(ds, pre):
    """With the head mapping to p = 0 the weights are all one, as with no uncertainty."""
    flat = dataclasses.replace(pre, head={k: np.zeros_like(v) for k, v in pre.head.items()})
    base = dataclasses.replace(TINY, structure_reg=False, kappa_schedule=False)
    off = train(dataclasses.replace(base, uncertainty=False), ds, pre)
    unit = train(base, ds, flat)
    assert same(off.params, unit.params)


def test_rank_term_reaches_trunk(ds, pre):
    cfg = TINY
    sched = cfg.schedule()
    pair = data.crop_patch_pair(ds[0], 16, np.random.default_rng(0))
    x0, y = denoiser.hwc_to_nchw(pair.x0), denoiser.hwc_to_nchw(pair.y)
    eps = np.random.default_rng(1).standard_normal(x0.shape).astype(np.float32)
    t = 40
    x_t = forward_sample(x0, sched.alpha_bar[t - 1], eps)
    P = {k: dc.Tensor(v, requires_grad=True) for k, v in pre.params.items()}
    x_prev = learnable_prev(x_t, denoiser.forward(P, y, x_t, sched.alpha_bar[t - 1]), t, sched)
    cs = structure.cluster_image(pair.x0, 4, 2)
    gt = structure.spectra(structure.build_matrices(cs, structure.patchify(pair.x0, 4)[1]))
    _, blocks = structure.patchify(dc.transpose(x_prev, (0, 2, 3, 1)), 4)
    structure.batch_structure_loss(blocks, [cs], [gt], [1.0]).backward()
    assert np.abs(P["enc1.conv1.w"].grad).max() > 0


def test_resume_matches_uninterrupted(ds, pre, tmp_path):
    cfg = dataclasses.replace(TINY, train_iters=4)
    full = train(cfg, ds, pre, out_dir=tmp_path)
    mid = load_checkpoint(tmp_path / "train_latest.ckpt", expect=cfg)
    assert mid.iteration == 2
    resumed = train(cfg, ds, pre, resume=mid)
    assert same(full.params, resumed.params) and same(full.ema, resumed.ema)
    assert same(full.adam_m, resumed.adam_m) and resumed.adam_step == full.adam_step == 4


def test_pretrain_resume_matches(ds, tmp_path):
    cfg = dataclasses.replace(TINY, pretrain_iters=4)
    full = pretrain(cfg, ds, out_dir=tmp_path)
    resumed = pretrain(cfg, ds, resume=load_checkpoint(tmp_path / "pretrain_latest.ckpt"))
    assert same(full.params, resumed.params) and same(full.head, resumed.head)


def test_non_finite_loss_raises(ds, pre):
    bad = dataclasses.replace(pre, params={k: np.full_like(v, np.nan) for k, v in pre.params.items()})
    with pytest.raises(TrainingError, match="non-finite"):
        train(TINY, ds, bad)


def test_incompatible_pretrained(ds, pre):
    with pytest.raises(CheckpointError):
        train(dataclasses.replace(TINY, base_channels=8), ds, pre)
    with pytest.raises(ConfigError):
        pretrain(TINY, [])


def test_log_columns(ds, pre, tmp_path):
    log = tmp_path / "log.csv"
    train(TINY, ds, pre, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0].split(",") == LOG_COLUMNS and len(lines) == 1 + TINY.train_iters
    assert lines[1].split(",")[1] == "train"


def test_pretrain_loss_halves_on_single_pair():
    pair = data.make_dataset(0, 1, 64)
    cfg = TrainConfig(batch_size=2, micro_batch=2, pretrain_iters=2000, learning_rate=1e-3)
    losses = []
    pretrain(cfg, pair, callback=lambda r: losses.append(r["loss_total"]))
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    early, late = ma[100 - 10], ma[-1]
    assert late <= early - 0.5 * abs(early)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bytes(pre, tmp_path):
    save_checkpoint(pre, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", expect=TINY)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert same(back.params, pre.params) and back.config == TINY and back.adam_step == pre.adam_step
    assert (tmp_path / "a.ckpt").read_bytes()[:8] == MAGIC


def test_checkpoint_corruption(pre, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(pre, path)
    blob = bytearray(path.read_bytes())

    def write(b):
        p = tmp_path / "x.ckpt"
        p.write_bytes(bytes(b))
        return p

    flipped = blob.copy()
    flipped[-5] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(write(flipped))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(write(b"NOTACKPT" + blob[8:]))
    bumped = blob.copy()
    bumped[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(write(bumped))
    for cut in (4, 30, len(blob) - 3):
        with pytest.raises(CheckpointError):
            load_checkpoint(write(blob[:cut]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_architecture_mismatch(pre, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(pre, path)
    with pytest.raises(CheckpointError, match="base_channels=8") as info:
        load_checkpoint(path, expect=dataclasses.replace(TINY, base_channels=8))
    assert "enc1.conv1.w" in str(info.value)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, expect=dataclasses.replace(TINY, beta_end=0.03))


# -- EMA ---------------------------------------------------------------------------

def test_ema_decay_warmup():
    assert ema_decay_at(TINY, 1) == pytest.approx(2 / 11)
    assert ema_decay_at(TINY, 10**7) == TINY.ema_decay
    assert ema_decay_at(dataclasses.replace(TINY, ema_warmup=False), 1) == TINY.ema_decay


def test_ema_tracks_constant_params(rng):
    theta = {"w": rng.standard_normal(5)}
    shadow = {"w": theta["w"].copy()}
    for n in range(1, 50):
        ema_update(shadow, theta, ema_decay_at(TINY, n))
    np.testing.assert_allclose(shadow["w"], theta["w"], rtol=1e-14)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9999), st.integers(1, 30))
def test_ema_lag_bounded_by_total_movement(seed, decay, n):
    r = np.random.default_rng(seed)
    theta = r.standard_normal(4)
    shadow = {"w": theta.copy()}
    moved = 0.0
    for _ in range(n):
        step = r.standard_normal(4) * r.random()
        theta = theta + step
        moved += np.linalg.norm(step)
        ema_update(shadow, {"w": theta}, decay)
    assert np.linalg.norm(shadow["w"] - theta) <= moved + 1e-12
