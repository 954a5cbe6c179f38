import numpy as np
import pytest

from lowlight_diffusion import denoiser
from lowlight_diffusion import diffcore as dc
from lowlight_diffusion.errors import ConfigError, DimensionError


def closed_form_count(c: int) -> int:
    """Hand count: five conv-FiLM-conv stages, two upsampling convs, output conv."""
    def stage(cin, cout):
        return (cin * cout * 9 + cout) + 2 * (16 * cout + cout) + (cout * cout * 9 + cout)

    stages = stage(6, c) + stage(c, 2 * c) + stage(2 * c, 4 * c) + stage(4 * c, 2 * c) + stage(2 * c, c)
    ups = (4 * c * 2 * c * 9 + 2 * c) + (2 * c * c * 9 + c)
    return stages + ups + (c * 3 * 9 + 3)


def _inputs(rng, n=1, hw=8):
    return rng.random((n, 3, hw, hw)).astype(np.float32), rng.standard_normal((n, 3, hw, hw)).astype(np.float32)


def test_same_seed_same_params():
    a, ha = denoiser.init(3, 8)
    b, hb = denoiser.init(3, 8)
    assert all(np.array_equal(a[k], b[k]) for k in a) and all(np.array_equal(ha[k], hb[k]) for k in ha)


def test_parameter_count_base8():
    trunk, head = denoiser.init(0, 8)
    assert denoiser.count_params(trunk) == closed_form_count(8) == 35811
    assert denoiser.count_params(head) == 3 * 8 * 9 + 3


def test_shapes_are_function_of_config():
    for c in (4, 8, 16):
        trunk, _ = denoiser.init(1, c)
        assert {k: v.shape for k, v in trunk.items()} == dict(denoiser.param_shapes(c))
        assert all(np.all(np.isfinite(v)) for v in trunk.values())
    with pytest.raises(ConfigError):
        denoiser.init(0, 3)


def test_biases_zero_and_fan_in_scaling():
    trunk, _ = denoiser.init(0, 16)
    assert not np.any(trunk["mid.conv1.b"])
    w = trunk["mid.conv1.w"]
    assert abs(w.std() - np.sqrt(2.0 / (w.shape[1] * 9))) < 0.1 * np.sqrt(2.0 / (w.shape[1] * 9))


def test_zero_network_outputs_zero(rng):
    trunk, _ = denoiser.init(0, 4)
    zero = {k: np.zeros_like(v) for k, v in trunk.items()}
    y, x = _inputs(rng)
    assert not np.any(denoiser.forward(zero, y, x, 0.5).data)


@pytest.mark.parametrize("hw", [64, 96])
def test_output_shape(rng, hw):
    trunk, head = denoiser.init(0, 4)
    y, x = _inputs(rng, 1, hw)
    eps, p = denoiser.forward_with_uncertainty(trunk, head, y, x, 0.3)
    assert eps.shape == x.shape and p.shape == x.shape


def test_conditioning_is_live(rng):
    trunk, _ = denoiser.init(0, 8)
    y, x = _inputs(rng)
    a = denoiser.forward(trunk, y, x, 0.9).data
    b = denoiser.forward(trunk, y, x, 0.1).data
    assert np.linalg.norm(a - b) > 0


@pytest.mark.parametrize("bad", [(1, 3, 6, 8), (1, 4, 8, 8), (3, 8, 8)])
def test_shape_violations(rng, bad):
    trunk, _ = denoiser.init(0, 4)
    x = np.zeros(bad, np.float32)
    with pytest.raises(DimensionError):
        denoiser.forward(trunk, x, x, 0.5)


def test_alpha_bar_range(rng):
    trunk, _ = denoiser.init(0, 4)
    y, x = _inputs(rng)
    for ab in (0.0, 1.5):
        with pytest.raises(DimensionError):
            denoiser.forward(trunk, y, x, ab)


def test_uncertainty_head_reads_trunk_features(rng):
    trunk, head = denoiser.init(0, 4)
    y, x = _inputs(rng)
    p1 = denoiser.forward_with_uncertainty(trunk, head, y, x, 0.5)[1].data
    trunk2 = dict(trunk)
    trunk2["dec1.conv2.w"] = trunk["dec1.conv2.w"] * 1.5
    p2 = denoiser.forward_with_uncertainty(trunk2, head, y, x, 0.5)[1].data
    assert np.abs(p1 - p2).max() > 0


def test_zero_head_weights_give_bias_map(rng):
    trunk, head = denoiser.init(0, 4)
    head = {"head.w": np.zeros_like(head["head.w"]), "head.b": np.array([0.5, -1.0, 2.0], np.float32)}
    y, x = _inputs(rng)
    p = denoiser.forward_with_uncertainty(trunk, head, y, x, 0.5)[1].data
    np.testing.assert_array_equal(p[0, :, 3, 3], [0.5, -1.0, 2.0])
    assert np.all(p == head["head.b"][None, :, None, None])


def test_full_tiny_net_gradcheck(rng):
    trunk, _ = denoiser.init(0, 4)
    y, x = _inputs(rng)
    w = rng.standard_normal(x.shape)
    names = ["enc1.conv1.w", "mid.film.scale_w", "up1.w", "out.b"]

    def loss(*tensors):
        p = dict(trunk)
        p.update(zip(names, tensors))
        return dc.sum(dc.mul(denoiser.forward(p, y.astype(np.float64), x.astype(np.float64), 0.4), w))

    rep = dc.grad_check(loss, [trunk[n].astype(np.float64) for n in names], 1e-3, max_points=40)
    assert rep.passed, rep.line()


def test_every_parameter_receives_gradient(rng):
    trunk, head = denoiser.init(0, 4)
    y, x = _inputs(rng, 2)
    P = {k: dc.Tensor(v, requires_grad=True) for k, v in trunk.items()}
    H = {k: dc.Tensor(v, requires_grad=True) for k, v in head.items()}
    eps, p = denoiser.forward_with_uncertainty(P, H, y, x, np.array([0.3, 0.8]))
    dc.add(dc.sum(dc.mul(eps, eps)), dc.sum(p)).backward()
    dead = [k for k, t in {**P, **H}.items() if t.grad is None or not np.any(t.grad)]
    assert not dead


def test_output_bounded_at_init(rng):
    trunk, _ = denoiser.init(7, 16)
    y, x = _inputs(rng, 1, 32)
    assert np.abs(denoiser.forward(trunk, y, x, 0.05).data).max() < 1e3


def test_forward_deterministic(rng):
    trunk, _ = denoiser.init(0, 8)
    y, x = _inputs(rng)
    assert denoiser.forward(trunk, y, x, 0.5).data.tobytes() == denoiser.forward(trunk, y, x, 0.5).data.tobytes()


def test_layout_helpers(rng):
    img = rng.random((8, 12, 3))
    nchw = denoiser.hwc_to_nchw(img)
    assert nchw.shape == (1, 3, 8, 12)
    np.testing.assert_array_equal(denoiser.nchw_to_hwc(nchw)[0], img)
