"""Finite-difference gradient checks for every differentiable operation.

Each case reduces an operation's output to a scalar by contracting it with a
fixed random weight array, so every output entry contributes to the check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import denoiser, losses, structure
from . import diffcore as dc
from .diffusion import learnable_prev
from .schedules import build_linear

TOLERANCE = {np.float64: 1e-4, np.float32: 1e-3}
# float32 central differences: a larger step trades truncation for rounding error
STEP = {np.float64: 1e-6, np.float32: 2e-2}
# Composite pathways lose too many digits to cancellation for float32
# differences; their float32 tape gradients are checked against float64 ones.
COMPOSITE = ("singular_values_5x7", "learnable_prev_pathway", "rank_loss",
             "uncertainty_loss", "weighted_noise_loss")


def _contract(out: dc.Tensor, seed: int) -> dc.Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return dc.sum(dc.mul(out, w.astype(out.dtype)))


def _cases(rng: np.random.Generator):
    """(name, fn, inputs, wrt) tuples; inputs are float64 and cast per run."""
    r = rng.standard_normal
    cases = []

    def add(name, fn, inputs, wrt=None):
        cases.append((name, fn, inputs, wrt))

    add("add", lambda a, b: _contract(dc.add(a, b), 1), [r((3, 4)), r((3, 4))])
    add("sub", lambda a, b: _contract(dc.sub(a, b), 2), [r((3, 4)), r((3, 4))])
    add("mul", lambda a, b: _contract(dc.mul(a, b), 3), [r((3, 4)), r((3, 4))])
    add("neg", lambda a: _contract(dc.neg(a), 4), [r((5,))])
    absx = r((6,))
    absx[0] = 0.0  # a kink: must be reported, not failed
    add("abs", lambda a: _contract(dc.abs(a), 5), [absx])
    add("exp", lambda a: _contract(dc.exp(a), 6), [r((3, 4)) * 0.5])
    add("silu", lambda a: _contract(dc.silu(a), 7), [r((3, 4)) * 2.0])
    add("sum", lambda a: dc.mul(dc.sum(a), 1.5), [r((3, 4))])
    add("mean", lambda a: dc.mul(dc.mean(a), 1.5), [r((3, 4))])
    add("reshape", lambda a: _contract(dc.reshape(a, (4, 3)), 8), [r((3, 4))])
    add("transpose", lambda a: _contract(dc.transpose(a, (2, 0, 1)), 9), [r((2, 3, 4))])
    add("concat", lambda a, b: _contract(dc.concat([a, b], axis=1), 10), [r((2, 3, 2)), r((2, 1, 2))])
    add("take_rows", lambda a: _contract(dc.take_rows(a, np.array([0, 2, 2, 3])), 11), [r((4, 3))])
    add("matmul", lambda a, b: _contract(dc.matmul(a, b), 12), [r((3, 4)), r((4, 2))])
    add("linear", lambda x, w, b: _contract(dc.linear(x, w, b), 13), [r((2, 5)), r((5, 3)), r((3,))])
    add("conv2d", lambda x, k, b: _contract(dc.conv2d(x, k, b), 14),
        [r((2, 3, 8, 8)), r((4, 3, 3, 3)) * 0.3, r((4,))])
    add("avg_pool2", lambda x: _contract(dc.avg_pool2(x), 15), [r((2, 3, 4, 4))])
    add("upsample2", lambda x: _contract(dc.upsample2(x), 16), [r((2, 3, 2, 2))])
    add("embedding_affine",
        lambda x, e, ws, bs, wh, bh: _contract(dc.channel_affine(x, dc.linear(e, ws, bs), dc.linear(e, wh, bh)), 17),
        [r((2, 3, 4, 4)), r((2, 16)), r((16, 3)) * 0.1, r((3,)) * 0.1, r((16, 3)) * 0.1, r((3,)) * 0.1],
        wrt=[0, 2, 3, 4, 5])
    diag = np.diag([3.0, 2.0, 1.0]) + 0.1 * r((3, 3))
    add("singular_values_3x3", lambda m: _contract(dc.singular_values(m), 18), [diag])
    add("singular_values_5x7", lambda m: dc.sum(dc.singular_values(m)), [r((5, 7))])

    # learnable previous sample through a small denoiser, w.r.t. network weights
    trunk, _ = denoiser.init(0, base_channels=4)
    sched = build_linear(500, 1e-4, 2e-2)
    y, x_t = rng.random((1, 3, 8, 8)), r((1, 3, 8, 8))
    z = r((1, 3, 8, 8))
    names = ["out.w", "dec1.conv2.w"]

    def pathway(w_out, w_dec):
        p = dict(trunk)
        p["out.w"], p["dec1.conv2.w"] = w_out, w_dec
        eps_hat = denoiser.forward(p, y.astype(w_out.dtype), x_t.astype(w_out.dtype), 0.5)
        return _contract(learnable_prev(x_t, eps_hat, 250, sched, z), 19)

    add("learnable_prev_pathway", pathway, [trunk[n].astype(np.float64) for n in names])

    # rank loss on clustered blocks, w.r.t. the reconstruction
    x0 = rng.random((8, 8, 3))
    cs = structure.cluster_image(x0, 2, 3)
    _, gt_blocks = structure.patchify(x0, 2)
    gt = structure.spectra(structure.build_matrices(cs, gt_blocks))
    rec = x0 + 0.2 * r((8, 8, 3))

    def rank(img):
        _, blocks = structure.patchify(img, 2)
        return structure.batch_structure_loss(blocks, [cs], [gt], [0.7])

    add("rank_loss", rank, [rec])

    eps = r((2, 3, 4, 4))
    add("uncertainty_loss", lambda e, p: losses.uncertainty_loss(eps, e, p),
        [eps + 0.5 * r((2, 3, 4, 4)), 0.3 * r((2, 3, 4, 4))])
    p_map = 0.5 * r((2, 3, 4, 4))
    add("weighted_noise_loss", lambda e: losses.weighted_noise_loss(eps, e, p_map, 10.0),
        [eps + 0.5 * r((2, 3, 4, 4))])
    return cases


def run_suite(dtype=np.float64, seed: int = 0, only: Callable[[str], bool] | None = None) -> list:
    """Run every case at ``dtype``; returns the list of ``GradCheckReport``."""
    dtype = np.dtype(dtype).type
    reports = []
    for name, fn, inputs, wrt in _cases(np.random.default_rng(seed)):
        if only is not None and not only(name):
            continue
        arrays = [np.asarray(a, dtype=dtype) for a in inputs]
        if dtype is np.float32 and name in COMPOSITE:
            rep = dc.grad_check(fn, arrays, TOLERANCE[dtype], name=name + " (f64 diff)", wrt=wrt,
                                step=STEP[np.float64], reference_dtype=np.float64)
        else:
            rep = dc.grad_check(fn, arrays, TOLERANCE[dtype], name=name, step=STEP[dtype], wrt=wrt)
        reports.append(rep)
    return reports
