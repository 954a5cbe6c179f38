"""Differentiable singular values."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DimensionError
from .ops import as_tensor
from .svd import thin_svd_many
from .tensor import Tensor, make_node


def singular_values(M) -> Tensor:
    """Descending singular values of a 2-D tensor.

    Backward uses dL/dM = sum_i g_i u_i v_i^T, which is exact as long as only
    the singular values (never U or V) feed the downstream computation and the
    values are distinct.
    """
    return singular_values_batch([M])


def singular_values_batch(mats: Sequence) -> Tensor:
    """Spectra of several matrices concatenated into one 1-D tensor.

    Matrix ``j`` contributes ``min(m_j, n_j)`` entries, in input order. All SVDs
    run in one batched Jacobi call.
    """
    mats = [as_tensor(M) for M in mats]
    if not mats:
        raise DimensionError("singular_values_batch needs at least one matrix")
    for M in mats:
        if M.ndim != 2:
            raise DimensionError(f"singular values need a 2-D tensor, got shape {M.shape}")
    dtype = np.result_type(*[M.dtype for M in mats])
    factors = thin_svd_many([M.data for M in mats])
    values = np.concatenate([s for _, s, _ in factors]).astype(dtype)
    bounds = np.cumsum([0] + [len(s) for _, s, _ in factors])

    def backward(g):
        grads = []
        for j, (u, _, v) in enumerate(factors):
            gj = np.asarray(g[bounds[j]:bounds[j + 1]], dtype=np.float64)
            grads.append(((u * gj) @ v.T).astype(dtype))
        return tuple(grads)
    return make_node(values, mats, backward, "singular_values")
