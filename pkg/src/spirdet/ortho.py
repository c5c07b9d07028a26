"""Orthogonality penalty over the K parallel downsampling kernels of a stage.

Filters are rows: the K kernels ``(out, in, 3, 3)`` are stacked into a
``(K*out, in*9)`` matrix F, and the penalty is ``||F F^T - I||_F^2``.
"""
from typing import Sequence

import numpy as np

from .repblocks import StructureError


def concat_filters(bank: Sequence[np.ndarray]) -> np.ndarray:
    """Stack kernels into the filter matrix; row ``k*out + o`` is kernel k, filter o."""
    bank = [np.asarray(w) for w in bank] if not isinstance(bank, np.ndarray) else list(bank)
    if not bank:
        raise StructureError("empty downsampling bank")
    shape = bank[0].shape
    if any(w.shape != shape for w in bank):
        raise StructureError(f"bank kernels disagree in shape: {[w.shape for w in bank]}")
    return np.stack(bank).reshape(len(bank) * shape[0], -1)


def split_filters(f: np.ndarray, K: int, kernel_shape) -> np.ndarray:
    """Inverse of :func:`concat_filters`."""
    return f.reshape((K,) + tuple(kernel_shape))


def ortho_penalty(f: np.ndarray) -> float:
    f = np.asarray(f)
    g = f @ f.T
    g[np.diag_indices_from(g)] -= 1.0
    return float((g * g).sum())


def ortho_penalty_grad(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    g = f @ f.T
    g[np.diag_indices_from(g)] -= 1.0
    return 4.0 * g @ f
