from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import cKDTree

from ..errors import DataError
from .embedding import SquareEmbedding
from .field import DeformField


def nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of the nearest point for every row of ``src``."""
    _, idx = cKDTree(dst).query(src, k=1)
    return idx


def chamfer_loss(P: ArrayLike, Q: ArrayLike, *, return_pairs: bool = False):
    """Symmetric squared Chamfer distance and its gradient w.r.t. ``P``.

    loss = mean_p min_q |p - q|^2 + mean_q min_p |p - q|^2

    The nearest-neighbour pairing is held fixed when differentiating. With
    ``return_pairs`` the pairings (P->Q, Q->P) are appended to the result.
    """
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if not len(P) or not len(Q):
        raise DataError("Chamfer distance needs two nonempty point sets")
    p2q = nearest(P, Q)
    q2p = nearest(Q, P)
    dp = P - Q[p2q]
    dq = P[q2p] - Q
    loss = (dp * dp).sum(1).mean() + (dq * dq).sum(1).mean()
    grad = (2.0 / len(P)) * dp
    scatter = (2.0 / len(Q)) * dq
    for k in range(3):
        grad[:, k] += np.bincount(q2p, weights=scatter[:, k], minlength=len(P))
    if return_pairs:
        return float(loss), grad, p2q, q2p
    return float(loss), grad


def boundary_residual(out: np.ndarray, uv: np.ndarray, embedding: SquareEmbedding) -> tuple[float, np.ndarray]:
    """Mean squared deviation of field outputs from ``proj(uv)`` and its gradient w.r.t. ``out``."""
    r = np.asarray(out, dtype=np.float64) - embedding.proj(uv)
    loss = float((r * r).sum(1).mean())
    return loss, (2.0 / len(r)) * r


def boundary_loss(field: DeformField, uv: ArrayLike, embedding: SquareEmbedding) -> tuple[float, np.ndarray]:
    """Boundary-preservation loss and its gradient w.r.t. the field parameters."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    out = field.forward(uv)
    loss, g = boundary_residual(out, uv, embedding)
    return loss, field.backward(g)


def plane_loss(field: DeformField, uv: ArrayLike, embedding: SquareEmbedding) -> tuple[float, np.ndarray]:
    """Initialisation objective: mean |phi(p) - proj(p)|^2 over ``uv``."""
    return boundary_loss(field, uv, embedding)
