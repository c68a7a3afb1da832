"""Exact O(3) group elements.

Everything here works in float64 regardless of the precision used by the
neural network, so the group-theoretic checks can use tight tolerances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DRIFT_TOL = 1e-12
_REFLECT_Z = np.diag([1.0, 1.0, -1.0])


@dataclass(frozen=True)
class GroupElement:
    """An orthogonal 3x3 matrix acting on R^3.

    ``det_sign`` caches the determinant (+1 for rotations, -1 for improper
    elements) so parity bookkeeping never has to recompute it.
    """

    matrix: np.ndarray
    det_sign: int = field(default=0)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"group element must be 3x3, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.det_sign == 0:
            object.__setattr__(self, "det_sign", 1 if np.linalg.det(m) > 0 else -1)
        elif self.det_sign not in (1, -1):
            raise ValueError("det_sign must be +1 or -1")

    @property
    def is_proper(self) -> bool:
        return self.det_sign == 1

    def __matmul__(self, other: GroupElement) -> GroupElement:
        return compose(self, other)

    def act(self, vectors: np.ndarray) -> np.ndarray:
        """Apply to one vector ``(3,)`` or a stack of row vectors ``(..., 3)``."""
        return np.asarray(vectors) @ self.matrix.T


def identity() -> GroupElement:
    return GroupElement(np.eye(3), 1)


def orthogonality_error(m: np.ndarray) -> float:
    return float(np.max(np.abs(m @ m.T - np.eye(3))))


def reorthonormalize(m: np.ndarray) -> np.ndarray:
    """One Newton step ``M <- M (3I - M^T M) / 2`` toward the nearest orthogonal matrix."""
    return 0.5 * m @ (3.0 * np.eye(3) - m.T @ m)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(w, x, y, z)``; works on stacks."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def random_rotation_matrices(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` Haar-random rotation matrices, shape ``(n, 3, 3)``."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quaternion_to_matrix(q)


def random_rotation(rng: np.random.Generator) -> GroupElement:
    """Haar-uniform proper rotation drawn via a normalized Gaussian quaternion."""
    return GroupElement(random_rotation_matrices(rng, 1)[0], 1)


def random_reflection(rng: np.random.Generator) -> GroupElement:
    """Haar-uniform improper element: a random rotation followed by a z-mirror."""
    r = random_rotation_matrices(rng, 1)[0]
    return GroupElement(r @ _REFLECT_Z, -1)


def compose(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """Group product ``g1 g2`` (``g2`` acts first)."""
    m = g1.matrix @ g2.matrix
    if orthogonality_error(m) > _DRIFT_TOL:
        m = reorthonormalize(m)
    return GroupElement(m, g1.det_sign * g2.det_sign)


def inverse(g: GroupElement) -> GroupElement:
    return GroupElement(g.matrix.T, g.det_sign)
