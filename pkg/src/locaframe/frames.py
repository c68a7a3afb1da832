"""Equivariant local frames and moving features between global and local coordinates.

A frame is stored as a 3x3 matrix whose rows are the local basis vectors in
global coordinates, so ``F @ v`` gives the local coordinates of a global
vector ``v``. Frames are built from two distance-weighted sums of neighbour
displacements followed by Gram-Schmidt and a cross product, which makes them
proper rotations that co-rotate with the input: ``F(QX + t) = F(X) Q^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .embeddings import BesselConfig, radial_embed
from .errors import DegenerateFrame, ShapeMismatch
from .group import GroupElement
from .reps import RepAction, RepSpec

DEGENERACY_TOL = 1e-8


@dataclass
class LocalFrames:
    matrices: np.ndarray
    degenerate_mask: np.ndarray

    def __len__(self):
        return self.matrices.shape[0]

    def element(self, i: int) -> GroupElement:
        return GroupElement(self.matrices[i], 1)


def edge_vectors(positions: np.ndarray, edge_index: np.ndarray) -> np.ndarray:
    """``x_dst - x_src`` for every edge ``src -> dst``."""
    src, dst = edge_index
    return positions[dst] - positions[src]


def _heuristic_weights(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 1.0 / r**2, 1.0 / r


def init_frame_weights(params: nn.ParamStore, cfg: BesselConfig, rng: np.random.Generator, hidden: int = 16, name: str = "frames"):
    """Two small MLPs mapping the radial embedding to the two neighbour weights."""
    params.add(f"{name}.radial_freq", np.pi * np.arange(1, cfg.num_radial + 1))
    for k in ("w1", "w2"):
        nn.init_mlp(params, f"{name}.{k}", [cfg.num_radial, hidden, 1], rng)


def _learned_weights(params: nn.ParamStore, cfg: BesselConfig, r: np.ndarray, name: str):
    emb = radial_embed(cfg, r, params[f"{name}.radial_freq"])
    w1 = nn.mlp(params, f"{name}.w1", emb).data[:, 0]
    w2 = nn.mlp(params, f"{name}.w2", emb).data[:, 0]
    return w1, w2


def compute_frames(
    positions: np.ndarray,
    edge_index: np.ndarray,
    weight_params: nn.ParamStore | None = None,
    embed_cfg: BesselConfig | None = None,
    name: str = "frames",
) -> LocalFrames:
    """Predict one frame per node from its incoming edges.

    ``v1 = sum_j w1(r_ij) (x_j - x_i)`` and likewise ``v2`` with ``w2``; the
    weights are ``1/r^2`` and ``1/r`` unless ``weight_params`` supplies two
    learned MLPs on the radial embedding. Learned weights are evaluated as
    constants here: frames do not pass gradients.

    Nodes whose construction degenerates (fewer than two usable, non-collinear
    neighbours) get the identity frame and are flagged in ``degenerate_mask``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    edge_index = np.asarray(edge_index, dtype=np.int64).reshape(2, -1)
    n = positions.shape[0]
    src, dst = edge_index
    rel = positions[src] - positions[dst]
    r = np.linalg.norm(rel, axis=1)
    if weight_params is None:
        w1, w2 = _heuristic_weights(r)
    else:
        w1, w2 = _learned_weights(weight_params, embed_cfg or BesselConfig(), r, name)
    v1 = nn.segment_sum_np(w1[:, None] * rel, dst, n)
    v2 = nn.segment_sum_np(w2[:, None] * rel, dst, n)
    counts = np.bincount(dst, minlength=n)
    mean_len = nn.segment_sum_np(r, dst, n) / np.maximum(counts, 1)

    n1 = np.linalg.norm(v1, axis=1)
    e1 = v1 / np.where(n1 > 0, n1, 1.0)[:, None]
    resid = v2 - np.sum(v2 * e1, axis=1, keepdims=True) * e1
    nr = np.linalg.norm(resid, axis=1)
    n2 = np.linalg.norm(v2, axis=1)
    e2 = resid / np.where(nr > 0, nr, 1.0)[:, None]
    e3 = np.cross(e1, e2)

    degenerate = (
        (counts < 2)
        | (n1 < DEGENERACY_TOL * mean_len)
        | (nr < DEGENERACY_TOL * n2)
        | (n2 == 0)
    )
    mats = np.stack([e1, e2, e3], axis=1)
    mats[degenerate] = np.eye(3)
    return LocalFrames(mats, degenerate)


def transition(frames: LocalFrames, i: int, j: int) -> GroupElement:
    """``F_i F_j^T``: carries local coordinates of node j into the frame of node i."""
    bad = [k for k in (i, j) if frames.degenerate_mask[k]]
    if bad:
        raise DegenerateFrame(f"node(s) {bad} have degenerate frames")
    return GroupElement(frames.matrices[i] @ frames.matrices[j].T, 1)


def edge_transitions(frames: LocalFrames, edge_index: np.ndarray) -> np.ndarray:
    """Transition matrices for every edge ``src -> dst``, shape ``(E, 3, 3)``."""
    src, dst = edge_index
    return np.matmul(frames.matrices[dst], np.swapaxes(frames.matrices[src], 1, 2))


def _check(spec: RepSpec, frames: LocalFrames, features: np.ndarray):
    if features.shape != (len(frames), spec.total_dim):
        raise ShapeMismatch(f"features {features.shape} do not match {len(frames)} nodes x {spec.total_dim}")


def canonicalize(spec: RepSpec, frames: LocalFrames, global_features: np.ndarray) -> np.ndarray:
    """Express per-node global features in each node's own frame.

    Degenerate nodes carry the identity frame, so their features pass through
    unchanged; ``frames.degenerate_mask`` flags them.
    """
    global_features = np.asarray(global_features)
    _check(spec, frames, global_features)
    return RepAction(spec, frames.matrices, np.ones(len(frames))).apply(global_features)


def decanonicalize(spec: RepSpec, frames: LocalFrames, local_features: np.ndarray) -> np.ndarray:
    local_features = np.asarray(local_features)
    _check(spec, frames, local_features)
    return RepAction(spec, frames.matrices, np.ones(len(frames))).apply_inverse(local_features)


def frame_equivariance_error(positions: np.ndarray, edge_index: np.ndarray, rotations: np.ndarray, translations: np.ndarray) -> tuple[float, int]:
    """Max ``|F(QX + t) - F(X) Q^T|`` over the given transforms, ignoring degenerate nodes.

    Returns ``(error, number_of_degenerate_nodes)``.
    """
    base = compute_frames(positions, edge_index)
    ok = ~base.degenerate_mask
    worst = 0.0
    for rot, shift in zip(rotations, translations):
        moved = compute_frames(np.asarray(positions) @ rot.T + shift, edge_index)
        if ok.any():
            diff = moved.matrices[ok] - base.matrices[ok] @ rot.T
            worst = max(worst, float(np.max(np.abs(diff))))
    return worst, int(base.degenerate_mask.sum())
