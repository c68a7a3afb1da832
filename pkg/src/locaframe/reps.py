"""Representations of O(3) acting on flat feature vectors.

Two exact families are supported: real irreducible representations (real
Wigner-D matrices, components ordered m = -l..l) and Cartesian tensors of
order n (row-major flattening over the n indices). Each block additionally
carries a parity: pseudo blocks pick up an extra ``det(g)`` factor.

For an improper element ``g`` the irrep action is ``det(g)**l D_l(det(g) g)``,
so a normal degree-1 irrep transforms exactly like a Cartesian vector.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .errors import DecompositionFailed, MalformedSpec, ShapeMismatch, UnsupportedDegree
from .group import GroupElement, random_rotation_matrices

MAX_IRREP_DEGREE = 16
MAX_CARTESIAN_ORDER = 4

# (x, y, z) -> (y, z, x): degree-1 real harmonics are ordered m = -1, 0, 1
AXIS_PERM = np.array([1, 2, 0])
P_AXIS = np.eye(3)[AXIS_PERM]


class Parity(str, enum.Enum):
    NORMAL = "n"
    PSEUDO = "p"


class RepKind(str, enum.Enum):
    IRREP = "irrep"
    CARTESIAN = "cartesian"


@dataclass(frozen=True)
class RepBlock:
    multiplicity: int
    degree: int
    parity: Parity
    kind: RepKind

    @property
    def component_dim(self) -> int:
        """Dimension of one copy: 2l+1 for irreps, 3**n for Cartesian tensors."""
        if self.kind is RepKind.IRREP:
            return 2 * self.degree + 1
        return 3**self.degree

    @property
    def dim(self) -> int:
        return self.multiplicity * self.component_dim

    def __str__(self) -> str:
        return f"{self.multiplicity}x{self.degree}{self.parity.value}"


@dataclass(frozen=True)
class RepSpec:
    blocks: tuple[RepBlock, ...]
    kind: RepKind

    def __post_init__(self):
        for b in self.blocks:
            if b.kind is not self.kind:
                raise ValueError("all blocks of a RepSpec must share its kind")

    @property
    def total_dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    @property
    def max_degree(self) -> int:
        return max((b.degree for b in self.blocks), default=0)

    @property
    def is_scalar(self) -> bool:
        return all(b.degree == 0 and b.parity is Parity.NORMAL for b in self.blocks)

    def slices(self):
        """Yield ``(block, start, stop)`` for each block of the flat layout."""
        start = 0
        for b in self.blocks:
            yield b, start, start + b.dim
            start += b.dim

    def __str__(self) -> str:
        return "+".join(str(b) for b in self.blocks)

    def __len__(self) -> int:
        return self.total_dim


def parse_repspec(text: str, kind: RepKind | str = RepKind.CARTESIAN) -> RepSpec:
    """Parse ``"8x0n+4x1p"`` style strings.

    Whitespace around ``+`` and at either end is ignored. Errors report the
    offset of the first offending character in the original string.
    """
    kind = RepKind(kind)
    cap = MAX_IRREP_DEGREE if kind is RepKind.IRREP else MAX_CARTESIAN_ORDER
    blocks = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        start = pos
        while pos < n and text[pos].isdigit():
            pos += 1
        if pos == start:
            raise MalformedSpec("expected multiplicity", pos)
        mult = int(text[start:pos])
        if mult == 0:
            raise MalformedSpec("multiplicity must be positive", start)
        if pos >= n or text[pos] != "x":
            raise MalformedSpec("expected 'x'", pos)
        pos += 1
        dstart = pos
        while pos < n and text[pos].isdigit():
            pos += 1
        if pos == dstart:
            raise MalformedSpec("expected degree", pos)
        degree = int(text[dstart:pos])
        if pos >= n or text[pos] not in "np":
            raise MalformedSpec("expected parity letter 'n' or 'p'", pos)
        parity = Parity(text[pos])
        pos += 1
        if degree > cap:
            raise UnsupportedDegree(f"degree {degree} exceeds the {kind.value} cap {cap}")
        blocks.append(RepBlock(mult, degree, parity, kind))
        while pos < n and text[pos].isspace():
            pos += 1
        if pos == n:
            break
        if text[pos] != "+":
            raise MalformedSpec("expected '+'", pos)
        pos += 1
    return RepSpec(tuple(blocks), kind)


def as_repspec(spec: RepSpec | str, kind: RepKind | str = RepKind.CARTESIAN) -> RepSpec:
    return spec if isinstance(spec, RepSpec) else parse_repspec(spec, kind)


# ---------------------------------------------------------------------------
# Wigner-D matrices (real basis), degree recurrence seeded from D1 = P R P^T
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _recurrence_tables(l: int):
    """Coefficient and row-index tables for building D_l from D_{l-1} and D_1."""
    m = np.arange(-l, l + 1)
    nn = np.arange(-l, l + 1)
    mm, n2 = np.meshgrid(m, nn, indexing="ij")
    am = np.abs(mm)
    d0 = (mm == 0).astype(float)
    denom = np.where(np.abs(n2) < l, (l + n2) * (l - n2), 2 * l * (2 * l - 1)).astype(float)
    u = np.sqrt((l + mm) * (l - mm) / denom)
    v = 0.5 * np.sqrt((1 + d0) * (l + am - 1) * (l + am) / denom) * (1 - 2 * d0)
    w = -0.5 * np.sqrt(np.maximum((l - am - 1) * (l - am), 0) / denom) * (1 - d0)

    # rows are indices into D_{l-1}, offset by l-1; invalid rows get a zero coefficient
    off = l - 1

    def row(a):
        return int(np.clip(a, -off, off) + off)

    rU = np.array([row(k) for k in m])
    rV1, cV1, rV2, cV2 = [], [], [], []
    rW1, cW1, rW2, cW2 = [], [], [], []
    for k in m:
        if k == 0:
            rV1.append(row(1)), cV1.append(1.0), rV2.append(row(-1)), cV2.append(1.0)
            rW1.append(row(0)), cW1.append(0.0), rW2.append(row(0)), cW2.append(0.0)
        elif k > 0:
            d1 = float(k == 1)
            rV1.append(row(k - 1)), cV1.append(np.sqrt(1 + d1))
            rV2.append(row(-k + 1)), cV2.append(-(1 - d1))
            valid = float(k + 1 <= off)
            rW1.append(row(k + 1)), cW1.append(valid)
            rW2.append(row(-k - 1)), cW2.append(valid)
        else:
            d1 = float(k == -1)
            rV1.append(row(k + 1)), cV1.append(1 - d1)
            rV2.append(row(-k - 1)), cV2.append(np.sqrt(1 + d1))
            valid = float(-k + 1 <= off)
            rW1.append(row(k - 1)), cW1.append(valid)
            rW2.append(row(-k + 1)), cW2.append(-valid)
    arr = lambda x, t=float: np.array(x, dtype=t)  # noqa: E731
    return (
        u, v, w, rU,
        arr(rV1, int), arr(cV1)[:, None], arr(rV2, int), arr(cV2)[:, None],
        arr(rW1, int), arr(cW1)[:, None], arr(rW2, int), arr(cW2)[:, None],
    )


def _next_degree(l: int, d1: np.ndarray, dp: np.ndarray) -> np.ndarray:
    u, v, w, rU, rV1, cV1, rV2, cV2, rW1, cW1, rW2, cW2 = _recurrence_tables(l)
    batch = d1.shape[0]
    # P[i][a, b] for i in (-1, 0, 1), rows a over degree l-1, columns b over degree l
    p = np.empty((3, batch, 2 * l - 1, 2 * l + 1))
    r_lo = d1[:, :, 0][:, :, None]
    r_mid = d1[:, :, 1][:, :, None, None]
    r_hi = d1[:, :, 2][:, :, None]
    first = dp[:, None, :, 0]
    last = dp[:, None, :, -1]
    p_mid = np.swapaxes(r_mid * dp[:, None], 0, 1)
    p[:, :, :, 1:-1] = p_mid
    p[:, :, :, -1] = np.swapaxes(r_hi * last - r_lo * first, 0, 1)
    p[:, :, :, 0] = np.swapaxes(r_hi * first + r_lo * last, 0, 1)
    pm1, p0, p1 = p[0], p[1], p[2]
    big_u = p0[:, rU]
    big_v = cV1 * p1[:, rV1] + cV2 * pm1[:, rV2]
    big_w = cW1 * p1[:, rW1] + cW2 * pm1[:, rW2]
    return u * big_u + v * big_v + w * big_w


def wigner_d_stack(lmax: int, rotations: np.ndarray) -> list[np.ndarray]:
    """Real Wigner-D matrices ``[D_0, ..., D_lmax]`` for a stack of rotations.

    Args:
        lmax: highest degree, at most ``MAX_IRREP_DEGREE``.
        rotations: proper rotation matrices, shape ``(B, 3, 3)``.

    Returns:
        list whose entry ``l`` has shape ``(B, 2l+1, 2l+1)``.
    """
    if lmax < 0 or lmax > MAX_IRREP_DEGREE:
        raise UnsupportedDegree(f"degree {lmax} outside [0, {MAX_IRREP_DEGREE}]")
    rot = np.asarray(rotations, dtype=np.float64)
    batch = rot.shape[0]
    out = [np.ones((batch, 1, 1))]
    if lmax == 0:
        return out
    d1 = rot[:, AXIS_PERM][:, :, AXIS_PERM]
    out.append(d1)
    for l in range(2, lmax + 1):
        out.append(_next_degree(l, d1, out[-1]))
    return out


def wigner_d(l: int, g: GroupElement | np.ndarray) -> np.ndarray:
    """Real-basis Wigner-D matrix of degree ``l`` for a proper rotation."""
    m = g.matrix if isinstance(g, GroupElement) else np.asarray(g, dtype=np.float64)
    return wigner_d_stack(l, m[None])[l][0]


# ---------------------------------------------------------------------------
# Cartesian tensors
# ---------------------------------------------------------------------------


def _contract_axes(t: np.ndarray, mats: np.ndarray, order: int) -> np.ndarray:
    """Apply ``mats`` along each of the ``order`` tensor axes.

    ``t`` has shape ``(B, M, 3**order)``, ``mats`` shape ``(B, 3, 3)`` (or
    ``(1, 3, 3)`` to broadcast one element over the batch).
    """
    lead = t.shape[:2]
    g = mats[:, None]
    for k in range(order):
        t = t.reshape(lead + (3**k, 3, 3 ** (order - k - 1)))
        t = np.matmul(g[:, :, None], t)
    return t.reshape(lead + (3**order,))


def cartesian_transform(order: int, parity: Parity | str, g: GroupElement, tensor: np.ndarray) -> np.ndarray:
    """Transform a flat Cartesian (pseudo)tensor of the given order by ``g``."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.shape != (3**order,):
        raise ShapeMismatch(f"expected length {3**order}, got shape {tensor.shape}")
    out = _contract_axes(tensor[None, None], g.matrix[None], order)[0, 0]
    if Parity(parity) is Parity.PSEUDO:
        out = g.det_sign * out
    return out


# ---------------------------------------------------------------------------
# Direct sums
# ---------------------------------------------------------------------------


class RepAction:
    """The action of a RepSpec for a stack of group elements.

    Wigner matrices are built once per degree when the action is created and
    shared by every block (and multiplicity) of that degree. ``apply`` maps
    features of shape ``(B, dim)``; a single element (``B == 1``) broadcasts
    over any number of feature rows.
    """

    def __init__(self, spec: RepSpec, matrices: np.ndarray, dets: np.ndarray | None = None):
        mats = np.asarray(matrices, dtype=np.float64)
        if mats.ndim == 2:
            mats = mats[None]
        if dets is None:
            dets = np.sign(np.linalg.det(mats))
        self.spec = spec
        self.dets = np.asarray(dets, dtype=np.float64).reshape(-1)
        self.matrices = mats
        self.wigner: dict[int, np.ndarray] = {}
        if spec.kind is RepKind.IRREP and spec.blocks:
            proper = mats * self.dets[:, None, None]
            stack = wigner_d_stack(spec.max_degree, proper)
            for b in spec.blocks:
                self.wigner[b.degree] = stack[b.degree]

    def _block_sign(self, block: RepBlock) -> np.ndarray | None:
        exponent = block.degree if block.kind is RepKind.IRREP else 0
        exponent += block.parity is Parity.PSEUDO
        if exponent % 2 == 0 or np.all(self.dets > 0):
            return None
        return self.dets

    def _run(self, x: np.ndarray, transpose: bool) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.spec.total_dim:
            raise ShapeMismatch(f"features have width {x.shape[-1]}, spec {self.spec} needs {self.spec.total_dim}")
        out = np.empty(np.broadcast_shapes(x.shape, (self.matrices.shape[0], x.shape[-1])), dtype=x.dtype)
        rows = out.shape[0]
        x = np.broadcast_to(x, out.shape)
        for block, s, e in self.spec.slices():
            seg = x[:, s:e].reshape(rows, block.multiplicity, block.component_dim)
            if block.degree == 0:
                res = seg
            elif block.kind is RepKind.IRREP:
                dm = self.wigner[block.degree].astype(x.dtype, copy=False)
                res = np.matmul(seg, dm if transpose else np.swapaxes(dm, 1, 2))
            else:
                mats = self.matrices.astype(x.dtype, copy=False)
                if transpose:
                    mats = np.swapaxes(mats, 1, 2)
                res = _contract_axes(seg, mats, block.degree)
            sign = self._block_sign(block)
            if sign is not None:
                res = res * sign.astype(x.dtype)[:, None, None]
            out[:, s:e] = res.reshape(rows, block.dim)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._run(x, transpose=False)

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """Action of the inverse elements (the transpose, since every block is orthogonal)."""
        return self._run(x, transpose=True)

    def dense(self) -> np.ndarray:
        """Dense block-diagonal matrices, shape ``(B, dim, dim)``."""
        d = self.spec.total_dim
        eye = np.eye(d)
        cols = [self.apply(np.broadcast_to(eye[k], (self.matrices.shape[0], d))) for k in range(d)]
        return np.stack(cols, axis=-1)


def apply_rep(spec: RepSpec, g: GroupElement, features: np.ndarray) -> np.ndarray:
    """Apply the direct-sum representation of ``g`` to features ``(dim,)`` or ``(N, dim)``."""
    features = np.asarray(features)
    single = features.ndim == 1
    x = features[None] if single else features
    if x.shape[-1] != spec.total_dim:
        raise ShapeMismatch(f"features have width {x.shape[-1]}, spec {spec} needs {spec.total_dim}")
    out = RepAction(spec, g.matrix[None], np.array([g.det_sign])).apply(x)
    return out[0] if single else out


def rep_matrix(spec: RepSpec, g: GroupElement) -> np.ndarray:
    return RepAction(spec, g.matrix[None], np.array([g.det_sign])).dense()[0]


# ---------------------------------------------------------------------------
# Cartesian -> irreducible decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intertwiner:
    """Orthogonal change of basis with ``Q T(g) Q^T = D_target(g)``."""

    matrix: np.ndarray
    source: RepSpec
    target: RepSpec
    residual: float

    @property
    def multiset(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for b in self.target.blocks:
            counts[b.degree] = counts.get(b.degree, 0) + b.multiplicity
        return counts


def _cartesian_rep_matrices(order: int, rots: np.ndarray) -> np.ndarray:
    d = 3**order
    eye = np.broadcast_to(np.eye(d), (rots.shape[0], d, d))
    # column k of T(R) is the transform of basis tensor e_k
    return np.swapaxes(_contract_axes(np.swapaxes(eye, 1, 2), rots, order), 1, 2)


_DECOMP_SEED = 20240917


@functools.lru_cache(maxsize=None)
def decompose_cartesian(order: int, n_solve: int = 20, n_verify: int = 100) -> Intertwiner:
    """Numerically block-diagonalize the order-``n`` Cartesian tensor representation.

    For each degree l the space of maps W with ``D_l(R) W = W T(R)`` is found
    as the null space of the stacked linear constraints over ``n_solve``
    random rotations; its dimension is the multiplicity of l. The null-space
    basis is orthonormal in the trace inner product, and Schur's lemma makes
    each rescaled basis element a copy with orthonormal rows.
    """
    if not 0 <= order <= MAX_CARTESIAN_ORDER:
        raise UnsupportedDegree(f"order {order} outside [0, {MAX_CARTESIAN_ORDER}]")
    rng = np.random.default_rng(_DECOMP_SEED + order)
    rots = random_rotation_matrices(rng, n_solve)
    t_mats = _cartesian_rep_matrices(order, rots)
    dim = 3**order
    wig = wigner_d_stack(order, rots)

    rows, blocks = [], []
    for l in range(order + 1):
        a = 2 * l + 1
        gram = np.zeros((a * dim, a * dim))
        for k in range(n_solve):
            op = np.kron(wig[l][k], np.eye(dim)) - np.kron(np.eye(a), t_mats[k].T)
            gram += op.T @ op
        evals, evecs = np.linalg.eigh(gram)
        null = evecs[:, evals < 1e-8 * n_solve]
        copies = [np.sqrt(a) * null[:, c].reshape(a, dim) for c in range(null.shape[1])]
        keyed = []
        for w in copies:
            flat = w.ravel()
            first = int(np.argmax(np.abs(flat) > 1e-8))
            if flat[first] < 0:
                w = -w
            keyed.append((first, w))
        keyed.sort(key=lambda kw: kw[0])
        if keyed:
            parity = Parity.NORMAL if (l - order) % 2 == 0 else Parity.PSEUDO
            blocks.append(RepBlock(len(keyed), l, parity, RepKind.IRREP))
            rows.extend(w for _, w in keyed)
    q = np.concatenate(rows, axis=0)
    target = RepSpec(tuple(blocks), RepKind.IRREP)
    source = RepSpec((RepBlock(1, order, Parity.NORMAL, RepKind.CARTESIAN),), RepKind.CARTESIAN)
    if q.shape != (dim, dim):
        raise DecompositionFailed(f"found {q.shape[0]} irrep components for {dim} tensor components")

    vrots = random_rotation_matrices(rng, n_verify)
    vt = _cartesian_rep_matrices(order, vrots)
    dets = np.ones(n_verify)
    vd = RepAction(target, vrots, dets).dense()
    residual = float(np.max(np.abs(q @ vt @ q.T - vd)))
    residual = max(residual, float(np.max(np.abs(q @ q.T - np.eye(dim)))))
    if not residual < 1e-9:
        raise DecompositionFailed(f"block-diagonalization residual {residual:.3e} for order {order}")
    q.setflags(write=False)
    return Intertwiner(q, source, target, residual)


def irreps_of(spec: RepSpec) -> RepSpec:
    """Irrep spec equivalent to a Cartesian spec, block by block."""
    if spec.kind is RepKind.IRREP:
        return spec
    blocks = []
    for b in spec.blocks:
        flip = b.parity is Parity.PSEUDO
        for t in decompose_cartesian(b.degree).target.blocks:
            parity = t.parity
            if flip:
                parity = Parity.PSEUDO if parity is Parity.NORMAL else Parity.NORMAL
            blocks.append(RepBlock(b.multiplicity * t.multiplicity, t.degree, parity, RepKind.IRREP))
    return RepSpec(tuple(blocks), RepKind.IRREP)


# ---------------------------------------------------------------------------
# Learned transport
# ---------------------------------------------------------------------------


def init_mlp_rep(params, name: str, feature_dim: int, hidden: tuple[int, ...], rng: np.random.Generator, zero_last: bool = False):
    from . import nn

    nn.init_mlp(params, name, [9 + feature_dim, *hidden, feature_dim], rng, zero_last=zero_last)


def mlp_rep_apply(params, transition, features, name: str = "mlp_rep"):
    """``MLP(flatten(transition) || features)``: a learned stand-in for ``rho(transition) f``.

    No homomorphism property is imposed. ``transition`` is a GroupElement or a
    stack of matrices ``(E, 3, 3)`` matching ``features`` of shape ``(E, d)``.
    Returns a Tensor when given one, otherwise a numpy array.
    """
    from . import nn

    mats = transition.matrix[None] if isinstance(transition, GroupElement) else np.asarray(transition)
    as_array = not isinstance(features, nn.Tensor)
    x = nn.as_tensor(features) if as_array else features
    single = x.ndim == 1
    if single:
        x = nn.reshape(x, (1, -1))
    d_in = params[f"{name}.0.weight"].shape[0]
    if x.shape[-1] + 9 != d_in:
        raise ShapeMismatch(f"{name}: expects features of width {d_in - 9}, got {x.shape[-1]}")
    flat = mats.reshape(mats.shape[0], 9).astype(x.dtype)
    if flat.shape[0] != x.shape[0]:
        flat = np.broadcast_to(flat, (x.shape[0], 9))
    out = nn.mlp(params, name, nn.concat([nn.Tensor(np.ascontiguousarray(flat)), x], axis=-1))
    if single:
        out = nn.reshape(out, (-1,))
    return out.data if as_array else out


# ---------------------------------------------------------------------------
# Self-checks
# ---------------------------------------------------------------------------


def random_o3_matrices(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Haar rotations, half of them composed with a reflection; returns ``(matrices, dets)``."""
    rots = random_rotation_matrices(rng, n)
    dets = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    flip = np.ones((n, 1, 3))
    flip[:, 0, 2] = dets
    return rots * flip, dets


def representation_errors(lmax: int, nmax: int, pairs: int, rng: np.random.Generator) -> dict[str, dict[str, float]]:
    """Homomorphism and orthogonality errors per single-block rep, over random O(3) pairs.

    Homomorphism error is ``|rho(g1 g2) f - rho(g1) rho(g2) f|_inf / |f|_inf``;
    orthogonality error is ``|rho(g)^T rho(g) - I|_inf``.
    """
    out = {}
    kinds = [(RepKind.IRREP, l) for l in range(lmax + 1)] + [(RepKind.CARTESIAN, n) for n in range(nmax + 1)]
    for kind, deg in kinds:
        for parity in Parity:
            spec = parse_repspec(f"1x{deg}{parity.value}", kind)
            g1, d1 = random_o3_matrices(rng, pairs)
            g2, d2 = random_o3_matrices(rng, pairs)
            f = rng.standard_normal((pairs, spec.total_dim))
            lhs = RepAction(spec, g1 @ g2, d1 * d2).apply(f)
            rhs = RepAction(spec, g1, d1).apply(RepAction(spec, g2, d2).apply(f))
            hom = float(np.max(np.abs(lhs - rhs) / np.max(np.abs(f), axis=1, keepdims=True)))
            dense = RepAction(spec, g1, d1).dense()
            orth = float(np.max(np.abs(np.swapaxes(dense, 1, 2) @ dense - np.eye(spec.total_dim))))
            out[f"{kind.value}:{spec}"] = {"kind": kind.value, "homomorphism": hom, "orthogonality": orth}
    return out
