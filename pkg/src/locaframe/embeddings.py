"""Bessel embeddings of edge lengths and edge directions with a smooth cutoff."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NegativeDistance, NotNormalized

_SMALL = 1e-6
# components this close to zero count as zero: for coplanar neighbourhoods the
# out-of-plane component is exactly 0 and only rounding decides its sign
SIGN_ZERO_TOL = 1e-10


@dataclass
class BesselConfig:
    num_radial: int = 32
    num_angular: int = 20
    cutoff: float = 5.0
    envelope_degree: int = 6

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.num_radial < 1 or self.num_angular < 1:
            raise ValueError("need at least one radial and one angular frequency")


def init_bessel(params: nn.ParamStore, cfg: BesselConfig, name: str = "embed"):
    """Register learnable frequencies initialised to m*pi, m = 1..num."""
    params.add(f"{name}.radial_freq", np.pi * np.arange(1, cfg.num_radial + 1))
    params.add(f"{name}.angular_freq", np.pi * np.arange(1, cfg.num_angular + 1))


def envelope_np(x: np.ndarray, p: int = 6) -> np.ndarray:
    """Polynomial cutoff: 1 at x=0, vanishing with two derivatives at x=1, zero beyond."""
    a = (p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = p * (p + 1) / 2
    xp = x**p
    val = 1 - a * xp + b * xp * x - c * xp * x * x
    return np.where(x < 1.0, val, 0.0)


def envelope_grad_np(x: np.ndarray, p: int = 6) -> np.ndarray:
    a = (p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = p * (p + 1) / 2
    xm = x ** (p - 1)
    val = -a * p * xm + b * (p + 1) * xm * x - c * (p + 2) * xm * x * x
    return np.where(x < 1.0, val, 0.0)


def envelope(x: nn.Tensor, p: int = 6) -> nn.Tensor:
    return nn._make(envelope_np(x.data, p), (x,), lambda g: (g * envelope_grad_np(x.data, p),))


def sin_ratio(x: nn.Tensor, freq: nn.Tensor) -> nn.Tensor:
    """``sin(x * freq) / x`` broadcast over ``x[:, None]`` and ``freq[None, :]``.

    The x -> 0 limit (``freq``) is taken from the Taylor series.
    """
    xs = x.data[..., None]
    f = freq.data
    a = xs * f
    small = np.abs(xs) < _SMALL
    safe = np.where(small, 1.0, xs)
    val = np.where(small, f - f**3 * xs**2 / 6, np.sin(a) / safe)
    cos_a = np.cos(a)
    dx = np.where(small, -(f**3) * xs / 3, (f * cos_a * safe - np.sin(a)) / safe**2)
    dfreq = np.where(small, 1.0 - f**2 * xs**2 / 2, cos_a)

    def backward(g):
        return (g * dx).sum(axis=-1), nn._unbroadcast(g * dfreq, f.shape)

    return nn._make(val, (x, freq), backward)


def radial_embed(cfg: BesselConfig, r, freq) -> nn.Tensor:
    """``envelope(r / r_c) / r * sin(r * freq / r_c)`` for each frequency.

    Args:
        r: distances, shape ``(E,)`` (array or Tensor).
        freq: frequencies, shape ``(num_radial,)``.

    Returns:
        Tensor of shape ``(E, num_radial)``.
    """
    r = nn.as_tensor(r)
    freq = nn.as_tensor(freq)
    if np.any(r.data < 0):
        raise NegativeDistance("distances must be non-negative")
    x = r * (1.0 / cfg.cutoff)
    env = envelope(x, cfg.envelope_degree)
    # sin(x f) / r = sin(x f) / x / r_c
    return nn.reshape(env, env.shape + (1,)) * sin_ratio(x, freq) * (1.0 / cfg.cutoff)


def angular_embed(cfg: BesselConfig, u, freq) -> nn.Tensor:
    """Embed each component of unit vectors separately and concatenate.

    Component ``c`` maps to ``sign(c) * envelope(|c|) * sin(|c| freq) / |c|``
    with ``sign(c) = 0`` for ``|c| <= SIGN_ZERO_TOL``. Output layout is ``[x-block, y-block, z-block]``,
    shape ``(E, 3 * num_angular)``.
    """
    u = nn.as_tensor(u)
    freq = nn.as_tensor(freq)
    norms = np.linalg.norm(u.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NotNormalized("angular embedding expects unit vectors")
    sign = np.where(np.abs(u.data) <= SIGN_ZERO_TOL, 0.0, np.sign(u.data))
    mag = nn.abs_(u)
    env = envelope(mag, cfg.envelope_degree)
    theta = nn.reshape(env * sign, env.shape + (1,)) * sin_ratio(mag, freq)
    # (E, 3, A) -> (E, 3A), component-major
    return nn.reshape(theta, (u.shape[0], 3 * freq.shape[0]))
