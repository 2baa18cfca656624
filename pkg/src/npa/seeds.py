"""Seed configurations: where particles start and with what state.

Particle masses are normalized so the total mass is 1 (mass = 1/N), which
keeps densities comparable across particle counts.
"""

import numpy as np

from .engine import ParticleSystem
from .errors import InputError


def seed_egg(rng, n, channels, d=2, radius=0.2, eps=0.1, dtype=np.float32):
    """N particles uniform in a ball around the origin, zero state."""
    if n < 1 or channels < 1:
        raise InputError(f"need n >= 1 and channels >= 1, got {n}, {channels}")
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    x = (u * r[:, None])[None].astype(dtype)
    S = np.zeros((1, n, channels), dtype=dtype)
    return ParticleSystem(x, S, 1.0 / n, eps)


def seed_square(rng, n, channels, side=2.0, eps=0.2, dtype=np.float32):
    """N particles uniform in an origin-centered square, zero state."""
    if n < 1 or channels < 1:
        raise InputError(f"need n >= 1 and channels >= 1, got {n}, {channels}")
    x = rng.uniform(-0.5 * side, 0.5 * side, (1, n, 2)).astype(dtype)
    S = np.zeros((1, n, channels), dtype=dtype)
    return ParticleSystem(x, S, 1.0 / n, eps)


def seed_points(points, channels, eps=0.1, dtype=np.float32):
    """Particles at prescribed positions (e.g. a sampled digit), zero state."""
    x = np.asarray(points, dtype=dtype)
    if x.ndim != 2:
        raise InputError(f"points must be (N, D), got {x.shape}")
    n = x.shape[0]
    S = np.zeros((1, n, channels), dtype=dtype)
    return ParticleSystem(x[None].copy(), S, 1.0 / n, eps)
