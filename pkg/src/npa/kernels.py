"""SPH smoothing kernels in 2D and 3D.

Two compactly supported kernels over the ball of radius eps:

    poly6:       W(r)  = Z * (eps^2 - |r|^2)^3          for |r| <= eps
    spiky grad:  dW(r) = Zg * (eps - |r|)^2 * r / |r|   for 0 < |r| <= eps

with normalization constants

    2D: Z = 4 / (pi eps^8),        Zg = 10 / (pi eps^5)
    3D: Z = 315 / (64 pi eps^9),   Zg = 15 / (pi eps^6)

poly6 integrates to 1 over its support and is used for scalar weighting;
the spiky gradient stays non-degenerate as |r| -> 0 and is used wherever a
spatial derivative is needed. All functions are total: outside the support
(and at the r=0 singularity of direction-dependent terms) they return exact
zeros. Math is done in float64 regardless of input dtype.
"""

import math

import numpy as np

# Separations below this are treated as coincident points: every
# direction-dependent quantity is zeroed there.
R_GUARD = 1e-12


class KernelParams:
    """Dimension, support radius, and the normalization constants they fix."""

    def __init__(self, dim, eps):
        if dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim}")
        eps = float(eps)
        if not (eps > 0.0):
            raise ValueError(f"eps must be positive, got {eps}")
        self.dim = int(dim)
        self.eps = eps
        if dim == 2:
            self.z = 4.0 / (math.pi * eps**8)
            self.zg = 10.0 / (math.pi * eps**5)
        else:
            self.z = 315.0 / (64.0 * math.pi * eps**9)
            self.zg = 15.0 / (math.pi * eps**6)

    def __repr__(self):
        return f"KernelParams(dim={self.dim}, eps={self.eps})"


def _check_r(r, k):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != k.dim:
        raise ValueError(f"offset has {r.shape[-1]} components, expected {k.dim}")
    return r


def poly6(r, k):
    """Poly6 weight of offset(s) r, shape (..., D) -> (...)."""
    r = _check_r(r, k)
    d2 = np.einsum("...i,...i->...", r, r)
    t = k.eps * k.eps - d2
    w = k.z * t * t * t
    return np.where(t >= 0.0, w, 0.0)


def poly6_grad(r, k):
    """Gradient of poly6 with respect to r: -6 Z (eps^2 - |r|^2)^2 r inside the support."""
    r = _check_r(r, k)
    d2 = np.einsum("...i,...i->...", r, r)
    t = k.eps * k.eps - d2
    coef = -6.0 * k.z * t * t
    coef = np.where((t > 0.0) & (d2 > R_GUARD * R_GUARD), coef, 0.0)
    return coef[..., None] * r


def spiky_grad(r, k):
    """Spiky kernel gradient Zg (eps - |r|)^2 r/|r|; zero at r=0 and outside the support."""
    r = _check_r(r, k)
    d = np.sqrt(np.einsum("...i,...i->...", r, r))
    inside = (d > R_GUARD) & (d <= k.eps)
    dd = np.where(inside, d, 1.0)
    u = k.eps - d
    coef = np.where(inside, k.zg * u * u / dd, 0.0)
    return coef[..., None] * r


def spiky_jacobian(r, k):
    """Jacobian of spiky_grad with respect to r, shape (..., D) -> (..., D, D).

    For 0 < d < eps, writing f(d) = (eps - d)^2 / d,

        J(r) = Zg * ( f(d) I + (f'(d)/d) r r^T )
             = Zg * ( ((eps-d)^2/d) I - ((eps^2-d^2)/d^3) r r^T )

    Symmetric and even in r. Exact zero matrix outside (0, eps); callers rely
    on that when fusing neighbor loops.
    """
    r = _check_r(r, k)
    d2 = np.einsum("...i,...i->...", r, r)
    d = np.sqrt(d2)
    inside = (d > R_GUARD) & (d < k.eps)
    dd = np.where(inside, d, 1.0)
    u = k.eps - d
    a = np.where(inside, k.zg * u * u / dd, 0.0)
    b = np.where(inside, k.zg * (k.eps * k.eps - d2) / (dd * dd * dd), 0.0)
    eye = np.eye(k.dim, dtype=np.float64)
    return a[..., None, None] * eye - b[..., None, None] * (
        r[..., :, None] * r[..., None, :]
    )
