"""Dense O(N^2) reference implementations of the particle operators.

These transcribe the defining sums literally, with full pairwise distance
matrices and no neighbor acceleration, and are used as oracles in the tests.
They share only the closed-form kernel functions with the production path;
traversal, accumulation, and adjoint code are entirely disjoint. Single
system per call: x is (N, D), fields are (N, ...), all math in float64.

The sums here are written over r_ji = x_j - x_i (the neighbor-to-center
convention); the production operators use r_ij = x_i - x_j. Both agree
because W is even and the difference/antisymmetric factors flip sign with
the spiky gradient.
"""

import numpy as np

from .kernels import KernelParams, poly6, spiky_grad


def _rel(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :, :] - x[:, None, :]  # R[i, j] = x_j - x_i


def _within(x, eps):
    r = _rel(x)
    d2 = np.einsum("ijd,ijd->ij", r, r)
    return r, d2 < eps * eps


def ref_density(x, mass, eps):
    r, inside = _within(x, eps)
    w = poly6(r, KernelParams(x.shape[1], eps))
    return mass * np.where(inside, w, 0.0).sum(axis=1)


def ref_smooth(x, S, rho, mass, eps):
    r, inside = _within(x, eps)
    w = np.where(inside, poly6(r, KernelParams(x.shape[1], eps)), 0.0)
    coef = w * (mass / np.asarray(rho, dtype=np.float64))[None, :]
    return coef @ np.asarray(S, dtype=np.float64)


def ref_grad0(x, S, rho, mass, eps):
    r, inside = _within(x, eps)
    S64 = np.asarray(S, dtype=np.float64)
    wg = np.where(inside[:, :, None], spiky_grad(r, KernelParams(x.shape[1], eps)), 0.0)
    diff = S64[None, :, :] - S64[:, None, :]  # S_j - S_i
    coef = np.broadcast_to(
        (mass / np.asarray(rho, dtype=np.float64))[None, :], inside.shape)
    return np.einsum("ij,ijc,ijd->icd", coef, diff, wg)


def ref_density_grad(x, mass, eps):
    r, inside = _within(x, eps)
    wg = np.where(inside[:, :, None], spiky_grad(r, KernelParams(x.shape[1], eps)), 0.0)
    return mass * wg.sum(axis=1)


def ref_moment(x, rho, mass, eps):
    r, inside = _within(x, eps)
    wg = np.where(inside[:, :, None], spiky_grad(r, KernelParams(x.shape[1], eps)), 0.0)
    coef = (mass / np.asarray(rho, dtype=np.float64))[None, :] * inside
    return np.einsum("ij,ijd,ije->ide", coef, r, wg)
