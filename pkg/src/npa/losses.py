"""Task losses and regularizers, each returning its cotangents.

Everything here is cheap elementwise math, so the forward value and the
adjoints are computed together in plain numpy.
"""

import numpy as np

COLOR_WEIGHT_TAU = 0.25


def loss_morphogenesis(render, target, tau=COLOR_WEIGHT_TAU):
    """l1 + l2 on the rendered density, plus an l1 + l2 color term gated by
    w = exp(-|D - D*| / tau). The gate is a constant during differentiation,
    so early training pushes mass into place before color matters.

    Returns (total, parts, density_bar, color_bar).
    """
    D = np.asarray(render.density, dtype=np.float64)
    C = np.asarray(render.color, dtype=np.float64)
    Dt = np.asarray(target.density, dtype=np.float64)
    Ct = np.asarray(target.color, dtype=np.float64)
    dd = D - Dt
    l_dens = float(np.mean(np.abs(dd)) + np.mean(dd * dd))
    w = np.exp(-np.abs(dd) / tau)
    cd = C - Ct
    gated = w[:, :, None] * (np.abs(cd) + cd * cd)
    l_col = float(np.mean(gated))
    d_bar = (np.sign(dd) + 2.0 * dd) / dd.size
    c_bar = w[:, :, None] * (np.sign(cd) + 2.0 * cd) / cd.size
    parts = {"dens": l_dens, "col": l_col}
    return l_dens + l_col, parts, d_bar, c_bar


def loss_overflow(S):
    """Mean excess of |S| over the unit box. Returns (value, S_bar)."""
    S = np.asarray(S)
    a = np.abs(S.astype(np.float64, copy=False))
    over = np.maximum(a - 1.0, 0.0)
    val = float(np.mean(over))
    s_bar = np.where(a > 1.0, np.sign(S), 0.0) / S.size
    return val, s_bar


def loss_displacement(tape, x_final):
    """Mean applied displacement norm over steps, particles, and batch.
    Returns (value, applied_dx_bars): one cotangent array per step, ready for
    rollout_backward."""
    xs = [rec.x for rec in tape] + [np.asarray(x_final)]
    T = len(tape)
    B, N, _ = xs[0].shape
    denom = float(B * N * T)
    total = 0.0
    bars = []
    for t in range(T):
        a = (xs[t + 1] - xs[t]).astype(np.float64, copy=False)
        n = np.sqrt(np.sum(a * a, axis=-1))
        total += float(np.sum(n))
        safe = np.where(n > 0.0, n, 1.0)
        bars.append(np.where(n[..., None] > 0.0, a / safe[..., None], 0.0) / denom)
    return total / denom, bars


def loss_classification(S, labels, n_logits=10):
    """Per-particle squared error between the last n_logits state channels
    and the one-hot label, averaged over batch, particles, and channels.
    Returns (value, S_bar, predictions); prediction is the argmax of the
    particle-mean logits."""
    S = np.asarray(S)
    B, N, C = S.shape
    logits = S[:, :, C - n_logits:].astype(np.float64, copy=False)
    hot = np.zeros((B, n_logits), dtype=np.float64)
    hot[np.arange(B), np.asarray(labels, dtype=np.int64)] = 1.0
    diff = logits - hot[:, None, :]
    val = float(np.mean(diff * diff))
    s_bar = np.zeros(S.shape, dtype=np.float64)
    s_bar[:, :, C - n_logits:] = 2.0 * diff / diff.size
    preds = np.argmax(logits.mean(axis=1), axis=1)
    return val, s_bar, preds
