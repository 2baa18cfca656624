"""Adam with decoupled weight decay and global-norm gradient clipping.

Moments are kept in float64 regardless of parameter dtype; the update is
computed in float64 and cast back, which keeps long runs deterministic and
insensitive to the training precision choice.
"""

import numpy as np

from .errors import InputError


class AdamState:
    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
                 eps=1e-8, grad_clip_norm=1.0):
        if lr <= 0:
            raise InputError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.grad_clip_norm = float(grad_clip_norm)
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}

    def save(self, path, extra=None):
        """extra: optional dict of scalars stored alongside (e.g. the
        training iteration counter, so resumed runs keep numbering)."""
        arrs = {"t": np.int64(self.t), "lr": np.float64(self.lr)}
        for k in self.m:
            arrs[f"m_{k}"] = self.m[k]
            arrs[f"v_{k}"] = self.v[k]
        for k, v in (extra or {}).items():
            arrs[f"x_{k}"] = np.asarray(v)
        np.savez(path, **arrs)

    def load(self, path):
        """Restore state in place; returns the extra-scalars dict."""
        with np.load(path) as z:
            self.t = int(z["t"])
            self.lr = float(z["lr"])
            for k in self.m:
                self.m[k] = z[f"m_{k}"]
                self.v[k] = z[f"v_{k}"]
            return {k[2:]: z[k].item() for k in z.files if k.startswith("x_")}


def global_norm(grads):
    s = 0.0
    for g in grads.values():
        g64 = g.astype(np.float64, copy=False)
        s += float(np.sum(g64 * g64))
    return np.sqrt(s)


def adam_step(params, grads, state):
    """One clipped AdamW step. Mutates params in place and returns True, or
    leaves everything untouched and returns False when any gradient is
    non-finite (the caller decides how to react)."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        return False
    scale = 1.0 if norm <= state.grad_clip_norm else state.grad_clip_norm / norm
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k].astype(np.float64, copy=False) * scale
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            upd = upd + state.weight_decay * p.astype(np.float64, copy=False)
        p -= (state.lr * upd).astype(p.dtype, copy=False)
    return True
