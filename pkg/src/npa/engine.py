"""The particle automaton: perception, shared update network, stepping.

Each step perceives a per-particle feature vector

    Z_i = [S_i, st_i, grad S_i (corrected), grad rho_i]

through the SPH operators, pushes it through a two-layer MLP shared by all
particles, and applies the predicted increment under a per-particle Bernoulli
mask. Static automata update states only; dynamic ones also move, with the
predicted displacement scaled by the support radius so it carries units of
length.

Running at a support radius eps_run different from the training radius eps0
rescales the gradient features by (eps_run/eps0) for grad S and
(eps_run/eps0)^(D+1) for grad rho before the log compression, so a trained
rule sees scale-consistent inputs; displacements scale with eps_run. Under
(x, eps) -> (c x, c eps) the trajectory is reproduced up to a factor c in
positions.

Training gradients flow through the state chain only: position adjoints
inside perception are cut (the update rule treats x as data), which is what
keeps backpropagation through time stable at useful learning rates. The
rollout tape stores (x, S, rho, mask) per step; everything else is
recomputed in the backward sweep.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import FormatError, InputError, NumericError
from .grid import build_grid

CHECKPOINT_MAGIC = b"NPA1"
CHECKPOINT_VERSION = 1


@dataclass
class ParticleSystem:
    x: np.ndarray        # (B, N, D)
    S: np.ndarray        # (B, N, C)
    mass: float
    eps_train: float

    def __post_init__(self):
        if self.x.ndim != 3 or self.S.ndim != 3 or self.x.shape[:2] != self.S.shape[:2]:
            raise InputError(
                f"positions {self.x.shape} and states {self.S.shape} must be "
                f"(B, N, D) and (B, N, C)")
        if self.x.shape[2] not in (2, 3):
            raise InputError(f"D must be 2 or 3, got {self.x.shape[2]}")

    @property
    def B(self):
        return self.x.shape[0]

    @property
    def N(self):
        return self.x.shape[1]

    @property
    def D(self):
        return self.x.shape[2]

    @property
    def C(self):
        return self.S.shape[2]

    def copy(self):
        return ParticleSystem(self.x.copy(), self.S.copy(), self.mass, self.eps_train)


def perception_width(C, D):
    return 2 * C + C * D + D


class AdaptationNet:
    """Shared two-layer update network: Y = W2 relu(W1 Z + b1).

    Output layout: static nets emit the C state increments; dynamic nets emit
    [dx (D), dS (C)]. W2 starts at zero so an untrained automaton is the
    identity map.
    """

    def __init__(self, W1, b1, W2, C, D, dynamic):
        self.W1 = W1
        self.b1 = b1
        self.W2 = W2
        self.C = C
        self.D = D
        self.dynamic = bool(dynamic)
        Zw = perception_width(C, D)
        O = D + C if dynamic else C
        if W1.shape != (self.H, Zw) or b1.shape != (self.H,) or W2.shape != (O, self.H):
            raise InputError(
                f"weight shapes {W1.shape}/{b1.shape}/{W2.shape} inconsistent "
                f"with C={C}, D={D}, dynamic={dynamic}")

    @property
    def H(self):
        return self.W1.shape[0]

    @property
    def O(self):
        return self.W2.shape[0]

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2}

    def set_params(self, p):
        self.W1, self.b1, self.W2 = p["W1"], p["b1"], p["W2"]

    def forward(self, Z):
        A = np.maximum(Z @ self.W1.T + self.b1, 0.0)
        return A @ self.W2.T

    def backward(self, Z, Y_bar):
        """Adjoint of forward at input Z. Returns (Z_bar, grads dict);
        weight gradients are summed over batch and particles."""
        B, N, Zw = Z.shape
        Zf = Z.reshape(B * N, Zw)
        Yf = Y_bar.reshape(B * N, self.O)
        A = Zf @ self.W1.T + self.b1
        R = np.maximum(A, 0.0)
        gW2 = Yf.T @ R
        dA = (Yf @ self.W2) * (A > 0.0)
        gW1 = dA.T @ Zf
        gb1 = dA.sum(axis=0)
        Z_bar = (dA @ self.W1).reshape(B, N, Zw)
        return Z_bar, {"W1": gW1, "b1": gb1, "W2": gW2}


def init_adaptation_net(rng, C, D, H, dynamic, dtype=np.float32):
    Zw = perception_width(C, D)
    O = D + C if dynamic else C
    bound = np.sqrt(1.0 / Zw)
    W1 = rng.uniform(-bound, bound, (H, Zw)).astype(dtype)
    b1 = np.zeros(H, dtype=dtype)
    W2 = np.zeros((O, H), dtype=dtype)
    return AdaptationNet(W1, b1, W2, C, D, dynamic)


@dataclass
class StepConfig:
    p: float = 0.5
    eps_run: float | None = None   # None: use the training radius
    dynamic: bool = False
    dx_scale: float = 1.0
    strategy: str = "particle"
    hashing: str = "row_major"
    canonical: bool = True
    backend: str | None = None
    cache_tape: bool = False       # keep perception products on the tape

    def __post_init__(self):
        if not (0.0 < self.p <= 1.0):
            raise InputError(f"update probability must be in (0, 1], got {self.p}")
        if self.eps_run is not None and not (self.eps_run > 0):
            raise InputError(f"eps_run must be positive, got {self.eps_run}")

    def eps_train_radius(self, eps_train):
        return float(eps_train if self.eps_run is None else self.eps_run)

    def exec_kw(self):
        return dict(strategy=self.strategy, canonical=self.canonical,
                    backend=self.backend)


@dataclass
class StepRecord:
    x: np.ndarray      # (B, N, D) positions entering the step
    S: np.ndarray      # (B, N, C) states entering the step
    rho: np.ndarray    # (B, N) density at those positions
    mask: np.ndarray   # (B, N) bool, True where the update applied
    # populated when cache_tape is set: the backward sweep then skips the
    # perception recompute (identical values either way, more tape memory)
    Z: np.ndarray | None = None
    g1s: np.ndarray | None = None
    grs: np.ndarray | None = None


def _perceive(grid, S, mass, eps_train, exec_kw):
    """Assemble Z from the perception buffers with inference rescaling and
    log compression of the vector groups. Returns (Z, rho, g1s, grs) where
    g1s/grs are the rescaled vectors entering log_scale (the backward pass
    needs them as linearization points)."""
    p = ops.perception(grid, S, mass, **exec_kw)
    B, N, C = S.shape
    D = grid.dim
    cs = grid.eps / float(eps_train)
    g1s = p.grad1 * S.dtype.type(cs)
    grs = p.grad_rho * S.dtype.type(cs ** (D + 1))
    Z = np.concatenate([S, p.s_tilde,
                        ops.log_scale(g1s).reshape(B, N, C * D),
                        ops.log_scale(grs)], axis=-1)
    return Z, p.rho, g1s, grs


def perceive(sys, cfg):
    """One perception pass at cfg's support radius; returns Z of width
    2C + C*D + D in the dtype of the states."""
    eps = cfg.eps_train_radius(sys.eps_train)
    grid = build_grid(sys.x, eps, hashing_mode=cfg.hashing)
    Z, _, _, _ = _perceive(grid, sys.S, sys.mass, sys.eps_train, cfg.exec_kw())
    return Z


def _perceive_s_bar(grid, S, rho, mass, eps_train, Z_bar, g1s, grs, exec_kw):
    """State adjoint of _perceive. The density-gradient block and every
    position/density path are dropped: positions are data here."""
    B, N, C = S.shape
    D = grid.dim
    cs = grid.eps / float(eps_train)
    st_bar = Z_bar[..., C:2 * C]
    g1s_bar = ops.log_scale_bwd(g1s, Z_bar[..., 2 * C:2 * C + C * D].reshape(B, N, C, D))
    # chain through the rescale, then straight-through to the uncorrected gradient
    g0_bar = g1s_bar * float(cs)
    del grs  # its block feeds no state path
    s_direct = Z_bar[..., :C]
    return s_direct + ops.perception_s_bar(
        grid, S, rho, mass, st_bar, ops.corrected_gradient_bwd(g0_bar), **exec_kw)


def _check_finite_update(Y):
    if np.isfinite(Y).all():
        return
    b, i, c = np.argwhere(~np.isfinite(Y))[0]
    raise NumericError(
        f"non-finite update at batch {b}, particle {i}, output channel {c}")


def step(sys, net, cfg, rng, mask=None):
    """One automaton step. Returns (new system, StepRecord). The record holds
    the inputs to the step plus the drawn mask, which is what the backward
    sweep needs. Raises NumericError (with the offending particle and output
    channel) if the network emits a non-finite increment."""
    eps = cfg.eps_train_radius(sys.eps_train)
    grid = build_grid(sys.x, eps, hashing_mode=cfg.hashing)
    Z, rho, g1s, grs = _perceive(grid, sys.S, sys.mass, sys.eps_train,
                                 cfg.exec_kw())
    Y = net.forward(Z)
    _check_finite_update(Y)
    if mask is None:
        mask = rng.random((sys.B, sys.N)) < cfg.p
    m = mask[..., None]
    if cfg.dynamic:
        if not net.dynamic:
            raise InputError("dynamic step requires a dynamic net")
        dx = Y[..., :sys.D]
        dS = Y[..., sys.D:]
        scale = sys.x.dtype.type(cfg.dx_scale * eps)
        x_new = sys.x + np.where(m, dx * scale, sys.x.dtype.type(0.0))
    else:
        dS = Y[..., -sys.C:]
        x_new = sys.x
    S_new = sys.S + np.where(m, dS, sys.S.dtype.type(0.0))
    if cfg.cache_tape:
        rec = StepRecord(sys.x, sys.S, rho, mask, Z, g1s, grs)
    else:
        rec = StepRecord(sys.x, sys.S, rho, mask)
    return ParticleSystem(x_new, S_new, sys.mass, sys.eps_train), rec


def rollout(sys, net, cfg, T, rng):
    """T sequential steps with the grid rebuilt each step. Returns the final
    system and the tape (list of T StepRecords). Step failures are re-raised
    with the step index attached."""
    if T < 1:
        raise InputError(f"rollout needs T >= 1, got {T}")
    tape = []
    for t in range(T):
        try:
            sys, rec = step(sys, net, cfg, rng)
        except NumericError as e:
            raise NumericError(f"step {t}: {e}") from e
        tape.append(rec)
    return sys, tape


def rollout_backward(tape, net, cfg, eps_train, mass, s_bar_final,
                     x_bar_final=None, applied_dx_bars=None):
    """Backpropagation through the taped rollout.

    s_bar_final: (B, N, C) cotangent of the final states. x_bar_final:
    optional (B, N, D) cotangent of the final positions (dynamic runs); it
    reaches each step's displacement output directly, and nothing else,
    because perception cuts position adjoints. applied_dx_bars: optional list
    of per-step cotangents of the applied displacement x_{t+1} - x_t (how
    displacement regularizers enter). Returns (weight grads, s_bar at t=0).
    """
    grads = {k: np.zeros_like(v) for k, v in net.params().items()}
    s_bar = np.asarray(s_bar_final)
    eps = cfg.eps_train_radius(eps_train)
    for t in range(len(tape) - 1, -1, -1):
        rec = tape[t]
        B, N, C = rec.S.shape
        D = rec.x.shape[2]
        grid = build_grid(rec.x, eps, hashing_mode=cfg.hashing)
        if rec.Z is not None:
            Z, g1s, grs = rec.Z, rec.g1s, rec.grs
        else:
            Z, _, g1s, grs = _perceive(grid, rec.S, mass, eps_train,
                                       cfg.exec_kw())
        m = rec.mask[..., None]
        Y_bar = np.zeros((B, N, net.O), dtype=s_bar.dtype)
        if cfg.dynamic:
            Y_bar[..., D:] = np.where(m, s_bar, 0.0)
            a_bar = np.zeros((B, N, D), dtype=s_bar.dtype)
            if x_bar_final is not None:
                a_bar += x_bar_final
            if applied_dx_bars is not None and applied_dx_bars[t] is not None:
                a_bar += applied_dx_bars[t]
            Y_bar[..., :D] = np.where(m, a_bar * (cfg.dx_scale * eps), 0.0)
        else:
            Y_bar[..., -C:] = np.where(m, s_bar, 0.0)
        Z_bar, g = net.backward(Z, Y_bar)
        for k in grads:
            grads[k] += g[k].astype(grads[k].dtype, copy=False)
        s_bar = s_bar + _perceive_s_bar(grid, rec.S, rec.rho, mass, eps_train,
                                        Z_bar, g1s, grs, cfg.exec_kw())
    return grads, s_bar


def save_checkpoint(path, net, eps_train):
    """Little-endian layout: magic "NPA1"; u32 version, D, C, H, O, dynamic;
    f32 eps_train; then W1, b1, W2 flat row-major f32."""
    header = CHECKPOINT_MAGIC + struct.pack(
        "<6If", CHECKPOINT_VERSION, net.D, net.C, net.H, net.O,
        int(net.dynamic), float(eps_train))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(net.W1, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(net.b1, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(net.W2, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r} in {path}")
    if len(raw) < 4 + 28:
        raise FormatError(f"truncated checkpoint header in {path}")
    version, D, C, H, O, dynamic, eps_train = struct.unpack("<6If", raw[4:32])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    Zw = perception_width(C, D)
    expect_o = D + C if dynamic else C
    if O != expect_o:
        raise FormatError(f"output width {O} inconsistent with C={C}, D={D}, "
                          f"dynamic={bool(dynamic)}")
    need = H * Zw + H + O * H
    body = np.frombuffer(raw, dtype="<f4", offset=32)
    if body.size != need:
        raise FormatError(
            f"checkpoint payload has {body.size} floats, expected {need}")
    W1 = body[:H * Zw].reshape(H, Zw).astype(dtype)
    b1 = body[H * Zw:H * Zw + H].astype(dtype)
    W2 = body[H * Zw + H:].reshape(O, H).astype(dtype)
    return AdaptationNet(W1, b1, W2, C, D, bool(dynamic)), float(eps_train)
