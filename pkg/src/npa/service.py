"""Interactive simulation host.

A session owns one particle system plus one update rule per species. A
single ticker advances the automaton and publishes compact binary frames;
websocket handlers never touch simulation state directly, they parse
steering commands into a bounded mailbox and copy published frames out to
their clients. protocol.md at the repository root documents the wire
format byte by byte.

Determinism: with an empty mailbox the served trajectory reproduces the
headless `run` command bit for bit, because both derive their seed and
update-mask generators the same way from the configured seed and step with
the same configuration.
"""

import asyncio
import json
import os
import struct
import time
from collections import deque

import numpy as np

from .engine import ParticleSystem, StepConfig, load_checkpoint, step
from .errors import FormatError, InputError, NumericError
from .seeds import seed_egg, seed_square

MAGIC = b"NPAF"
VERSION = 1

FLAG_FLOAT32 = 1   # positions are float32, not quantized u16
FLAG_PAUSED = 2
FLAG_ERROR = 4     # a numeric fault stopped the automaton
FLAG_STATES = 8    # debug: raw float32 states appended after the tick time

HEADER = struct.Struct("<4sBBHII")   # magic, version, flags, reserved, frame, n
TICK_TAIL = struct.Struct("<f")      # tick wall time, milliseconds

BRUSH_KINDS = ("brush_zero", "brush_push", "brush_pull")
COMMAND_KINDS = BRUSH_KINDS + ("set_param", "reset", "load_model",
                               "pause", "resume")
PARAM_RANGES = {
    "eps": (1e-4, 10.0),
    "p": (1e-6, 1.0),
    "steps_per_frame": (0, 64),
    "splat_radius": (0.1, 64.0),
}
SEED_KINDS = ("egg", "square")
ASSIGN_MODES = ("interleave", "partition")
MAILBOX_LIMIT = 256
MAX_MODELS = 255   # species ids travel as one byte


class Mailbox:
    """Bounded command queue between network handlers and the ticker.

    When full, the oldest brush command is evicted to make room; parameter,
    reset, and model commands are never dropped, so for those the bound is
    soft. An incoming brush that finds no evictable brush is discarded.
    """

    def __init__(self, limit=MAILBOX_LIMIT):
        if limit < 1:
            raise InputError(f"mailbox limit must be positive, got {limit}")
        self.limit = limit
        self.q = deque()
        self.dropped = 0

    def put(self, cmd):
        if len(self.q) >= self.limit:
            for i, c in enumerate(self.q):
                if c["kind"] in BRUSH_KINDS:
                    del self.q[i]
                    self.dropped += 1
                    break
            else:
                if cmd["kind"] in BRUSH_KINDS:
                    self.dropped += 1
                    return
        self.q.append(cmd)

    def drain(self):
        out = list(self.q)
        self.q.clear()
        return out


def _num(cmd, key, kind):
    v = cmd.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool) \
            or not np.isfinite(v):
        raise InputError(f"{kind} needs a finite number {key!r}")
    return float(v)


def _vec(cmd, key, d, kind):
    v = cmd.get(key)
    if not isinstance(v, (list, tuple)) or len(v) != d \
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool)
                       and np.isfinite(c) for c in v):
        raise InputError(f"{kind} needs {key!r} as {d} finite numbers")
    return [float(c) for c in v]


def parse_command(text, d=2):
    """Decode and validate one client message into a normalized command
    dict. Raises InputError on anything malformed; the caller reports the
    failure to the offending client only and the mailbox stays untouched."""
    try:
        cmd = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise InputError("command is not valid JSON")
    if not isinstance(cmd, dict):
        raise InputError("command must be a JSON object")
    kind = cmd.get("kind")
    if kind not in COMMAND_KINDS:
        raise InputError(f"unknown command kind {kind!r}")
    out = {"kind": kind}
    if kind in BRUSH_KINDS:
        out["center"] = _vec(cmd, "center", d, kind)
        out["radius"] = _num(cmd, "radius", kind)
        if out["radius"] <= 0:
            raise InputError(f"{kind} radius must be positive")
        if kind != "brush_zero":
            out["strength"] = _num(cmd, "strength", kind)
        if kind == "brush_push":
            out["direction"] = _vec(cmd, "direction", d, kind)
    elif kind == "set_param":
        name = cmd.get("name")
        if name not in PARAM_RANGES:
            raise InputError(f"unknown parameter {name!r}")
        lo, hi = PARAM_RANGES[name]
        value = _num(cmd, "value", kind)
        if not (lo <= value <= hi):
            raise InputError(f"{name} must be in [{lo}, {hi}], got {value}")
        if name == "steps_per_frame":
            if value != int(value):
                raise InputError("steps_per_frame must be an integer")
            value = int(value)
        out["name"], out["value"] = name, value
    elif kind == "reset":
        out["seed_kind"] = cmd.get("seed_kind", "egg")
        if out["seed_kind"] not in SEED_KINDS:
            raise InputError(f"unknown seed kind {out['seed_kind']!r}")
        out["assign"] = cmd.get("assign", "interleave")
        if out["assign"] not in ASSIGN_MODES:
            raise InputError(f"unknown species assignment {out['assign']!r}")
        if "seed" in cmd:
            seed = cmd["seed"]
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise InputError("reset seed must be a non-negative integer")
            out["seed"] = seed
    elif kind == "load_model":
        path = cmd.get("path")
        if not isinstance(path, str) or not path:
            raise InputError("load_model needs a checkpoint path")
        out["path"] = path
    return out


def apply_brush(sysb, cmd):
    """Steering brushes on a particle system.

    zero clears the states of every particle within the radius; push
    displaces particles along a stroke direction; pull attracts them toward
    a point, with zero displacement for a particle sitting exactly at the
    center. Displacements scale by the falloff max(0, 1 - (d/radius)^2), so
    particles outside the radius are untouched and the displacement
    magnitude never exceeds strength times the direction length.
    """
    x, S = sysb.x, sysb.S
    dt = x.dtype
    center = np.asarray(cmd["center"], dtype=dt)
    delta = x - center
    d = np.linalg.norm(delta, axis=-1)
    kind = cmd["kind"]
    if kind == "brush_zero":
        keep = (d >= cmd["radius"])[..., None]
        return ParticleSystem(x, np.where(keep, S, dt.type(0.0)),
                              sysb.mass, sysb.eps_train)
    f = np.maximum(0.0, 1.0 - (d / cmd["radius"]) ** 2)[..., None].astype(dt)
    s = dt.type(cmd["strength"])
    if kind == "brush_push":
        direction = np.asarray(cmd["direction"], dtype=dt)
        return ParticleSystem(x + s * direction * f, S,
                              sysb.mass, sysb.eps_train)
    if kind == "brush_pull":
        dn = d[..., None].astype(dt)
        safe = np.where(dn > 0, dn, dt.type(1.0))
        unit = np.where(dn > 0, -delta / safe, dt.type(0.0))
        return ParticleSystem(x + s * unit * f, S,
                              sysb.mass, sysb.eps_train)
    raise InputError(f"not a brush command: {kind!r}")


def assign_species(x, n_models, mode):
    """Species ids for (N, D) positions. interleave alternates ids by
    particle index; partition splits space into equal-count slabs along the
    first coordinate so each model owns a contiguous region."""
    n = x.shape[0]
    if n_models == 1:
        return np.zeros(n, np.uint8)
    if mode == "interleave":
        return (np.arange(n) % n_models).astype(np.uint8)
    if mode == "partition":
        order = np.argsort(x[:, 0], kind="stable")
        ids = np.empty(n, np.uint8)
        ids[order] = ((np.arange(n) * n_models) // n).astype(np.uint8)
        return ids
    raise InputError(f"unknown species assignment {mode!r}")


class Session:
    """Mutable server state: the particle system, per-particle species ids,
    runtime step parameters, and the command mailbox. Exactly one ticker
    mutates it; handlers only enqueue commands and read published frames."""

    def __init__(self, cfg, nets, eps_models, model_paths, steps_per_frame=1,
                 window_side=4.0, float_positions=False, debug=False,
                 mailbox_limit=MAILBOX_LIMIT):
        if not nets:
            raise InputError("a session needs at least one model")
        if len(nets) > MAX_MODELS:
            raise InputError(f"at most {MAX_MODELS} models, got {len(nets)}")
        base = nets[0]
        for p, net in zip(model_paths[1:], nets[1:]):
            if net.C != base.C or net.D != base.D:
                raise InputError(
                    f"model {p} has C={net.C} D={net.D}; all species must "
                    f"share the state layout C={base.C} D={base.D}")
        if base.C < 3:
            raise InputError("serving needs at least 3 state channels "
                             "for color")
        if steps_per_frame < 0:
            raise InputError("steps_per_frame must be >= 0")
        if window_side <= 0:
            raise InputError("window side must be positive")
        self.cfg = cfg
        self.nets = list(nets)
        self.eps_models = [float(e) for e in eps_models]
        self.model_paths = list(model_paths)
        self.eps = self.eps_models[0]
        self.p = cfg.p
        self.steps_per_frame = int(steps_per_frame)
        self.splat_radius = 2.0
        self.paused = False
        self.error = None
        self.frame_index = 0
        self.seed = cfg.seed
        self.window_side = float(window_side)
        self.window_lo = np.full(base.D, -0.5 * window_side, np.float32)
        self.float_positions = bool(float_positions)
        self.debug = bool(debug)
        self.mailbox = Mailbox(mailbox_limit)
        self.dropped_frames = 0
        self.sysb = None
        self.species = None
        self.loop = None
        reset(self)


def reset(session, seed_kind="egg", assign="interleave", seed=None):
    """Reseed particles and the species assignment; clears any numeric
    fault and resumes. The generator pair matches the headless run command
    (one stream for the seed geometry, one for the step loop), so a freshly
    reset session with an untouched mailbox replays that trajectory."""
    cfg = session.cfg
    if seed is not None:
        session.seed = int(seed)
    rng = np.random.default_rng([session.seed, 1])
    net = session.nets[0]
    if seed_kind == "egg":
        sysb = seed_egg(rng, cfg.n, net.C, d=net.D, radius=cfg.seed_radius,
                        eps=session.eps_models[0], dtype=cfg.dtype)
    elif seed_kind == "square":
        sysb = seed_square(rng, cfg.n, net.C, eps=session.eps_models[0],
                           dtype=cfg.dtype)
    else:
        raise InputError(f"unknown seed kind {seed_kind!r}")
    session.sysb = sysb
    session.species = assign_species(sysb.x[0], len(session.nets), assign)
    session.loop = np.random.default_rng([session.seed, 2])
    session.paused = False
    session.error = None


def _step_config(session, net):
    cfg = session.cfg
    return StepConfig(p=session.p, eps_run=session.eps, dynamic=net.dynamic,
                      dx_scale=cfg.dx_scale, strategy=cfg.strategy,
                      hashing=cfg.hashing)


def advance(session):
    """One automaton step over all species. Perception always sees the full
    particle set; each model only writes to its own particles. The update
    mask is drawn once per step for everyone, so composing identical models
    is bitwise identical to running a single one."""
    sysb = session.sysb
    u = session.loop.random((sysb.B, sysb.N))
    if len(session.nets) == 1:
        net = session.nets[0]
        session.sysb, _ = step(sysb, net, _step_config(session, net), None,
                               mask=u < session.p)
        return
    x_new = sysb.x.copy()
    S_new = sysb.S.copy()
    for k, net in enumerate(session.nets):
        m = (u < session.p) & (session.species == k)[None, :]
        per = ParticleSystem(sysb.x, sysb.S, sysb.mass, session.eps_models[k])
        out, _ = step(per, net, _step_config(session, net), None, mask=m)
        mm = m[..., None]
        x_new = np.where(mm, out.x, x_new)
        S_new = np.where(mm, out.S, S_new)
    session.sysb = ParticleSystem(x_new, S_new, sysb.mass, sysb.eps_train)


def apply_command(session, cmd):
    """Apply one drained command. Returns True when the descriptor must be
    re-broadcast (parameters, pause state, or session geometry changed)."""
    kind = cmd["kind"]
    if kind in BRUSH_KINDS:
        session.sysb = apply_brush(session.sysb, cmd)
        return False
    if kind == "set_param":
        name, value = cmd["name"], cmd["value"]
        if name == "eps":
            session.eps = float(value)
        elif name == "p":
            session.p = float(value)
        elif name == "steps_per_frame":
            session.steps_per_frame = int(value)
        else:
            session.splat_radius = float(value)
        return True
    if kind == "pause":
        session.paused = True
        return True
    if kind == "resume":
        session.paused = False
        session.error = None
        return True
    if kind == "reset":
        reset(session, cmd.get("seed_kind", "egg"),
              cmd.get("assign", "interleave"), cmd.get("seed"))
        return True
    if kind == "load_model":
        if len(session.nets) >= MAX_MODELS:
            raise InputError("model limit reached")
        net, eps_train = load_checkpoint(cmd["path"], dtype=session.cfg.dtype)
        base = session.nets[0]
        if net.C != base.C or net.D != base.D:
            raise InputError(
                f"model {cmd['path']} has C={net.C} D={net.D}; species must "
                f"share the state layout C={base.C} D={base.D}")
        session.nets.append(net)
        session.eps_models.append(float(eps_train))
        session.model_paths.append(cmd["path"])
        return True
    raise InputError(f"unhandled command {kind!r}")


def encode_frame(session, tick_ms=0.0):
    """Binary frame: 16-byte header, then positions, colors, species ids,
    and the tick wall time. Positions quantize to u16 over the published
    window unless the session asked for float frames; colors are the last
    three state channels clipped to [0, 1]. In debug mode the raw float32
    state array is appended."""
    sysb = session.sysb
    x = sysb.x[0]
    n = x.shape[0]
    flags = 0
    if session.float_positions:
        flags |= FLAG_FLOAT32
    if session.paused:
        flags |= FLAG_PAUSED
    if session.error is not None:
        flags |= FLAG_ERROR
    if session.debug:
        flags |= FLAG_STATES
    parts = [HEADER.pack(MAGIC, VERSION, flags, 0, session.frame_index, n)]
    if session.float_positions:
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    else:
        q = (x - session.window_lo) / session.window_side * 65535.0
        parts.append(np.clip(np.rint(q), 0, 65535).astype("<u2").tobytes())
    col = np.clip(sysb.S[0, :, -3:], 0.0, 1.0)
    parts.append(np.rint(col * 255.0).astype(np.uint8).tobytes())
    parts.append(np.ascontiguousarray(session.species, dtype=np.uint8)
                 .tobytes())
    parts.append(TICK_TAIL.pack(tick_ms))
    if session.debug:
        parts.append(np.ascontiguousarray(sysb.S[0], dtype="<f4").tobytes())
    return b"".join(parts)


def descriptor(session):
    """Session descriptor sent to late joiners and after any descriptor
    changing command. The frame field is the index the next published frame
    will carry."""
    return {
        "type": "descriptor",
        "version": VERSION,
        "d": int(session.sysb.D),
        "n": int(session.sysb.N),
        "c": int(session.sysb.C),
        "window": {"lo": [float(v) for v in session.window_lo],
                   "side": session.window_side},
        "models": [os.path.basename(p) for p in session.model_paths],
        "species_counts": np.bincount(
            session.species, minlength=len(session.nets)).tolist(),
        "params": {"eps": session.eps, "p": session.p,
                   "steps_per_frame": session.steps_per_frame,
                   "splat_radius": session.splat_radius},
        "paused": session.paused,
        "error": session.error,
        "frame": session.frame_index,
        "dropped_frames": session.dropped_frames,
        "dropped_commands": session.mailbox.dropped,
        "float_positions": session.float_positions,
        "seed": session.seed,
    }


def tick(session):
    """One service cycle: drain the mailbox in arrival order, run
    steps_per_frame automaton steps, encode a frame. A numeric fault pauses
    the session instead of propagating, and the frame carries the error
    flag. Returns (frame bytes, descriptor changed, command errors)."""
    t0 = time.perf_counter()
    changed = False
    errors = []
    for cmd in session.mailbox.drain():
        try:
            changed |= bool(apply_command(session, cmd))
        except (InputError, FormatError, OSError) as e:
            errors.append(f"{cmd['kind']}: {e}")
    if not session.paused:
        try:
            for _ in range(session.steps_per_frame):
                advance(session)
        except NumericError as e:
            session.paused = True
            session.error = str(e)
            changed = True
    frame = encode_frame(session, (time.perf_counter() - t0) * 1e3)
    session.frame_index += 1
    return frame, changed, errors


def build_session(cfg, checkpoints, **kw):
    """Load one model per checkpoint path and assemble a session. All
    models must agree on the state layout; the first one sets the support
    radius and the seed geometry."""
    if not checkpoints:
        raise InputError("serve needs at least one checkpoint")
    nets, epss = [], []
    for path in checkpoints:
        net, eps_train = load_checkpoint(path, dtype=cfg.dtype)
        nets.append(net)
        epss.append(float(eps_train))
    return Session(cfg, nets, epss, list(checkpoints), **kw)


def parse_bind(bind):
    host, sep, port = bind.rpartition(":")
    if not sep or not host:
        raise InputError(f"bind must be host:port, got {bind!r}")
    try:
        port = int(port)
    except ValueError:
        raise InputError(f"bind port must be an integer, got {port!r}")
    if not (0 <= port < 65536):
        raise InputError(f"bind port out of range: {port}")
    return host, port


def _offer(queue, message, session):
    """Enqueue for one client without blocking the ticker; a saturated
    client loses the message rather than stalling anyone."""
    try:
        queue.put_nowait(message)
    except asyncio.QueueFull:
        session.dropped_frames += 1


async def _client_sender(ws, queue):
    while True:
        await ws.send(await queue.get())


async def run_service(session, host, port, fps=30.0, ready=None):
    """Accept viewers and tick forever. Handlers enqueue parsed commands
    and stream published messages; only this coroutine touches the session.
    When ready is a future it resolves to the bound port after startup."""
    import websockets

    clients = {}

    async def handler(ws):
        queue = asyncio.Queue(maxsize=8)
        sender = asyncio.create_task(_client_sender(ws, queue))
        _offer(queue, json.dumps(descriptor(session)), session)
        clients[ws] = queue
        try:
            async for message in ws:
                try:
                    cmd = parse_command(message, d=session.sysb.D)
                except InputError as e:
                    _offer(queue, json.dumps(
                        {"type": "error", "message": str(e)}), session)
                    continue
                session.mailbox.put(cmd)
        finally:
            clients.pop(ws, None)
            sender.cancel()

    def publish(message):
        for queue in list(clients.values()):
            _offer(queue, message, session)

    interval = 1.0 / fps
    async with websockets.serve(handler, host, port) as server:
        bound = server.sockets[0].getsockname()[1]
        if ready is not None and not ready.done():
            ready.set_result(bound)
        print(json.dumps({"serving": f"ws://{host}:{bound}",
                          "n": int(session.sysb.N),
                          "models": session.model_paths}), flush=True)
        while True:
            t0 = time.perf_counter()
            frame, changed, errors = tick(session)
            publish(frame)
            if changed:
                publish(json.dumps(descriptor(session)))
            for msg in errors:
                publish(json.dumps({"type": "error", "message": msg}))
            await asyncio.sleep(max(0.0, interval
                                    - (time.perf_counter() - t0)))


def serve_forever(cfg, checkpoints, args):
    """CLI entry: build the session and run the websocket host until
    interrupted."""
    session = build_session(
        cfg, checkpoints, steps_per_frame=args.steps_per_frame,
        window_side=args.window, float_positions=args.float_positions,
        debug=args.debug)
    host, port = parse_bind(args.bind)
    try:
        asyncio.run(run_service(session, host, port, fps=args.fps))
    except KeyboardInterrupt:
        pass
    return 0
