"""Run configuration: plain key=value text with '#' comments.

Precedence is flags over file over task defaults over base defaults.
format_config dumps every field, so a dumped config re-parses to the same
values regardless of task defaults (round-trip idempotence). Values cannot
contain '#'.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import InputError

CHOICES = {
    "task": ("morph2d", "classify"),
    "strategy": ("particle", "block"),
    "hashing": ("morton", "row_major"),
    "precision": ("f32", "f64"),
}


@dataclass
class RunConfig:
    task: str = "morph2d"
    target: str = "disc"
    mnist_images: str = ""
    mnist_labels: str = ""
    checkpoint: str = ""
    n: int = 1024
    channels: int = 16
    hidden: int = 128
    eps: float = 0.1
    p: float = 0.5
    t_min: int = 10
    t_max: int = 26
    batch: int = 2
    iterations: int = 3000
    lr: float = 1e-3
    weight_decay: float = 0.0
    pool: int = 512
    seed: int = 0
    strategy: str = "particle"
    hashing: str = "morton"
    precision: str = "f32"
    dx_scale: float = 1.0
    seed_radius: float = 0.2
    lambda_overflow: float = 1.0
    lambda_displacement: float = 0.1
    fresh_ratio: float = 0.0            # 0 means the 1/batch default
    render_resolution: int = 128
    metrics_every: int = 10
    checkpoint_every: int = 500

    @property
    def dynamic(self):
        # particles move for morphogenesis; classification reads a fixed cloud
        return self.task == "morph2d"

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


TASK_DEFAULTS = {
    "morph2d": {},
    "classify": dict(n=512, hidden=256, t_min=12, t_max=24, batch=8,
                     iterations=2000, weight_decay=0.1, pool=1024,
                     target=""),
}

_FIELDS = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
           for f in fields(RunConfig)}


def parse_config_text(text, origin="<config>"):
    """key=value lines -> dict of raw strings; '#' starts a comment."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{origin} line {ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise InputError(f"{origin} line {ln}: unknown key {key!r}")
        out[key] = val
    return out


def _coerce(key, val, origin):
    kind = _FIELDS[key]
    try:
        if kind == "int":
            typed = int(val)
        elif kind == "float":
            typed = float(val)
        else:
            typed = val
    except ValueError:
        raise InputError(f"{origin}: field {key!r}: bad {kind} {val!r}") from None
    if key in CHOICES and typed not in CHOICES[key]:
        raise InputError(
            f"{origin}: field {key!r}: {val!r} not in {CHOICES[key]}")
    return typed


def _validate(cfg):
    checks = [
        (cfg.n >= 1, "n >= 1"),
        (cfg.channels >= 4, "channels >= 4"),
        (cfg.hidden >= 1, "hidden >= 1"),
        (cfg.eps > 0, "eps > 0"),
        (0 < cfg.p <= 1, "0 < p <= 1"),
        (1 <= cfg.t_min <= cfg.t_max, "1 <= t_min <= t_max"),
        (cfg.batch >= 1, "batch >= 1"),
        (cfg.iterations >= 0, "iterations >= 0"),
        (cfg.lr > 0, "lr > 0"),
        (cfg.weight_decay >= 0, "weight_decay >= 0"),
        (cfg.pool >= 1, "pool >= 1"),
        (cfg.seed >= 0, "seed >= 0"),
        (cfg.dx_scale >= 0, "dx_scale >= 0"),
        (cfg.seed_radius > 0, "seed_radius > 0"),
        (cfg.lambda_overflow >= 0, "lambda_overflow >= 0"),
        (cfg.lambda_displacement >= 0, "lambda_displacement >= 0"),
        (0 <= cfg.fresh_ratio <= 1, "0 <= fresh_ratio <= 1"),
        (cfg.render_resolution >= 2, "render_resolution >= 2"),
        (cfg.metrics_every >= 1, "metrics_every >= 1"),
        (cfg.checkpoint_every >= 1, "checkpoint_every >= 1"),
    ]
    for ok, rule in checks:
        if not ok:
            raise InputError(f"config violates {rule}")


def make_config(file_text=None, overrides=None, origin="<config>"):
    """Merge file values and flag overrides onto task-specific defaults."""
    file_vals = parse_config_text(file_text, origin) if file_text else {}
    over_vals = dict(overrides or {})
    for key in over_vals:
        if key not in _FIELDS:
            raise InputError(f"unknown config field {key!r}")
    task = over_vals.get("task", file_vals.get("task", RunConfig.task))
    task = _coerce("task", str(task), origin)
    merged = dict(TASK_DEFAULTS[task], task=task)
    for key, val in file_vals.items():
        merged[key] = _coerce(key, val, f"{origin}")
    for key, val in over_vals.items():
        merged[key] = _coerce(key, str(val), "flag")
    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def format_config(cfg):
    """Dump every field as key=value, one per line, in declaration order."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"
