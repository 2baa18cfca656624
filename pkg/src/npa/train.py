"""Training and evaluation for the two tasks.

Morphogenesis grows a seeded particle ball into a target image: the final
state is splatted, compared against the splatted target point set, and the
image cotangents flow back through the rasterizer into states and
positions. Classification reads a fixed digit point cloud and pulls the
last ten state channels toward the label's one-hot vector.

Both tasks train through a sample pool so the rule is optimized for
persistence beyond any single rollout, and both log one JSON record per
metrics interval (every record is deterministic under a fixed seed except
the wall field).
"""

import dataclasses
import json
import os
import time

import numpy as np

from .engine import (ParticleSystem, StepConfig, init_adaptation_net,
                     load_checkpoint, rollout, rollout_backward,
                     save_checkpoint)
from .errors import InputError, NumericError
from .losses import (loss_classification, loss_displacement,
                     loss_morphogenesis, loss_overflow)
from .mnist import ingest_mnist, sample_point_digit
from .optim import AdamState, adam_step
from .pool import Pool, sample_with_damage, write_back
from .render import (SplatConfig, SplatImage, splat_bwd, splat_fwd,
                     window_from_points)
from .seeds import seed_egg
from .targets import named_target, target_points

TARGET_POINT_COUNT = 4096
LR_HALVE_AFTER_SKIPS = 3


def step_config(cfg):
    # cache_tape trades tape memory for skipping the perception recompute in
    # the backward sweep; at training sizes the tape is a few hundred MB at most
    return StepConfig(p=cfg.p, dynamic=cfg.dynamic, dx_scale=cfg.dx_scale,
                      strategy=cfg.strategy, hashing=cfg.hashing, cache_tape=True)


class MorphTask:
    """Target image, splat window, fresh seeds, and the morphogenesis loss."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        pts, cols = target_points(named_target(cfg.target),
                                  TARGET_POINT_COUNT, rng)
        x_lo, y_lo, side = window_from_points(pts, pad=0.1)
        self.render_cfg = SplatConfig(resolution=cfg.render_resolution,
                                      x_lo=x_lo, y_lo=y_lo, side=side)
        img = splat_fwd(pts, cols, self.render_cfg)
        # splatting is unnormalized, so a dense target point set renders
        # brighter than any arrangement of n particles could; rescale the
        # target to the particle count to keep the optimum reachable
        amp = cfg.n / pts.shape[0]
        self.target_img = SplatImage(img.density * amp, img.color * amp)

    def fresh(self, rng):
        sys = seed_egg(rng, self.cfg.n, self.cfg.channels,
                       radius=self.cfg.seed_radius, eps=self.cfg.eps,
                       dtype=self.cfg.dtype)
        return sys.x[0], sys.S[0], 0

    def loss(self, fin, tape, tags):
        cfg = self.cfg
        B = fin.x.shape[0]
        s_bar = np.zeros_like(fin.S)
        x_bar = np.zeros_like(fin.x)
        dens = col = 0.0
        for b in range(B):
            img = splat_fwd(fin.x[b], fin.S[b, :, -3:], self.render_cfg)
            _, parts, d_bar, c_bar = loss_morphogenesis(img, self.target_img)
            xb, cb = splat_bwd(fin.x[b], fin.S[b, :, -3:], self.render_cfg,
                               d_bar / B, c_bar / B)
            x_bar[b] = xb
            s_bar[b, :, -3:] = cb
            dens += parts["dens"] / B
            col += parts["col"] / B
        over, s_bar_over = loss_overflow(fin.S)
        s_bar += (cfg.lambda_overflow * s_bar_over).astype(s_bar.dtype)
        disp, disp_bars = loss_displacement(tape, fin.x)
        dx_bars = [(cfg.lambda_displacement * d).astype(s_bar.dtype)
                   for d in disp_bars]
        total = dens + col + cfg.lambda_overflow * over \
            + cfg.lambda_displacement * disp
        comps = {"dens": dens, "col": col, "overflow": over, "disp": disp}
        return float(total), comps, s_bar, x_bar, dx_bars


class ClassifyTask:
    """Digit point clouds with labels, and the one-hot state loss.

    Every dataset image is converted to its point cloud once up front
    (about 30 ms per digit), so training iterations only index an array.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        if not cfg.mnist_images or not cfg.mnist_labels:
            raise InputError("classification needs mnist_images and "
                             "mnist_labels paths")
        images, labels = ingest_mnist(cfg.mnist_images, cfg.mnist_labels)
        self.labels = labels.astype(np.int64)
        self.clouds = np.stack([
            sample_point_digit(img, rng, n_points=cfg.n) for img in images
        ]).astype(cfg.dtype)

    def fresh(self, rng):
        i = int(rng.integers(self.clouds.shape[0]))
        S = np.zeros((self.cfg.n, self.cfg.channels), self.cfg.dtype)
        return self.clouds[i].copy(), S, int(self.labels[i])

    def loss(self, fin, tape, tags):
        cfg = self.cfg
        total_cls, s_bar_cls, preds = loss_classification(fin.S, tags)
        over, s_bar_over = loss_overflow(fin.S)
        s_bar = (s_bar_cls + cfg.lambda_overflow * s_bar_over).astype(
            fin.S.dtype)
        total = total_cls + cfg.lambda_overflow * over
        comps = {"cls": float(total_cls), "overflow": float(over),
                 "acc": float(np.mean(preds == np.asarray(tags)))}
        return float(total), comps, s_bar, None, None


def make_task(cfg, rng):
    return MorphTask(cfg, rng) if cfg.task == "morph2d" else \
        ClassifyTask(cfg, rng)


def _record(mf, payload):
    mf.write(json.dumps(payload) + "\n")
    mf.flush()


def train(cfg, out_dir):
    """Run the configured task; returns a summary dict.

    Writes model.npa1 (latest weights), model.opt.npz (optimizer moments
    plus the iteration counter, which makes runs resumable), and
    metrics.jsonl under out_dir. Passing cfg.checkpoint resumes from that
    model, keeps its training radius, and continues iteration numbering
    when its .opt.npz sits next to it.
    """
    os.makedirs(out_dir, exist_ok=True)
    eps_train = cfg.eps
    start_iter = 0
    if cfg.checkpoint:
        net, eps_train = load_checkpoint(cfg.checkpoint, dtype=cfg.dtype)
        if net.C != cfg.channels or net.dynamic != cfg.dynamic:
            raise InputError(
                f"checkpoint (C={net.C}, dynamic={net.dynamic}) does not fit "
                f"task {cfg.task} with channels={cfg.channels}")
    else:
        net = init_adaptation_net(np.random.default_rng([cfg.seed, 0]),
                                  cfg.channels, 2, cfg.hidden, cfg.dynamic,
                                  dtype=cfg.dtype)
    opt = AdamState(net.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.checkpoint:
        opt_path = cfg.checkpoint + ".opt.npz"
        if os.path.exists(opt_path):
            extra = opt.load(opt_path)
            start_iter = int(extra.get("iteration", 0))

    # separate streams: task setup must not depend on whether the net was
    # loaded or drawn, and the loop stream restarts per resume point
    if cfg.checkpoint and eps_train != cfg.eps:
        cfg = dataclasses.replace(cfg, eps=float(eps_train))
    task = make_task(cfg, np.random.default_rng([cfg.seed, 1]))
    rng = np.random.default_rng([cfg.seed, 2, start_iter])
    scfg = step_config(cfg)
    pool = Pool(cfg.pool)
    mass = 1.0 / cfg.n
    fresh_ratio = cfg.fresh_ratio if cfg.fresh_ratio > 0 else None

    model_path = os.path.join(out_dir, "model.npa1")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if (start_iter and os.path.exists(metrics_path)) else "w"
    skips = 0
    last = {}
    with open(metrics_path, mode) as mf:
        for it in range(start_iter, start_iter + cfg.iterations):
            t0 = time.perf_counter()
            x, S, tags, slots = sample_with_damage(
                pool, rng, cfg.batch, task.fresh, eps_train, fresh_ratio)
            sysb = ParticleSystem(x, S, mass, eps_train)
            T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            ok, comps, total = True, {}, float("nan")
            try:
                fin, tape = rollout(sysb, net, scfg, T, rng)
                total, comps, s_bar, x_bar, dx_bars = task.loss(fin, tape,
                                                                tags)
                ok = bool(np.isfinite(total))
                if ok:
                    grads, _ = rollout_backward(tape, net, scfg, eps_train,
                                                mass, s_bar, x_bar, dx_bars)
                    ok = adam_step(net.params(), grads, opt)
            except NumericError:
                ok = False
            wall = time.perf_counter() - t0
            if not ok:
                skips += 1
                if skips >= LR_HALVE_AFTER_SKIPS:
                    opt.lr *= 0.5
                    skips = 0
                _record(mf, {"iteration": it, "skipped": True,
                             "lr": opt.lr, "T": T, "pool": len(pool),
                             "wall": round(wall, 6)})
                continue
            skips = 0
            write_back(pool, slots, fin.x, fin.S, tags, rng)
            last = {"iteration": it, "loss": total,
                    **{k: float(v) for k, v in comps.items()},
                    "lr": opt.lr, "T": T, "pool": len(pool)}
            if it % cfg.metrics_every == 0 or it == start_iter + cfg.iterations - 1:
                _record(mf, {**last, "wall": round(wall, 6)})
            if (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model_path, net, eps_train)
                opt.save(model_path + ".opt.npz", extra={"iteration": it + 1})
    save_checkpoint(model_path, net, eps_train)
    opt.save(model_path + ".opt.npz",
             extra={"iteration": start_iter + cfg.iterations})
    return {"checkpoint": model_path, "metrics": metrics_path,
            "iterations": start_iter + cfg.iterations, **last}


def eval_classification(cfg, chunk=64):
    """Dataset accuracy: argmax of particle-mean logits after t_max steps."""
    if not cfg.checkpoint:
        raise InputError("eval needs a checkpoint")
    net, eps_train = load_checkpoint(cfg.checkpoint, dtype=cfg.dtype)
    if net.dynamic:
        raise InputError("checkpoint holds a dynamic rule; classification "
                         "expects a static one")
    task = ClassifyTask(cfg, np.random.default_rng([cfg.seed, 1]))
    rng = np.random.default_rng([cfg.seed, 3])
    scfg = step_config(cfg)
    correct = total = 0
    for lo in range(0, task.clouds.shape[0], chunk):
        x = task.clouds[lo:lo + chunk]
        labels = task.labels[lo:lo + chunk]
        S = np.zeros((x.shape[0], cfg.n, cfg.channels), cfg.dtype)
        sysb = ParticleSystem(x, S, 1.0 / cfg.n, eps_train)
        fin, _ = rollout(sysb, net, scfg, cfg.t_max, rng)
        _, _, preds = loss_classification(fin.S, labels)
        correct += int(np.sum(preds == labels))
        total += x.shape[0]
    return {"accuracy": correct / total, "count": total}


def eval_morphogenesis(cfg, steps=None, image_path=None):
    """Roll a fresh seed and score the render against the target."""
    if not cfg.checkpoint:
        raise InputError("eval needs a checkpoint")
    net, eps_train = load_checkpoint(cfg.checkpoint, dtype=cfg.dtype)
    if not net.dynamic:
        raise InputError("checkpoint holds a static rule; morphogenesis "
                         "expects a dynamic one")
    if eps_train != cfg.eps:
        cfg = dataclasses.replace(cfg, eps=float(eps_train))
    task = MorphTask(cfg, np.random.default_rng([cfg.seed, 1]))
    rng = np.random.default_rng([cfg.seed, 3])
    x, S, _ = task.fresh(rng)
    sysb = ParticleSystem(x[None], S[None], 1.0 / cfg.n, eps_train)
    fin, _ = rollout(sysb, net, step_config(cfg), steps or cfg.t_max, rng)
    img = splat_fwd(fin.x[0], fin.S[0, :, -3:], task.render_cfg)
    total, parts, _, _ = loss_morphogenesis(img, task.target_img)
    if image_path:
        from .render import write_image
        write_image(image_path, img.density, img.color)
    return {"loss": float(total), "dens": float(parts["dens"]),
            "col": float(parts["col"]), "steps": int(steps or cfg.t_max)}
