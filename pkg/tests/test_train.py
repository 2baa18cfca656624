"""Trainer tests: the iteration loop, metrics log, pool plumbing, resume,
skip handling, and finite-difference checks of the assembled task losses.

The gradient checks keep particles in isolated pairs (rank-one moment
matrices keep the gradient correction inactive, see the engine tests) and
split the dynamic case in two: a depth-three run with displacements scaled
to zero checks the state chain through the renderer, and a depth-one run
with displacements live checks the position cotangents. Deeper moving
rollouts drop cross-step position adjoints by construction, so differencing
them would measure terms the backward deliberately discards.
"""

import dataclasses
import json
import os

import numpy as np
import pytest

from npa import build_grid, ops
from npa import train as tr
from npa.config import make_config
from npa.engine import (AdaptationNet, ParticleSystem, StepConfig,
                        load_checkpoint, perception_width, rollout,
                        rollout_backward)
from npa.mnist import write_idx_images, write_idx_labels


@pytest.fixture(scope="module")
def tiny_idx(tmp_path_factory):
    """One 8x8 digit with a bright block, labeled 0."""
    d = tmp_path_factory.mktemp("idx")
    img = np.zeros((1, 8, 8), np.uint8)
    img[0, 2:6, 2:6] = 255
    ip, lp = str(d / "im.idx"), str(d / "lb.idx")
    write_idx_images(ip, img)
    write_idx_labels(lp, np.array([0], np.uint8))
    return ip, lp


def toy_config(tiny_idx, **kw):
    """Two-particle classification toy: one digit, batch one (always a fresh
    seed), fixed depth, every particle updated, metrics every iteration."""
    over = dict(task="classify", mnist_images=tiny_idx[0],
                mnist_labels=tiny_idx[1], n=2, channels=12, hidden=8,
                batch=1, t_min=3, t_max=3, iterations=10, lr=1e-2,
                weight_decay=0.0, pool=4, eps=0.6, p=1.0, metrics_every=1,
                checkpoint_every=100, seed=5)
    over.update(kw)
    return make_config(overrides=over)


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


class TestTrainLoop:
    def test_toy_loss_mostly_nonincreasing(self, tiny_idx, tmp_path):
        out = tr.train(toy_config(tiny_idx), str(tmp_path / "run"))
        recs = read_metrics(out["metrics"])
        losses = [r["loss"] for r in recs]
        assert len(losses) == 10
        down = sum(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert down >= 7, f"loss rose too often: {losses}"
        assert losses[-1] < losses[0]

    def test_metrics_record_fields(self, tiny_idx, tmp_path):
        out = tr.train(toy_config(tiny_idx, iterations=2),
                       str(tmp_path / "run"))
        for r in read_metrics(out["metrics"]):
            assert {"iteration", "loss", "cls", "overflow", "lr", "T",
                    "pool", "wall"} <= set(r)

    def test_identical_seeds_identical_metrics(self, tiny_idx, tmp_path):
        cfg = toy_config(tiny_idx, iterations=6, batch=2, seed=9)
        a = tr.train(cfg, str(tmp_path / "a"))
        b = tr.train(cfg, str(tmp_path / "b"))
        ra, rb = read_metrics(a["metrics"]), read_metrics(b["metrics"])
        for r in ra + rb:
            r.pop("wall")
        assert ra == rb

    def test_pool_reaches_capacity_and_respects_cap(self, tiny_idx,
                                                    tmp_path):
        cfg = toy_config(tiny_idx, iterations=12, batch=2, pool=3)
        out = tr.train(cfg, str(tmp_path / "run"))
        occ = [r["pool"] for r in read_metrics(out["metrics"])]
        assert max(occ) == 3
        assert all(o <= 3 for o in occ)
        assert occ[-1] == 3

    def test_zero_iterations_writes_checkpoint_only(self, tiny_idx,
                                                    tmp_path):
        out = tr.train(toy_config(tiny_idx, iterations=0),
                       str(tmp_path / "run"))
        assert out["iterations"] == 0 and "loss" not in out
        assert read_metrics(out["metrics"]) == []
        net, eps_train = load_checkpoint(out["checkpoint"])
        assert net.C == 12 and not net.dynamic and eps_train == \
            pytest.approx(0.6)


class TestResume:
    def test_resume_continues_iteration_numbering(self, tiny_idx, tmp_path):
        run = str(tmp_path / "run")
        cfg = toy_config(tiny_idx, iterations=4)
        first = tr.train(cfg, run)
        cfg2 = dataclasses.replace(cfg, checkpoint=first["checkpoint"],
                                   iterations=3)
        second = tr.train(cfg2, run)
        assert second["iterations"] == 7
        recs = read_metrics(second["metrics"])
        assert [r["iteration"] for r in recs] == list(range(7))

    def test_resume_without_optimizer_file_starts_at_zero(self, tiny_idx,
                                                          tmp_path):
        cfg = toy_config(tiny_idx, iterations=2)
        first = tr.train(cfg, str(tmp_path / "a"))
        os.remove(first["checkpoint"] + ".opt.npz")
        cfg2 = dataclasses.replace(cfg, checkpoint=first["checkpoint"])
        second = tr.train(cfg2, str(tmp_path / "b"))
        recs = read_metrics(second["metrics"])
        assert [r["iteration"] for r in recs] == [0, 1]

    def test_mismatched_checkpoint_rejected(self, tiny_idx, tmp_path):
        from npa.errors import InputError
        cfg = toy_config(tiny_idx, iterations=1)
        first = tr.train(cfg, str(tmp_path / "a"))
        bad = dataclasses.replace(cfg, checkpoint=first["checkpoint"],
                                  channels=14)
        with pytest.raises(InputError):
            tr.train(bad, str(tmp_path / "b"))


class _FlakyTask:
    """Stand-in task whose loss is non-finite for the first few calls."""

    def __init__(self, cfg, fails):
        self.cfg = cfg
        self.fails = fails
        self.calls = 0

    def fresh(self, rng):
        x = rng.random((self.cfg.n, 2))
        S = np.zeros((self.cfg.n, self.cfg.channels), self.cfg.dtype)
        return x, S, 0

    def loss(self, fin, tape, tags):
        self.calls += 1
        if self.calls <= self.fails:
            return float("inf"), {}, np.zeros_like(fin.S), None, None
        return 1.0, {"cls": 1.0}, np.zeros_like(fin.S), None, None


class TestSkips:
    def test_lr_halves_after_three_consecutive_skips(self, tiny_idx,
                                                     tmp_path, monkeypatch):
        monkeypatch.setattr(tr, "make_task",
                            lambda cfg, rng: _FlakyTask(cfg, 3))
        cfg = toy_config(tiny_idx, iterations=5)
        out = tr.train(cfg, str(tmp_path / "run"))
        recs = read_metrics(out["metrics"])
        assert [r.get("skipped", False) for r in recs] == \
            [True, True, True, False, False]
        assert recs[0]["lr"] == pytest.approx(1e-2)
        assert recs[2]["lr"] == pytest.approx(5e-3)
        assert recs[4]["lr"] == pytest.approx(5e-3)
        assert "loss" not in recs[0] and recs[3]["loss"] == 1.0

    def test_skipped_iterations_leave_pool_untouched(self, tiny_idx,
                                                     tmp_path, monkeypatch):
        monkeypatch.setattr(tr, "make_task",
                            lambda cfg, rng: _FlakyTask(cfg, 2))
        cfg = toy_config(tiny_idx, iterations=4)
        out = tr.train(cfg, str(tmp_path / "run"))
        occ = [r["pool"] for r in read_metrics(out["metrics"])]
        assert occ[:2] == [0, 0] and occ[2] >= 1


class TestEval:
    def test_eval_twice_same_seed_identical(self, tiny_idx, tmp_path):
        cfg = toy_config(tiny_idx, iterations=2)
        out = tr.train(cfg, str(tmp_path / "run"))
        cfg2 = dataclasses.replace(cfg, checkpoint=out["checkpoint"])
        assert tr.eval_classification(cfg2) == tr.eval_classification(cfg2)

    def test_untrained_net_predicts_first_class(self, tiny_idx, tmp_path):
        # zero output layer leaves all logits at zero; argmax breaks the tie
        # toward class 0, so a one-digit dataset labeled 0 scores perfectly
        cfg = toy_config(tiny_idx, iterations=0)
        out = tr.train(cfg, str(tmp_path / "run"))
        cfg2 = dataclasses.replace(cfg, checkpoint=out["checkpoint"])
        res = tr.eval_classification(cfg2)
        assert res == {"accuracy": 1.0, "count": 1}


def grid_pairs(rng, n_pairs, eps):
    """Isolated two-particle clusters placed on a grid near the origin so
    every particle lands inside the morphogenesis render window."""
    pitch = 3.5 * eps
    pts = []
    for k in range(n_pairs):
        c = np.array([(k % 3) - 1.0, (k // 3) - 1.0]) * pitch
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        r = eps * rng.uniform(0.35, 0.55)
        pts.append(c + 0.5 * r * u)
        pts.append(c - 0.5 * r * u)
    return np.asarray(pts)[None]


def rand_dyn_net(rng, C, D, H, scale=0.25):
    Zw = perception_width(C, D)
    return AdaptationNet(scale * rng.standard_normal((H, Zw)),
                         scale * rng.standard_normal(H),
                         scale * rng.standard_normal((D + C, H)),
                         C, D, True)


def morph_total(task, x0, S0, net, scfg, T, seed, mass, eps):
    fin, tape = rollout(ParticleSystem(x0, S0, mass, eps), net, scfg, T,
                        np.random.default_rng(seed))
    total, _, s_bar, x_bar, dx_bars = task.loss(fin, tape, None)
    return total, tape, s_bar, x_bar, dx_bars


def color_gates(task, x0, S0, net, scfg, T, seed, mass, eps):
    """The color gate at the unperturbed point, one map per batch element."""
    from npa.render import splat_fwd
    fin, _ = rollout(ParticleSystem(x0, S0, mass, eps), net, scfg, T,
                     np.random.default_rng(seed))
    gates = []
    for b in range(fin.x.shape[0]):
        img = splat_fwd(fin.x[b], fin.S[b, :, -3:], task.render_cfg)
        dd = np.asarray(img.density, np.float64) - \
            np.asarray(task.target_img.density, np.float64)
        gates.append(np.exp(-np.abs(dd) / 0.25))
    return gates


def frozen_gate_total(task, x0, S0, net, scfg, T, seed, mass, eps, gates):
    """task.loss with the detached color gate held at its base value. The
    gate is a constant during differentiation, so differencing the loss as
    written would measure a term the gradient definition excludes."""
    from npa.losses import loss_displacement, loss_overflow
    from npa.render import splat_fwd
    fin, tape = rollout(ParticleSystem(x0, S0, mass, eps), net, scfg, T,
                        np.random.default_rng(seed))
    cfg = task.cfg
    B = fin.x.shape[0]
    dens = col = 0.0
    for b in range(B):
        img = splat_fwd(fin.x[b], fin.S[b, :, -3:], task.render_cfg)
        dd = np.asarray(img.density, np.float64) - \
            np.asarray(task.target_img.density, np.float64)
        cd = np.asarray(img.color, np.float64) - \
            np.asarray(task.target_img.color, np.float64)
        dens += (np.mean(np.abs(dd)) + np.mean(dd * dd)) / B
        col += np.mean(gates[b][:, :, None] * (np.abs(cd) + cd * cd)) / B
    over, _ = loss_overflow(fin.S)
    disp, _ = loss_displacement(tape, fin.x)
    return float(dens + col + cfg.lambda_overflow * over
                 + cfg.lambda_displacement * disp)


def fd_weight_grads(task, x0, S0, net, scfg, T, seed, mass, eps, gates,
                    h=5e-5):
    # the loss is O(10), so tighter spacing drowns the difference in
    # cancellation noise before truncation error ever shows up
    out = {}
    for key, p in net.params().items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = frozen_gate_total(task, x0, S0, net, scfg, T, seed, mass,
                                   eps, gates)
            p[idx] = orig - h
            lm = frozen_gate_total(task, x0, S0, net, scfg, T, seed, mass,
                                   eps, gates)
            p[idx] = orig
            fd[idx] = (lp - lm) / (2 * h)
        out[key] = fd
    return out


def assert_grads_match(grads, fds, tol=1e-3):
    gmax = max(max(np.abs(g).max() for g in grads.values()),
               max(np.abs(f).max() for f in fds.values()))
    for key in grads:
        denom = np.maximum(np.maximum(np.abs(grads[key]), np.abs(fds[key])),
                           1e-3 * gmax + 1e-12)
        rel = np.abs(grads[key] - fds[key]) / denom
        assert rel.max() < tol, f"{key}: max rel err {rel.max()}"


class TestEndToEndGradient:
    """Total morphogenesis loss (render + overflow + displacement) against
    central differences over every network weight, in double precision."""

    def _setup(self, seed):
        cfg = make_config(overrides=dict(
            task="morph2d", target="disc", n=16, channels=4, hidden=6,
            render_resolution=32, precision="f64", eps=0.1))
        task = tr.MorphTask(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(seed)
        x0 = grid_pairs(rng, 8, cfg.eps)
        S0 = 0.8 * rng.standard_normal((1, 16, 4))
        pr = ops.perception(build_grid(x0, cfg.eps), S0, 1.0 / 16)
        assert not pr.correction_applied.any()
        net = rand_dyn_net(rng, 4, 2, 6)
        return task, x0, S0, net

    def test_state_chain_matches_fd_depth_three(self):
        # displacements scaled to zero: positions never move, so the deep
        # state chain and the splat color path carry all the signal
        task, x0, S0, net = self._setup(31)
        scfg = StepConfig(p=0.5, dynamic=True, dx_scale=0.0, cache_tape=True)
        args = (task, x0, S0, net, scfg, 3, 91, 1.0 / 16, 0.1)
        total, tape, s_bar, x_bar, dx_bars = morph_total(*args)
        gates = color_gates(*args)
        assert frozen_gate_total(*args, gates) == pytest.approx(total)
        grads, _ = rollout_backward(tape, net, scfg, 0.1, 1.0 / 16,
                                    s_bar, x_bar, dx_bars)
        fds = fd_weight_grads(*args, gates)
        assert_grads_match(grads, fds)

    def test_position_chain_matches_fd_depth_one(self):
        # one moving step: the splat position cotangents and the
        # displacement regularizer reach the weights with nothing cut
        task, x0, S0, net = self._setup(32)
        scfg = StepConfig(p=0.5, dynamic=True, dx_scale=1.0, cache_tape=True)
        args = (task, x0, S0, net, scfg, 1, 92, 1.0 / 16, 0.1)
        total, tape, s_bar, x_bar, dx_bars = morph_total(*args)
        gates = color_gates(*args)
        assert frozen_gate_total(*args, gates) == pytest.approx(total)
        assert float(np.abs(x_bar).max()) > 0.0
        grads, _ = rollout_backward(tape, net, scfg, 0.1, 1.0 / 16,
                                    s_bar, x_bar, dx_bars)
        fds = fd_weight_grads(*args, gates)
        assert_grads_match(grads, fds)
