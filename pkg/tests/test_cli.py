"""Command-line tests: config merging, exit codes, and the per-command
contracts (train plumbing, eval reporting, bench report, snapshot rollouts).

Everything runs through cli.main with tiny particle counts; the commands
print JSON or tables to stdout, so capsys carries the assertions.
"""

import json
import os

import numpy as np
import pytest

from npa import cli
from npa.config import format_config, make_config, parse_config_text
from npa.engine import load_checkpoint
from npa.mnist import write_idx_images, write_idx_labels
from npa.render import SplatConfig, splat_fwd
from npa.snapshot import load_snapshot


@pytest.fixture(scope="module")
def tiny_idx(tmp_path_factory):
    d = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(0)
    imgs = np.zeros((3, 8, 8), np.uint8)
    for k in range(3):
        imgs[k, 2:6, 2:6] = rng.integers(128, 255, (4, 4))
    ip, lp = str(d / "im.idx"), str(d / "lb.idx")
    write_idx_images(ip, imgs)
    write_idx_labels(lp, np.arange(3, dtype=np.uint8))
    return ip, lp


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory, tiny_idx):
    """A two-iteration classify training run shared by the read-only tests."""
    out = str(tmp_path_factory.mktemp("run"))
    code = cli.main(["train", "--task", "classify",
                     "--mnist-images", tiny_idx[0],
                     "--mnist-labels", tiny_idx[1],
                     "--config", _toy_cfg(tmp_path_factory),
                     "--iterations", "2", "--out", out])
    assert code == 0
    return out


def _toy_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    p.write_text("n=2\nchannels=12\nhidden=8\nbatch=1\nt_min=2\nt_max=2\n"
                 "eps=0.6\npool=4\nmetrics_every=1\ncheckpoint_every=100\n"
                 "# comment line\n")
    return str(p)


class TestConfigPlumbing:
    def test_print_config_round_trips(self, capsys):
        assert cli.main(["train", "--task", "classify", "--seed", "7",
                         "--print-config"]) == 0
        text = capsys.readouterr().out
        cfg = make_config(file_text=text)
        assert cfg.task == "classify" and cfg.seed == 7 and cfg.n == 512
        assert format_config(cfg) == text

    def test_flags_override_file(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("task=morph2d\nseed=3\neps=0.2\n")
        assert cli.main(["train", "--config", str(p), "--seed", "9",
                         "--print-config"]) == 0
        cfg = make_config(file_text=capsys.readouterr().out)
        assert cfg.seed == 9 and cfg.eps == 0.2

    def test_parse_error_names_line(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("task=morph2d\nwhat is this\n")
        assert cli.main(["train", "--config", str(p)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("tassk=morph2d\n")
        assert cli.main(["train", "--config", str(p)]) == 2
        assert "tassk" in capsys.readouterr().err

    def test_serialize_parse_idempotent(self):
        cfg = make_config(overrides=dict(task="morph2d", eps=0.25, seed=4))
        text = format_config(cfg)
        again = make_config(file_text=text)
        assert again == cfg and format_config(again) == text


class TestExitCodes:
    def test_missing_target_image_is_config_error(self, capsys):
        code = cli.main(["train", "--task", "morph2d",
                         "--target", "/no/such/image.png", "--out", "/tmp/x"])
        assert code == 2
        assert "/no/such/image.png" in capsys.readouterr().err

    def test_missing_checkpoint_is_config_error(self, tiny_idx, capsys):
        code = cli.main(["eval", "--task", "classify",
                         "--mnist-images", tiny_idx[0],
                         "--mnist-labels", tiny_idx[1],
                         "--checkpoint", "/no/model.npa1"])
        assert code == 2

    def test_malformed_checkpoint_is_io_error(self, tmp_path, tiny_idx,
                                              capsys):
        bad = tmp_path / "bad.npa1"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = cli.main(["run", "--task", "classify",
                         "--mnist-images", tiny_idx[0],
                         "--mnist-labels", tiny_idx[1],
                         "--checkpoint", str(bad),
                         "--out", str(tmp_path / "s.nps1")])
        assert code == 4

    def test_bad_sizes_flag(self, capsys):
        assert cli.main(["bench", "--sizes", "abc"]) == 2


class TestTrainCommand:
    def test_writes_artifacts_and_reports(self, tmp_path_factory, tiny_idx,
                                          toy_run, capsys):
        assert os.path.isfile(os.path.join(toy_run, "model.npa1"))
        assert os.path.isfile(os.path.join(toy_run, "metrics.jsonl"))

    def test_zero_iterations_initial_checkpoint_only(self, tmp_path_factory,
                                                     tiny_idx, capsys):
        out = str(tmp_path_factory.mktemp("z"))
        code = cli.main(["train", "--task", "classify",
                         "--mnist-images", tiny_idx[0],
                         "--mnist-labels", tiny_idx[1],
                         "--config", _toy_cfg(tmp_path_factory),
                         "--iterations", "0", "--out", out])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["iterations"] == 0
        net, _ = load_checkpoint(os.path.join(out, "model.npa1"))
        assert net.C == 12
        with open(os.path.join(out, "metrics.jsonl")) as f:
            assert f.read() == ""

    def test_resume_continues_numbering(self, tmp_path_factory, tiny_idx,
                                        toy_run, capsys):
        ck = os.path.join(toy_run, "model.npa1")
        out2 = str(tmp_path_factory.mktemp("resume"))
        code = cli.main(["train", "--task", "classify",
                         "--mnist-images", tiny_idx[0],
                         "--mnist-labels", tiny_idx[1],
                         "--config", _toy_cfg(tmp_path_factory),
                         "--iterations", "2", "--checkpoint", ck,
                         "--out", out2])
        assert code == 0
        with open(os.path.join(out2, "metrics.jsonl")) as f:
            its = [json.loads(l)["iteration"] for l in f]
        assert its == [2, 3]


class TestEvalCommand:
    def test_classify_eval_reports_accuracy(self, tmp_path_factory, tiny_idx,
                                            toy_run, capsys):
        argv = ["eval", "--task", "classify",
                "--mnist-images", tiny_idx[0], "--mnist-labels", tiny_idx[1],
                "--config", _toy_cfg(tmp_path_factory),
                "--checkpoint", os.path.join(toy_run, "model.npa1")]
        assert cli.main(argv) == 0
        first = json.loads(capsys.readouterr().out)
        assert set(first) == {"accuracy", "count"} and first["count"] == 3
        assert cli.main(argv) == 0
        assert json.loads(capsys.readouterr().out) == first


class TestRunCommand:
    def _train_morph(self, tmp_path_factory):
        out = str(tmp_path_factory.mktemp("morph"))
        code = cli.main(["train", "--task", "morph2d", "--target", "disc",
                         "--config", self._cfg(tmp_path_factory),
                         "--iterations", "1", "--out", out])
        assert code == 0
        return os.path.join(out, "model.npa1")

    def _cfg(self, tmp_path_factory):
        p = tmp_path_factory.mktemp("mcfg") / "m.cfg"
        p.write_text("n=32\nchannels=6\nhidden=8\nbatch=1\nt_min=2\nt_max=2\n"
                     "render_resolution=24\npool=4\nmetrics_every=1\n"
                     "checkpoint_every=100\n")
        return str(p)

    def test_zero_steps_snapshot_equals_seed(self, tmp_path_factory, capsys):
        from npa.seeds import seed_egg
        ck = self._train_morph(tmp_path_factory)
        out = str(tmp_path_factory.mktemp("s") / "seed.nps1")
        code = cli.main(["run", "--checkpoint", ck,
                         "--config", self._cfg(tmp_path_factory),
                         "--steps", "0", "--seed", "11", "--out", out])
        assert code == 0
        x, S = load_snapshot(out)
        want = seed_egg(np.random.default_rng([11, 1]), 32, 6, radius=0.2,
                        eps=0.1)
        assert np.array_equal(x, want.x.astype(np.float32))
        assert np.array_equal(S, want.S.astype(np.float32))

    def test_reproducible_and_renders_identically(self, tmp_path_factory,
                                                  capsys):
        from npa.snapshot import save_snapshot
        ck = self._train_morph(tmp_path_factory)
        d = tmp_path_factory.mktemp("s2")
        argv = ["run", "--checkpoint", ck,
                "--config", self._cfg(tmp_path_factory),
                "--steps", "5", "--seed", "3"]
        assert cli.main(argv + ["--out", str(d / "a.nps1")]) == 0
        assert cli.main(argv + ["--out", str(d / "b.nps1")]) == 0
        assert (d / "a.nps1").read_bytes() == (d / "b.nps1").read_bytes()
        # a second trip through the format must not disturb the render
        x, S = load_snapshot(str(d / "a.nps1"))
        save_snapshot(str(d / "c.nps1"), x, S)
        x2, S2 = load_snapshot(str(d / "c.nps1"))
        rc = SplatConfig(resolution=24)
        ia = splat_fwd(x[0], S[0, :, -3:], rc)
        ib = splat_fwd(x2[0], S2[0, :, -3:], rc)
        assert np.array_equal(ia.density, ib.density)
        assert np.array_equal(ia.color, ib.color)

    def test_periodic_snapshots_written(self, tmp_path_factory, capsys):
        ck = self._train_morph(tmp_path_factory)
        capsys.readouterr()
        d = tmp_path_factory.mktemp("s3")
        out = str(d / "roll.nps1")
        code = cli.main(["run", "--checkpoint", ck,
                         "--config", self._cfg(tmp_path_factory),
                         "--steps", "4", "--snapshot-every", "2",
                         "--seed", "3", "--out", out])
        assert code == 0
        names = json.loads(capsys.readouterr().out)["snapshots"]
        assert names == [str(d / "roll_000002.nps1"), out]

    def test_p_flag_changes_trajectory(self, tmp_path_factory, capsys):
        # forwarded into the step config: a different update probability
        # must change the rollout, all else equal
        ck = self._train_morph(tmp_path_factory)
        d = tmp_path_factory.mktemp("s4")
        base = ["run", "--checkpoint", ck,
                "--config", self._cfg(tmp_path_factory),
                "--steps", "6", "--seed", "3"]
        assert cli.main(base + ["--p", "1.0", "--out", str(d / "p1.nps1")]) == 0
        assert cli.main(base + ["--p", "0.25", "--out", str(d / "p25.nps1")]) == 0
        xa, Sa = load_snapshot(str(d / "p1.nps1"))
        xb, Sb = load_snapshot(str(d / "p25.nps1"))
        assert not (np.array_equal(Sa, Sb) and np.array_equal(xa, xb))


class TestBenchCommand:
    def test_report_contents(self, capsys):
        assert cli.main(["bench", "--sizes", "256,512",
                         "--brute-at", "512"]) == 0
        out = capsys.readouterr().out
        assert "neighbors n=256" in out and "neighbors n=512" in out
        assert "brute density at n=512" in out

    def test_strategies_agree_and_grid_beats_brute(self):
        rep = cli.bench_report([512], brute_at=2048)
        assert rep["max_rel_dev"] < 1e-5
        assert {(r["strategy"], r["hashing"]) for r in rep["rows"]} == \
            {("particle", "morton"), ("particle", "row_major"),
             ("block", "morton"), ("block", "row_major")}
        assert rep["brute"]["speedup"] > 1.0
        hist = rep["histograms"][512]
        assert sum(hist["buckets"].values()) == hist["sampled"] == 512
