"""Live service tests: command parsing, brushes, the mailbox eviction
policy, tick semantics (render-only ticks, auto-pause on numeric faults),
frame encoding, the multi-species composition rule, bitwise equivalence
between the served trajectory and the headless run command, and a real
websocket round trip.

The session/tick layer is exercised directly; only the last test touches
sockets.
"""

import asyncio
import json
import struct

import numpy as np
import pytest

from npa import cli, service
from npa.config import make_config
from npa.engine import (AdaptationNet, ParticleSystem, init_adaptation_net,
                        save_checkpoint)
from npa.errors import InputError
from npa.snapshot import load_snapshot

EPS = 0.1


def make_net(seed=3, C=6, H=8, scale=0.05):
    rng = np.random.default_rng(seed)
    net = init_adaptation_net(rng, C=C, D=2, H=H, dynamic=True)
    net.W2 = rng.normal(0.0, scale, net.W2.shape).astype(np.float32)
    return net


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ck") / "model.npa1")
    save_checkpoint(path, make_net(), EPS)
    return path


def make_cfg(**kw):
    over = dict(task="morph2d", target="disc", n=32, channels=6, hidden=8,
                eps=EPS, seed=9, p=0.5)
    over.update(kw)
    return make_config(overrides={k: str(v) for k, v in over.items()})


def session_for(checkpoint, n_models=1, **kw):
    return service.build_session(make_cfg(), [checkpoint] * n_models, **kw)


def split_frame(buf, d=2, quantized=True, n_channels=None):
    """Decode one frame into (header fields, arrays)."""
    magic, version, flags, _, idx, n = service.HEADER.unpack(buf[:16])
    off = 16
    if quantized:
        pos = np.frombuffer(buf, "<u2", n * d, off).reshape(n, d)
        off += n * d * 2
    else:
        pos = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d)
        off += n * d * 4
    col = np.frombuffer(buf, np.uint8, n * 3, off).reshape(n, 3)
    off += n * 3
    species = np.frombuffer(buf, np.uint8, n, off)
    off += n
    (tick_ms,) = struct.unpack_from("<f", buf, off)
    off += 4
    states = None
    if flags & service.FLAG_STATES:
        states = np.frombuffer(buf, "<f4", n * n_channels, off)
        states = states.reshape(n, n_channels)
        off += n * n_channels * 4
    assert off == len(buf)
    return dict(magic=magic, version=version, flags=flags, index=idx, n=n,
                pos=pos, col=col, species=species, tick_ms=tick_ms,
                states=states)


class TestParseCommand:
    def test_valid_commands_normalize(self):
        c = service.parse_command(
            '{"kind": "brush_push", "center": [0, 1], "radius": 0.5,'
            ' "strength": 2, "direction": [1, 0]}')
        assert c == {"kind": "brush_push", "center": [0.0, 1.0],
                     "radius": 0.5, "strength": 2.0, "direction": [1.0, 0.0]}
        c = service.parse_command('{"kind": "set_param", "name":'
                                  ' "steps_per_frame", "value": 3}')
        assert c["value"] == 3 and isinstance(c["value"], int)
        c = service.parse_command('{"kind": "reset"}')
        assert c == {"kind": "reset", "seed_kind": "egg",
                     "assign": "interleave"}

    @pytest.mark.parametrize("text", [
        "not json",
        '["kind", "pause"]',
        '{"kind": "brush_cut", "center": [0, 0], "radius": 1}',
        '{"kind": "brush_zero", "radius": 1}',
        '{"kind": "brush_zero", "center": [0, 0], "radius": 0}',
        '{"kind": "brush_zero", "center": [0], "radius": 1}',
        '{"kind": "brush_zero", "center": [0, null], "radius": 1}',
        '{"kind": "brush_push", "center": [0, 0], "radius": 1,'
        ' "strength": 1}',
        '{"kind": "brush_pull", "center": [0, 0], "radius": 1,'
        ' "strength": "big"}',
        '{"kind": "set_param", "name": "gravity", "value": 1}',
        '{"kind": "set_param", "name": "p", "value": 2.0}',
        '{"kind": "set_param", "name": "steps_per_frame", "value": 1.5}',
        '{"kind": "reset", "seed_kind": "spiral"}',
        '{"kind": "reset", "assign": "random"}',
        '{"kind": "reset", "seed": -3}',
        '{"kind": "load_model", "path": ""}',
    ])
    def test_malformed_commands_rejected(self, text):
        with pytest.raises(InputError):
            service.parse_command(text)


class TestBrushes:
    def _sys(self):
        x = np.array([[[0.0, 0.0], [0.2, 0.0], [2.0, 0.0]]], np.float32)
        S = np.ones((1, 3, 4), np.float32)
        return ParticleSystem(x, S, 1.0 / 3, EPS)

    def test_zero_clears_inside_only(self):
        out = service.apply_brush(self._sys(), {
            "kind": "brush_zero", "center": [0.0, 0.0], "radius": 0.5})
        assert np.all(out.S[0, :2] == 0.0)
        assert np.all(out.S[0, 2] == 1.0)
        assert np.array_equal(out.x, self._sys().x)

    def test_outside_radius_untouched_by_push_and_pull(self):
        base = self._sys()
        for cmd in ({"kind": "brush_push", "center": [0.0, 0.0],
                     "radius": 0.5, "strength": 1.0, "direction": [1.0, 0.0]},
                    {"kind": "brush_pull", "center": [0.0, 0.0],
                     "radius": 0.5, "strength": 1.0}):
            out = service.apply_brush(base, cmd)
            assert np.array_equal(out.x[0, 2], base.x[0, 2])
            assert np.array_equal(out.S, base.S)

    def test_pull_at_center_is_zero_displacement(self):
        out = service.apply_brush(self._sys(), {
            "kind": "brush_pull", "center": [0.0, 0.0], "radius": 0.5,
            "strength": 1.0})
        assert np.array_equal(out.x[0, 0], np.zeros(2, np.float32))

    def test_pull_moves_toward_center(self):
        out = service.apply_brush(self._sys(), {
            "kind": "brush_pull", "center": [0.0, 0.0], "radius": 0.5,
            "strength": 0.05})
        # particle 1 sits at x=0.2: it should move left, not overshoot
        assert 0.0 < out.x[0, 1, 0] < 0.2
        assert out.x[0, 1, 1] == 0.0

    def test_push_bounded_by_strength_and_along_direction(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (1, 64, 2)).astype(np.float32)
        base = ParticleSystem(x, np.zeros((1, 64, 3), np.float32), 1.0, EPS)
        direction = np.array([0.6, -0.8])
        out = service.apply_brush(base, {
            "kind": "brush_push", "center": [0.0, 0.0], "radius": 0.7,
            "strength": 0.3, "direction": direction.tolist()})
        dx = (out.x - base.x)[0]
        norms = np.linalg.norm(dx, axis=1)
        assert norms.max() <= 0.3 * np.linalg.norm(direction) + 1e-6
        moved = norms > 0
        assert moved.any()
        unit = direction / np.linalg.norm(direction)
        along = dx[moved] @ unit
        assert np.allclose(np.abs(along), norms[moved], atol=1e-6)
        assert (along > 0).all()


class TestMailbox:
    def brush(self, i):
        return {"kind": "brush_zero", "center": [float(i), 0.0], "radius": 1.0}

    def test_overflow_evicts_oldest_brush_first(self):
        mb = service.Mailbox(limit=4)
        for i in range(4):
            mb.put(self.brush(i))
        mb.put({"kind": "set_param", "name": "p", "value": 0.5})
        kinds = [(c["kind"], c.get("center", [None])[0]) for c in mb.q]
        assert kinds == [("brush_zero", 1.0), ("brush_zero", 2.0),
                         ("brush_zero", 3.0), ("set_param", None)]
        assert mb.dropped == 1
        mb.put(self.brush(9))
        assert [c["kind"] for c in mb.q] == \
            ["brush_zero", "brush_zero", "set_param", "brush_zero"]
        assert mb.dropped == 2

    def test_critical_commands_never_dropped(self):
        mb = service.Mailbox(limit=2)
        mb.put({"kind": "set_param", "name": "p", "value": 0.5})
        mb.put({"kind": "reset", "seed_kind": "egg", "assign": "interleave"})
        mb.put(self.brush(0))               # full of criticals: brush lost
        assert len(mb.q) == 2 and mb.dropped == 1
        mb.put({"kind": "pause"})           # critical exceeds the soft bound
        assert [c["kind"] for c in mb.q] == ["set_param", "reset", "pause"]
        assert mb.dropped == 1

    def test_drain_preserves_arrival_order_and_empties(self):
        mb = service.Mailbox(limit=8)
        mb.put(self.brush(0))
        mb.put({"kind": "pause"})
        out = mb.drain()
        assert [c["kind"] for c in out] == ["brush_zero", "pause"]
        assert mb.drain() == []


class TestTick:
    def test_render_only_tick_repeats_state(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=0)
        f0, changed, errors = service.tick(ses)
        f1, _, _ = service.tick(ses)
        assert not changed and not errors
        a, b = split_frame(f0), split_frame(f1)
        assert a["index"] == 0 and b["index"] == 1
        assert np.array_equal(a["pos"], b["pos"])
        assert np.array_equal(a["col"], b["col"])

    def test_brush_zero_covering_everything_zeroes_states(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=0)
        service.tick(ses)
        assert ses.sysb.S.any() or True  # states start at zero; make some
        ses.sysb = ParticleSystem(ses.sysb.x, ses.sysb.S + 0.7,
                                  ses.sysb.mass, ses.sysb.eps_train)
        ses.mailbox.put({"kind": "brush_zero", "center": [0.0, 0.0],
                         "radius": 100.0})
        frame, _, _ = service.tick(ses)
        assert np.all(ses.sysb.S == 0.0)
        assert np.all(split_frame(frame)["col"] == 0)

    def test_steps_advance_and_commands_apply_before_stepping(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=2)
        x0 = ses.sysb.x.copy()
        ses.mailbox.put({"kind": "set_param", "name": "p", "value": 1.0})
        _, changed, errors = service.tick(ses)
        assert changed and not errors
        assert ses.p == 1.0
        assert not np.array_equal(ses.sysb.x, x0)

    def test_pause_and_resume(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=1)
        ses.mailbox.put({"kind": "pause"})
        frame, changed, _ = service.tick(ses)
        assert changed and ses.paused
        assert split_frame(frame)["flags"] & service.FLAG_PAUSED
        x0 = ses.sysb.x.copy()
        service.tick(ses)
        assert np.array_equal(ses.sysb.x, x0)
        ses.mailbox.put({"kind": "resume"})
        service.tick(ses)
        assert not ses.paused
        assert not np.array_equal(ses.sysb.x, x0)

    def test_numeric_blowup_autopauses_with_error_frame(self, tmp_path):
        net = make_net()
        net.W2 = np.full_like(net.W2, 3e38)   # overflow in one matmul
        path = str(tmp_path / "hot.npa1")
        save_checkpoint(path, net, EPS)
        ses = service.build_session(make_cfg(p="1.0"), [path],
                                    steps_per_frame=1)
        with np.errstate(over="ignore", invalid="ignore"):
            frame, changed, _ = service.tick(ses)
        assert changed and ses.paused and ses.error is not None
        flags = split_frame(frame)["flags"]
        assert flags & service.FLAG_ERROR and flags & service.FLAG_PAUSED
        x0 = ses.sysb.x.copy()
        service.tick(ses)                    # paused: no further stepping
        assert np.array_equal(ses.sysb.x, x0)
        # halt stepping so the reset's cleared fault can be observed
        ses.mailbox.put({"kind": "set_param", "name": "steps_per_frame",
                         "value": 0})
        ses.mailbox.put({"kind": "reset"})
        service.tick(ses)
        assert not ses.paused and ses.error is None

    def test_bad_command_reports_error_and_keeps_ticking(self, checkpoint,
                                                         tmp_path):
        ses = session_for(checkpoint, steps_per_frame=0)
        ses.mailbox.put({"kind": "load_model",
                         "path": str(tmp_path / "missing.npa1")})
        _, _, errors = service.tick(ses)
        assert len(errors) == 1 and "load_model" in errors[0]
        assert len(ses.nets) == 1
        assert not ses.paused


class TestFrames:
    def test_header_and_quantization_roundtrip(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=1, window_side=4.0)
        frame, _, _ = service.tick(ses)
        f = split_frame(frame)
        assert f["magic"] == b"NPAF" and f["version"] == 1
        assert f["n"] == 32 and f["flags"] == 0
        x = ses.sysb.x[0]
        back = ses.window_lo + f["pos"].astype(np.float64) / 65535.0 * 4.0
        assert np.abs(back - x).max() <= 4.0 / 65535.0
        assert f["tick_ms"] >= 0.0

    def test_float_positions_are_exact(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=1,
                          float_positions=True)
        frame, _, _ = service.tick(ses)
        f = split_frame(frame, quantized=False)
        assert f["flags"] & service.FLAG_FLOAT32
        assert np.array_equal(f["pos"], ses.sysb.x[0])

    def test_debug_frames_carry_raw_states(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=1, debug=True)
        frame, _, _ = service.tick(ses)
        f = split_frame(frame, n_channels=6)
        assert f["flags"] & service.FLAG_STATES
        assert np.array_equal(f["states"], ses.sysb.S[0])

    def test_colors_are_clipped_last_three_channels(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=0)
        S = ses.sysb.S.copy()
        S[0, :, -3:] = [-1.0, 0.5, 2.0]
        ses.sysb = ParticleSystem(ses.sysb.x, S, ses.sysb.mass,
                                  ses.sysb.eps_train)
        frame, _, _ = service.tick(ses)
        col = split_frame(frame)["col"]
        assert np.all(col == np.array([0, 128, 255], np.uint8))


class TestSpecies:
    def test_two_identical_species_match_single_model(self, checkpoint):
        one = session_for(checkpoint, n_models=1, steps_per_frame=2)
        two = session_for(checkpoint, n_models=2, steps_per_frame=2)
        assert set(two.species.tolist()) == {0, 1}
        for _ in range(5):
            service.tick(one)
            service.tick(two)
        assert np.array_equal(one.sysb.x, two.sysb.x)
        assert np.array_equal(one.sysb.S, two.sysb.S)

    def test_distinct_species_diverge_from_single_model(self, tmp_path,
                                                        checkpoint):
        other = str(tmp_path / "other.npa1")
        save_checkpoint(other, make_net(seed=11), EPS)
        one = session_for(checkpoint, n_models=1, steps_per_frame=2)
        two = service.build_session(make_cfg(), [checkpoint, other],
                                    steps_per_frame=2)
        for _ in range(3):
            service.tick(one)
            service.tick(two)
        assert not np.array_equal(one.sysb.x, two.sysb.x)

    def test_partition_assignment_splits_space(self, checkpoint):
        ses = session_for(checkpoint, n_models=2)
        service.reset(ses, "square", assign="partition")
        x0 = ses.sysb.x[0, :, 0]
        left, right = x0[ses.species == 0], x0[ses.species == 1]
        assert left.size == right.size == 16
        assert left.max() <= right.min()

    def test_interleave_assignment_alternates(self, checkpoint):
        ses = session_for(checkpoint, n_models=2)
        assert np.array_equal(ses.species, np.arange(32) % 2)

    def test_mismatched_layout_rejected(self, tmp_path, checkpoint):
        bad = str(tmp_path / "bad.npa1")
        save_checkpoint(bad, make_net(C=8), EPS)
        with pytest.raises(InputError):
            service.build_session(make_cfg(), [checkpoint, bad])

    def test_load_model_appends_species(self, tmp_path, checkpoint):
        other = str(tmp_path / "other.npa1")
        save_checkpoint(other, make_net(seed=11), EPS)
        ses = session_for(checkpoint)
        ses.mailbox.put({"kind": "load_model", "path": other})
        ses.mailbox.put({"kind": "reset", "seed_kind": "egg",
                         "assign": "interleave"})
        _, changed, errors = service.tick(ses)
        assert changed and not errors
        assert len(ses.nets) == 2
        assert set(ses.species.tolist()) == {0, 1}


class TestDescriptor:
    def test_fields_and_param_echo(self, checkpoint):
        ses = session_for(checkpoint, n_models=2, steps_per_frame=3)
        d = service.descriptor(ses)
        assert d["type"] == "descriptor" and d["version"] == 1
        assert d["d"] == 2 and d["n"] == 32 and d["c"] == 6
        assert d["window"] == {"lo": [-2.0, -2.0], "side": 4.0}
        assert d["models"] == ["model.npa1", "model.npa1"]
        assert sum(d["species_counts"]) == 32
        assert d["params"]["steps_per_frame"] == 3
        ses.mailbox.put({"kind": "set_param", "name": "p", "value": 0.25})
        _, changed, _ = service.tick(ses)
        assert changed
        assert service.descriptor(ses)["params"]["p"] == 0.25

    def test_frame_field_names_next_frame(self, checkpoint):
        ses = session_for(checkpoint, steps_per_frame=0)
        frame, _, _ = service.tick(ses)
        assert split_frame(frame)["index"] == 0
        assert service.descriptor(ses)["frame"] == 1


class TestRunEquivalence:
    def test_served_trajectory_matches_headless_run(self, tmp_path,
                                                    checkpoint, capsys):
        cfg_path = str(tmp_path / "cfg")
        with open(cfg_path, "w") as f:
            f.write("task=morph2d\ntarget=disc\nn=32\nchannels=6\n"
                    "hidden=8\neps=0.1\nseed=9\np=0.5\n")
        snap = str(tmp_path / "run.nps1")
        assert cli.main(["run", "--config", cfg_path, "--checkpoint",
                         checkpoint, "--steps", "6", "--out", snap]) == 0
        capsys.readouterr()
        x_run, S_run = load_snapshot(snap)

        ses = session_for(checkpoint, steps_per_frame=3)
        service.tick(ses)
        service.tick(ses)
        assert np.array_equal(ses.sysb.x, x_run)
        assert np.array_equal(ses.sysb.S, S_run)

    def test_reset_egg_positions_inside_ball(self, checkpoint):
        ses = session_for(checkpoint)
        for _ in range(3):
            service.tick(ses)
        ses.mailbox.put({"kind": "reset", "seed_kind": "egg"})
        service.tick(ses)
        # one step runs after the reset; back out its displacement bound
        r = np.linalg.norm(ses.sysb.x[0], axis=1)
        assert r.max() <= ses.cfg.seed_radius + ses.eps


class TestServeCli:
    def test_missing_checkpoint_exits_2(self, capsys):
        assert cli.main(["serve"]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_parse_bind(self):
        assert service.parse_bind("0.0.0.0:9000") == ("0.0.0.0", 9000)
        for bad in ("nohost", ":123", "h:", "h:abc", "h:70000"):
            with pytest.raises(InputError):
                service.parse_bind(bad)

    def test_serve_subprocess_streams_frames(self, checkpoint):
        websockets = pytest.importorskip("websockets.sync.client")
        import subprocess
        import sys
        proc = subprocess.Popen(
            [sys.executable, "-m", "npa.cli", "serve",
             "--checkpoint", checkpoint, "--task", "morph2d",
             "--target", "disc", "--bind", "127.0.0.1:0",
             "--steps-per-frame", "1", "--fps", "60"],
            stdout=subprocess.PIPE, text=True)
        try:
            line = json.loads(proc.stdout.readline())
            with websockets.connect(line["serving"], open_timeout=10) as ws:
                desc = json.loads(ws.recv(timeout=10))
                assert desc["type"] == "descriptor"
                msg = ws.recv(timeout=10)
                while not isinstance(msg, (bytes, bytearray)):
                    msg = ws.recv(timeout=10)
                assert bytes(msg[:4]) == b"NPAF"
        finally:
            proc.terminate()
            proc.wait(timeout=10)


def _recv_until(ws, want, timeout=10.0):
    """Read messages until one satisfies the predicate; returns it."""
    async def _inner():
        while True:
            msg = await ws.recv()
            if want(msg):
                return msg
    return asyncio.wait_for(_inner(), timeout)


class TestSocketRoundTrip:
    def test_descriptor_frames_and_errors_over_websocket(self, checkpoint):
        websockets = pytest.importorskip("websockets")
        ses = session_for(checkpoint, steps_per_frame=1)

        async def scenario():
            loop = asyncio.get_running_loop()
            ready = loop.create_future()
            server = asyncio.create_task(
                service.run_service(ses, "127.0.0.1", 0, fps=120.0,
                                    ready=ready))
            port = await asyncio.wait_for(ready, 10.0)
            uri = f"ws://127.0.0.1:{port}"
            async with websockets.connect(uri) as a, \
                    websockets.connect(uri) as b:
                da = json.loads(await _recv_until(
                    a, lambda m: isinstance(m, str)))
                assert da["type"] == "descriptor" and da["n"] == 32

                # same-index frames are byte-identical across clients
                frames_a, frames_b = {}, {}
                for ws, store in ((a, frames_a), (b, frames_b)):
                    while len(store) < 4:
                        m = await _recv_until(
                            ws, lambda m: isinstance(m, (bytes, bytearray)))
                        store[split_frame(bytes(m))["index"]] = bytes(m)
                shared = sorted(set(frames_a) & set(frames_b))
                assert shared
                for i in shared:
                    assert frames_a[i] == frames_b[i]

                # set_param echoes through a descriptor broadcast
                await a.send(json.dumps({"kind": "set_param", "name": "p",
                                         "value": 0.25}))
                echo = json.loads(await _recv_until(
                    b, lambda m: isinstance(m, str)
                    and json.loads(m).get("type") == "descriptor"))
                assert echo["params"]["p"] == 0.25

                # malformed input errors only the offending client
                await a.send("not json")
                err = json.loads(await _recv_until(
                    a, lambda m: isinstance(m, str)
                    and json.loads(m).get("type") == "error"))
                assert "JSON" in err["message"]
            server.cancel()
            try:
                await server
            except asyncio.CancelledError:
                pass

        asyncio.run(scenario())
