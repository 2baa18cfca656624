"""Sample pool tests: capacity, damage, batch assembly, write-back."""

import numpy as np
import pytest

from npa.errors import InputError
from npa.pool import Pool, damage_ball, sample_with_damage, write_back


def fresh_factory(n=8, d=2, c=4, tag=0):
    def fresh(rng):
        return (rng.random((n, d)).astype(np.float32),
                np.zeros((n, c), np.float32), tag)
    return fresh


class TestPool:
    def test_fills_to_capacity_then_evicts(self):
        rng = np.random.default_rng(0)
        pool = Pool(4)
        for i in range(9):
            pool.add(np.full((2, 2), i, np.float32), np.zeros((2, 3), np.float32),
                     i, rng)
            assert len(pool) <= 4
        assert len(pool) == 4
        # later inserts landed somewhere: some tag >= 4 present
        assert max(pool.tag) >= 4

    def test_validation(self):
        with pytest.raises(InputError):
            Pool(0)
        with pytest.raises(InputError):
            Pool(2).add(np.zeros((3, 2)), np.zeros((4, 2)), 0,
                        np.random.default_rng(0))


class TestDamage:
    def test_ball_is_zeroed_others_untouched(self):
        rng = np.random.default_rng(1)
        x = rng.random((64, 2))
        S = rng.random((64, 5)) + 1.0
        out = damage_ball(x, S, np.random.default_rng(2), eps=0.2)
        hit = ~out.any(axis=1)
        assert hit.any()
        np.testing.assert_array_equal(out[~hit], S[~hit])
        # the zeroed set is exactly an eps-ball around one of its members
        centers = np.nonzero(hit)[0]
        ok = False
        for i in centers:
            d = np.linalg.norm(x - x[i], axis=1)
            ok = ok or np.array_equal(hit, d <= 0.2)
        assert ok

    def test_huge_radius_zeroes_everything(self):
        rng = np.random.default_rng(3)
        x = rng.random((16, 2))
        S = rng.random((16, 3))
        out = damage_ball(x, S, rng, eps=10.0)
        assert not out.any()

    def test_source_not_mutated(self):
        rng = np.random.default_rng(4)
        x = rng.random((8, 2))
        S = np.ones((8, 2))
        damage_ball(x, S, rng, eps=10.0)
        assert S.all()


class TestSampling:
    def test_empty_pool_gives_all_fresh(self):
        pool = Pool(16)
        x, S, tags, slots = sample_with_damage(
            pool, np.random.default_rng(5), 4, fresh_factory(tag=7), eps=0.1)
        assert x.shape == (4, 8, 2) and S.shape == (4, 8, 4)
        assert slots.tolist() == [-1, -1, -1, -1]
        assert tags.tolist() == [7] * 4

    def test_pool_draws_are_damaged_and_distinct(self):
        rng = np.random.default_rng(6)
        pool = Pool(8)
        for i in range(8):
            pool.add(rng.random((8, 2)).astype(np.float32),
                     np.ones((8, 4), np.float32), i, rng)
        x, S, tags, slots = sample_with_damage(
            pool, np.random.default_rng(7), 6, fresh_factory(), eps=0.05,
            fresh_ratio=0.0)
        assert (slots >= 0).all()
        assert len(set(slots.tolist())) == 6
        for b, slot in enumerate(slots):
            np.testing.assert_array_equal(x[b], pool.x[slot])
            assert (~S[b].any(axis=1)).any()    # some particle got zeroed
            assert tags[b] == pool.tag[slot]

    def test_fresh_ratio_one_ignores_pool(self):
        rng = np.random.default_rng(8)
        pool = Pool(4)
        pool.add(np.zeros((8, 2), np.float32), np.ones((8, 4), np.float32), 0, rng)
        _, S, _, slots = sample_with_damage(
            pool, rng, 3, fresh_factory(), eps=0.1, fresh_ratio=1.0)
        assert slots.tolist() == [-1, -1, -1]
        assert not S.any()

    def test_pool_smaller_than_batch_tops_up_with_fresh(self):
        rng = np.random.default_rng(9)
        pool = Pool(16)
        pool.add(np.zeros((8, 2), np.float32), np.zeros((8, 4), np.float32), 1, rng)
        _, _, _, slots = sample_with_damage(
            pool, rng, 5, fresh_factory(), eps=0.1, fresh_ratio=0.0)
        assert (slots == -1).sum() == 4 and (slots == 0).sum() == 1

    def test_default_fresh_ratio_is_one_over_batch(self):
        # over many draws from a full pool, fresh slots average batch * 1/batch = 1
        rng = np.random.default_rng(10)
        pool = Pool(64)
        for i in range(64):
            pool.add(np.zeros((8, 2), np.float32), np.zeros((8, 4), np.float32),
                     i, rng)
        fresh_counts = [
            (sample_with_damage(pool, rng, 8, fresh_factory(), 0.1)[3] == -1).sum()
            for _ in range(300)]
        assert 0.7 < np.mean(fresh_counts) < 1.3

    def test_mismatched_shapes_rejected(self):
        rng = np.random.default_rng(11)
        pool = Pool(4)
        pool.add(np.zeros((4, 2), np.float32), np.zeros((4, 4), np.float32), 0, rng)
        with pytest.raises(InputError, match="share"):
            sample_with_damage(pool, rng, 2, fresh_factory(n=8), eps=0.1,
                               fresh_ratio=0.0)


class TestWriteBack:
    def test_updates_drawn_and_appends_fresh(self):
        rng = np.random.default_rng(12)
        pool = Pool(8)
        for i in range(3):
            pool.add(np.zeros((4, 2), np.float32), np.zeros((4, 3), np.float32),
                     i, rng)
        slots = np.array([-1, 1, 2])
        x = np.arange(3 * 4 * 2, dtype=np.float32).reshape(3, 4, 2)
        S = np.arange(3 * 4 * 3, dtype=np.float32).reshape(3, 4, 3)
        write_back(pool, slots, x, S, np.array([9, 8, 7]), rng)
        assert len(pool) == 4
        np.testing.assert_array_equal(pool.x[1], x[1])
        np.testing.assert_array_equal(pool.S[2], S[2])
        assert pool.tag[1] == 8 and pool.tag[2] == 7
        assert pool.tag[3] == 9     # fresh slot appended
        # stored arrays are copies, not views into the batch
        x[1, 0, 0] = 999.0
        assert pool.x[1][0, 0] != 999.0

    def test_never_exceeds_capacity(self):
        rng = np.random.default_rng(13)
        pool = Pool(2)
        for _ in range(5):
            write_back(pool, np.array([-1, -1]),
                       np.zeros((2, 4, 2), np.float32),
                       np.zeros((2, 4, 3), np.float32), np.array([0, 0]), rng)
            assert len(pool) <= 2
