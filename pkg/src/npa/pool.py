"""Sample pool for long-horizon persistence training.

Training draws most batch slots from previously rolled-out states instead
of fresh seeds, so the rule must keep its pattern alive over many more
steps than any single rollout covers. Drawn entries get an eps-ball of
their states zeroed on the way out, which is what teaches regeneration.
"""

import numpy as np

from .errors import InputError


class Pool:
    """Fixed-capacity reservoir of (positions, states, tag) entries.

    The tag is a small int riding along with each entry (the digit label
    for classification; unused for morphogenesis).
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise InputError(f"pool capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.x = []
        self.S = []
        self.tag = []

    def __len__(self):
        return len(self.x)

    def add(self, x, S, tag, rng):
        """Insert one entry: append below capacity, else evict a random one."""
        if x.ndim != 2 or S.ndim != 2 or x.shape[0] != S.shape[0]:
            raise InputError(
                f"pool entries are (N, D)/(N, C) pairs, got {x.shape}, {S.shape}")
        if len(self.x) < self.capacity:
            self.x.append(x)
            self.S.append(S)
            self.tag.append(int(tag))
        else:
            i = int(rng.integers(self.capacity))
            self.x[i] = x
            self.S[i] = S
            self.tag[i] = int(tag)


def damage_ball(x, S, rng, eps):
    """Zero the states of every particle within eps of a random particle."""
    i = int(rng.integers(x.shape[0]))
    hit = np.linalg.norm(x - x[i], axis=1) <= eps
    out = S.copy()
    out[hit] = 0
    return out


def sample_with_damage(pool, rng, batch, fresh, eps, fresh_ratio=None):
    """Assemble a training batch from the pool plus fresh seeds.

    fresh is a callable rng -> (x (N, D), S (N, C), tag). Each slot is a
    fresh seed with probability fresh_ratio (default 1/batch) or when the
    pool runs out of distinct entries; pool draws are without replacement
    and receive eps-ball state damage. Returns (x (B, N, D), S (B, N, C),
    tags (B,), slots (B,)) with slot -1 marking fresh seeds.
    """
    if batch < 1:
        raise InputError(f"batch must be >= 1, got {batch}")
    if fresh_ratio is None:
        fresh_ratio = 1.0 / batch
    take_fresh = rng.random(batch) < fresh_ratio
    n_pool = min(int(np.sum(~take_fresh)), len(pool))
    order = rng.permutation(len(pool))[:n_pool] if n_pool else np.empty(0, int)
    xs, Ss, tags, slots = [], [], [], []
    drawn = iter(order)
    for b in range(batch):
        slot = -1 if take_fresh[b] else next(drawn, -1)
        if slot < 0:
            x, S, tag = fresh(rng)
        else:
            x = pool.x[slot].copy()
            S = damage_ball(pool.x[slot], pool.S[slot], rng, eps)
            tag = pool.tag[slot]
        xs.append(x)
        Ss.append(S)
        tags.append(tag)
        slots.append(int(slot))
    try:
        x = np.stack(xs)
        S = np.stack(Ss)
    except ValueError as e:
        raise InputError(
            "pool entries and fresh seeds must share (N, D, C)") from e
    return x, S, np.array(tags), np.array(slots)


def write_back(pool, slots, x, S, tags, rng):
    """Store rolled-out batch results: fresh slots insert, drawn slots update."""
    for b, slot in enumerate(slots):
        if slot < 0:
            pool.add(x[b].copy(), S[b].copy(), tags[b], rng)
        else:
            pool.x[slot] = x[b].copy()
            pool.S[slot] = S[b].copy()
            pool.tag[slot] = int(tags[b])
