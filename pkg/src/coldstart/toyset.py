"""Bundled synthetic dataset: 200 users x 100 items with planted block
structure, so offline runs and the acceptance suite have a learnable corpus.

Users and items split into 4 aligned blocks (50 users x 25 items). Every user
draws most interactions inside their block and a few outside. Degrees are
bimodal on both sides: abundant users interact heavily (well above the
meta-split threshold), cold users sparsely; the first 15 items of each block
soak up most in-block mass while the last 10 stay rare.
"""

import numpy as np

from .data import Interaction

N_USERS = 200
N_ITEMS = 100
N_BLOCKS = 4
DEFAULT_SEED = 20240701


def make_toy_interactions(seed: int = DEFAULT_SEED):
    """Deterministic (user, item, timestamp) triples with planted blocks."""
    rng = np.random.default_rng(seed)
    upb = N_USERS // N_BLOCKS
    ipb = N_ITEMS // N_BLOCKS
    rows = []
    ts = 1_000_000
    for u in range(N_USERS):
        block = u // upb
        in_block = np.arange(block * ipb, (block + 1) * ipb)
        out_block = np.setdiff1d(np.arange(N_ITEMS), in_block)
        # first 15 items of the block are popular, last 10 rare
        weights = np.where(in_block % ipb < 15, 3.0, 0.6)
        weights = weights / weights.sum()
        abundant = (u % upb) < upb // 2  # first half of each block is abundant
        deg = int(rng.integers(16, 23)) if abundant else int(rng.integers(4, 8))
        n_in = max(1, int(round(deg * 0.9)))
        n_in = min(n_in, len(in_block))
        n_out = min(deg - n_in, len(out_block))
        items = np.concatenate([
            rng.choice(in_block, size=n_in, replace=False, p=weights),
            rng.choice(out_block, size=n_out, replace=False) if n_out > 0 else np.empty(0, dtype=np.int64),
        ]).astype(np.int64)
        order = rng.permutation(len(items))
        for j in order:
            rows.append(Interaction(u, int(items[j]), ts))
            ts += 1
    return rows


def write_toy_dataset(path, seed: int = DEFAULT_SEED) -> int:
    rows = make_toy_interactions(seed)
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, ts in rows:
            fh.write(f"{u}\t{i}\t{ts}\n")
    return len(rows)
