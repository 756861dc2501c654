"""Pair-balanced minibatches.

Every fake in the generated corpus has one live counterpart per identity
at most, so plain shuffling gives batches that are almost all fake. Here
each batch is half fakes (cycling through a permutation) and half lives,
each live drawn from the same identity as the fake it sits next to.
"""

from __future__ import annotations

from typing import Iterator

import torch


def balanced_batches(
    is_fake: torch.Tensor,
    identities: torch.Tensor | None,
    batch_size: int,
    gen: torch.Generator,
) -> Iterator[torch.Tensor]:
    """Yield ``ceil(n / batch_size)`` index batches per call (one epoch).

    Falls back to a plain shuffle when either class is absent or the batch
    cannot hold a pair.
    """
    is_fake = torch.as_tensor(is_fake).bool().reshape(-1)
    n = len(is_fake)
    fakes = torch.nonzero(is_fake).flatten()
    lives = torch.nonzero(~is_fake).flatten()
    if len(fakes) == 0 or len(lives) == 0 or batch_size < 2:
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]
        return
    if identities is None:
        identities = torch.zeros(n, dtype=torch.long)
    identities = torch.as_tensor(identities).reshape(-1)
    by_id: dict[int, torch.Tensor] = {}
    for i in torch.unique(identities[lives]).tolist():
        by_id[i] = lives[identities[lives] == i]

    half = batch_size // 2
    n_steps = -(-n // batch_size)
    order = fakes[torch.randperm(len(fakes), generator=gen)]
    cursor = 0
    for _ in range(n_steps):
        take = torch.arange(cursor, cursor + half) % len(order)
        cursor = (cursor + half) % len(order)
        f = order[take]
        partners = []
        for j in f.tolist():
            pool = by_id.get(int(identities[j]), lives)
            partners.append(pool[torch.randint(len(pool), (1,), generator=gen)])
        yield torch.cat([f, torch.cat(partners)])
