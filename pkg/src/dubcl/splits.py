"""Title-level dataset splits shared by pretraining and probe evaluation.

Partitioning at title granularity prevents snippet leakage between train,
validation, and test: all shots of a title land in the same split. The
permutation is keyed by the corpus seed, so a given dataset always splits
the same way.
"""

from __future__ import annotations

import numpy as np

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def title_splits(manifest, fractions=SPLIT_FRACTIONS):
    """(train_ids, val_ids, test_ids) over manifest titles."""
    ids = sorted(t["title_id"] for t in manifest.titles)
    rng = np.random.default_rng(np.random.SeedSequence(manifest.seed, spawn_key=(4,)))
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n = len(perm)
    n_train = int(round(n * fractions[0]))
    n_val = max(1, int(round(n * fractions[1]))) if n > 2 else 0
    train = frozenset(perm[:n_train])
    val = frozenset(perm[n_train : n_train + n_val])
    test = frozenset(perm[n_train + n_val :])
    return train, val, test


def split_of_title(manifest, title_id):
    train, val, test = title_splits(manifest)
    if title_id in train:
        return "train"
    if title_id in val:
        return "val"
    return "test"
