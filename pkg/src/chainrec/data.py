"""Interaction ingestion, leave-one-out splitting and transition statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse

from .core import DataError, InteractionDataset, Rng


def upward_close(ds: InteractionDataset) -> InteractionDataset:
    """Add every level-k pair to all lower levels so positives(k+1) <= positives(k)."""
    levels = [m.copy() for m in ds.levels]
    for k in range(ds.K - 2, -1, -1):
        levels[k] = (levels[k] + levels[k + 1]).astype(bool)
    return ds.copy_with_levels(levels)


def load_interactions(path, K: Optional[int] = None) -> InteractionDataset:
    """Read ``user<TAB>item<TAB>level`` lines into a closed, deduplicated dataset.

    Original IDs are remapped to dense indices in ascending numeric order;
    the mapping is kept on ``user_ids`` / ``item_ids`` (see ``save_id_map``).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"interaction file not found: {path}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            u, v, k = (int(f) for f in fields)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if k < 1 or (K is not None and k > K):
            raise DataError(f"{path}:{lineno}: level {k} outside [1, {K if K is not None else 'K'}]")
        rows.append((u, v, k))
    if K is None:
        K = max((r[2] for r in rows), default=1)
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    user_ids = np.unique(arr[:, 0])
    item_ids = np.unique(arr[:, 1])
    uidx = np.searchsorted(user_ids, arr[:, 0])
    vidx = np.searchsorted(item_ids, arr[:, 1])
    pairs = [np.stack([uidx[arr[:, 2] == k], vidx[arr[:, 2] == k]], axis=1) for k in range(1, K + 1)]
    ds = InteractionDataset.from_pairs(len(user_ids), len(item_ids), pairs,
                                       user_ids=user_ids.tolist(), item_ids=item_ids.tolist())
    return upward_close(ds)


def write_interactions(ds: InteractionDataset, path) -> None:
    """Write the top level at which each pair is observed (closure restores the rest)."""
    lines = []
    top = {}
    for k in range(ds.K):
        for u, v in ds.pairs(k):
            top[(int(u), int(v))] = k + 1
    for (u, v), k in sorted(top.items()):
        lines.append(f"{ds.user_ids[u]}\t{ds.item_ids[v]}\t{k}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def save_id_map(ds: InteractionDataset, path) -> None:
    doc = {"users": {str(o): i for i, o in enumerate(ds.user_ids)},
           "items": {str(o): i for i, o in enumerate(ds.item_ids)}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def drop_levels(ds: InteractionDataset, drop) -> InteractionDataset:
    """Erase the behavior distinction of the given 1-based levels.

    A dropped level keeps only the pairs of the level above it, so the level
    structure (and containment) survives while the dropped behavior carries
    no information of its own. Lower levels are unchanged.
    """
    levels = list(ds.levels)
    for k in sorted(set(drop), reverse=True):
        if not 1 <= k < ds.K:
            raise ValueError(f"can only drop auxiliary levels 1..{ds.K - 1}, got {k}")
        levels[k - 1] = levels[k].copy()
    return ds.copy_with_levels(levels)


HOLDOUT_MODES = ("target", "all")


@dataclass
class SplitDataset:
    train: InteractionDataset
    test_items: np.ndarray  # -1 where the user has no held-out item
    valid_items: np.ndarray
    holdout: str = "target"  # levels the held-out pairs are removed from

    def test_users(self) -> np.ndarray:
        return np.flatnonzero(self.test_items >= 0)

    def valid_users(self) -> np.ndarray:
        return np.flatnonzero(self.valid_items >= 0)

    def to_json(self) -> dict:
        return {"num_users": self.train.num_users, "num_items": self.train.num_items, "holdout": self.holdout,
                "test": {str(u): int(self.test_items[u]) for u in self.test_users()},
                "valid": {str(u): int(self.valid_items[u]) for u in self.valid_users()}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


MIN_TARGET_FOR_SPLIT = 3


def leave_one_out_split(ds: InteractionDataset, rng: Rng, holdout: str = "target") -> SplitDataset:
    """Hold out one test and one validation target-level item per eligible user.

    With ``holdout="target"`` held-out pairs leave the train set at the
    target level only and their lower-level records stay as auxiliary
    signal; ``"all"`` removes them from every level.
    """
    K = ds.K
    test = np.full(ds.num_users, -1, dtype=np.int64)
    valid = np.full(ds.num_users, -1, dtype=np.int64)
    for u in range(ds.num_users):
        items = ds.user_items(K - 1, u)
        if len(items) < MIN_TARGET_FOR_SPLIT:
            continue
        pick = rng.gen.choice(len(items), size=2, replace=False)
        test[u], valid[u] = items[pick[0]], items[pick[1]]
    return apply_split(ds, test, valid, holdout)


def apply_split(ds: InteractionDataset, test: np.ndarray, valid: np.ndarray, holdout: str = "target") -> SplitDataset:
    if holdout not in HOLDOUT_MODES:
        raise ValueError(f"holdout must be one of {HOLDOUT_MODES}")
    K = ds.K
    held = []
    for arr in (test, valid):
        users = np.flatnonzero(arr >= 0)
        held.append(np.stack([users, arr[users]], axis=1))
    held = np.concatenate(held)
    shape = (ds.num_users, ds.num_items)
    held_m = sparse.csr_matrix((np.ones(len(held), dtype=np.int8), (held[:, 0], held[:, 1])), shape=shape)
    top = ds.levels[K - 1]
    if held_m.multiply(top).nnz != len(held):
        raise DataError("held-out pairs must be distinct target-level positives")
    levels = list(ds.levels)
    for k in range(K) if holdout == "all" else [K - 1]:
        m = levels[k].astype(np.int8) - held_m
        m.eliminate_zeros()
        levels[k] = m.astype(bool)
    return SplitDataset(ds.copy_with_levels(levels), np.asarray(test), np.asarray(valid), holdout)


def load_split(ds: InteractionDataset, path) -> SplitDataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("num_users") != ds.num_users or doc.get("num_items") != ds.num_items:
        raise DataError(f"split file {path} does not match the dataset shape")
    test = np.full(ds.num_users, -1, dtype=np.int64)
    valid = np.full(ds.num_users, -1, dtype=np.int64)
    for u, v in doc["test"].items():
        test[int(u)] = v
    for u, v in doc["valid"].items():
        valid[int(u)] = v
    return apply_split(ds, test, valid, doc.get("holdout", "target"))


@dataclass
class EmpiricalTransition:
    p_hat: np.ndarray  # (K-1, V)
    support: np.ndarray  # (K-1, V) level-k positive counts
    defined: np.ndarray  # support > 0


def estimate_transitions(ds: InteractionDataset) -> EmpiricalTransition:
    """Per-item fraction of level-k users who also reached level k+1."""
    K, V = ds.K, ds.num_items
    p_hat = np.zeros((max(K - 1, 0), V))
    support = np.zeros((max(K - 1, 0), V), dtype=np.int64)
    for k in range(K - 1):
        lo = ds.levels[k]
        both = lo.multiply(ds.levels[k + 1])
        n_lo = np.asarray(lo.sum(axis=0)).ravel().astype(np.int64)
        n_both = np.asarray(both.sum(axis=0)).ravel().astype(np.int64)
        support[k] = n_lo
        np.divide(n_both, n_lo, out=p_hat[k], where=n_lo > 0)
    return EmpiricalTransition(p_hat, support, support > 0)


def sparse_user_subset(ds: InteractionDataset, lo: int, hi: int) -> set:
    """Users whose target-level positive count lies in ``[lo, hi]``."""
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    counts = ds.user_counts(ds.K - 1)
    return set(np.flatnonzero((counts >= lo) & (counts <= hi)).tolist())
