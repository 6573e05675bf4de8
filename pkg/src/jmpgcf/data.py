"""Interaction dataset loading and train/validation splitting.

The on-disk format is the adjacency-list text format used by the public
check-in / review benchmark datasets: one user per line, whitespace
separated ASCII decimals ``uid iid1 iid2 ...``.  A line holding only a
uid declares a user with an empty list.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DatasetFormatError",
    "InteractionDataset",
    "load_dataset",
    "save_dataset",
    "split_validation",
]

_ITEM_DTYPE = np.int64


class DatasetFormatError(ValueError):
    """Raised when an interaction file violates the expected format."""


def _empty_items() -> np.ndarray:
    return np.empty(0, dtype=_ITEM_DTYPE)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """ID-mapped user->item adjacency lists for a train/test split.

    ``train[u]`` and ``test[u]`` are strictly sorted, duplicate-free
    integer arrays, disjoint per user.  Instances are treated as
    immutable and are safe to share across threads.
    """

    num_users: int
    num_items: int
    train: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]
    num_train_interactions: int

    def __post_init__(self):
        if len(self.train) != self.num_users or len(self.test) != self.num_users:
            raise ValueError("adjacency list count does not match num_users")
        total = sum(len(items) for items in self.train)
        if total != self.num_train_interactions:
            raise ValueError("num_train_interactions does not match train lists")

    @staticmethod
    def from_lists(num_users, num_items, train, test=None):
        """Build a dataset from per-user item iterables, validating invariants."""
        train_arrays = [_as_item_array(items, num_items, u) for u, items in enumerate(train)]
        if test is None:
            test_arrays = [_empty_items() for _ in range(num_users)]
        else:
            test_arrays = [_as_item_array(items, num_items, u) for u, items in enumerate(test)]
        while len(train_arrays) < num_users:
            train_arrays.append(_empty_items())
        while len(test_arrays) < num_users:
            test_arrays.append(_empty_items())
        for u in range(num_users):
            overlap = np.intersect1d(train_arrays[u], test_arrays[u])
            if overlap.size:
                raise DatasetFormatError(
                    f"user {u}: items {overlap.tolist()} appear in both train and test"
                )
        return InteractionDataset(
            num_users=num_users,
            num_items=num_items,
            train=tuple(train_arrays),
            test=tuple(test_arrays),
            num_train_interactions=sum(len(a) for a in train_arrays),
        )


def _as_item_array(items, num_items, user) -> np.ndarray:
    arr = np.unique(np.asarray(list(items), dtype=_ITEM_DTYPE))
    if arr.size and (arr[0] < 0 or arr[-1] >= num_items):
        raise DatasetFormatError(f"user {user}: item index out of range [0, {num_items})")
    return arr


def _parse_interaction_file(path):
    """Parse one adjacency-list file into {uid: sorted unique item array}."""
    lists: dict[int, np.ndarray] = {}
    max_item = -1
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                values = [int(tok) for tok in tokens]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed token ({exc})") from None
            if any(v < 0 for v in values):
                raise DatasetFormatError(f"{path}:{lineno}: negative index")
            uid, items = values[0], values[1:]
            if uid in lists:
                raise DatasetFormatError(f"{path}:{lineno}: user {uid} appears on multiple lines")
            lists[uid] = np.unique(np.asarray(items, dtype=_ITEM_DTYPE))
            if items:
                max_item = max(max_item, max(items))
    return lists, max_item


def _write_mapping(path, mapping):
    with open(path, "w", encoding="ascii") as fh:
        for original, new in mapping:
            fh.write(f"{original} {new}\n")


def load_dataset(train_path, test_path, remap=False, mapping_dir=None) -> InteractionDataset:
    """Load train/test interaction files into an :class:`InteractionDataset`.

    ``num_users``/``num_items`` are one past the largest index seen in
    either file.  Users that occur only in the test file are rejected:
    cold-start users have no training signal and are outside the
    evaluation protocol.

    With ``remap=True`` non-contiguous IDs are densely renumbered (in
    sorted order of the original IDs) and ``user_id_map.txt`` /
    ``item_id_map.txt`` with lines ``original_id new_id`` are written to
    ``mapping_dir`` (default: directory of ``train_path``).
    """
    for path in (train_path, test_path):
        if not os.path.exists(path):
            raise DatasetFormatError(f"interaction file not found: {path}")
    train_lists, train_max_item = _parse_interaction_file(train_path)
    test_lists, test_max_item = _parse_interaction_file(test_path)

    only_test = sorted(set(test_lists) - set(train_lists))
    if only_test:
        raise DatasetFormatError(
            f"{test_path}: users {only_test[:10]} appear only in the test file"
        )

    if remap:
        user_ids = sorted(train_lists)
        item_ids = sorted(
            set().union(*[set(v.tolist()) for v in train_lists.values()] or [set()])
            | set().union(*[set(v.tolist()) for v in test_lists.values()] or [set()])
        )
        user_map = {orig: new for new, orig in enumerate(user_ids)}
        item_map = {orig: new for new, orig in enumerate(item_ids)}
        train_lists = {
            user_map[u]: np.sort(np.array([item_map[i] for i in v], dtype=_ITEM_DTYPE))
            for u, v in train_lists.items()
        }
        test_lists = {
            user_map[u]: np.sort(np.array([item_map[i] for i in v], dtype=_ITEM_DTYPE))
            for u, v in test_lists.items()
        }
        out_dir = mapping_dir or os.path.dirname(os.path.abspath(train_path))
        _write_mapping(os.path.join(out_dir, "user_id_map.txt"), user_map.items())
        _write_mapping(os.path.join(out_dir, "item_id_map.txt"), item_map.items())
        num_users = len(user_ids)
        num_items = len(item_ids)
    else:
        num_users = 1 + max(train_lists, default=-1)
        num_items = 1 + max(train_max_item, test_max_item)

    train = [train_lists.get(u, _empty_items()) for u in range(num_users)]
    test = [test_lists.get(u, _empty_items()) for u in range(num_users)]
    for u in range(num_users):
        overlap = np.intersect1d(train[u], test[u])
        if overlap.size:
            raise DatasetFormatError(
                f"user {u}: items {overlap.tolist()} appear in both train and test"
            )
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=tuple(train),
        test=tuple(test),
        num_train_interactions=sum(len(a) for a in train),
    )


def save_dataset(ds: InteractionDataset, train_path, test_path):
    """Write a dataset back to the adjacency-list text format.

    Every user gets a line in the train file (possibly just the uid) so
    that the user count survives a reload; the test file only lists
    users with held-out items.
    """
    with open(train_path, "w", encoding="ascii") as fh:
        for u in range(ds.num_users):
            items = " ".join(str(i) for i in ds.train[u].tolist())
            fh.write(f"{u} {items}\n" if items else f"{u}\n")
    with open(test_path, "w", encoding="ascii") as fh:
        for u in range(ds.num_users):
            if len(ds.test[u]):
                items = " ".join(str(i) for i in ds.test[u].tolist())
                fh.write(f"{u} {items}\n")


def split_validation(ds: InteractionDataset, fraction, seed):
    """Carve a per-user validation holdout out of the training lists.

    For each user, ``ceil(fraction * |train[u]|)`` items are moved
    (uniformly at random, deterministic for a fixed seed) into the
    holdout, except that a user with a single training item keeps it.

    Returns ``(main, holdout)``.  Both share the reduced train lists;
    ``main.test`` keeps the original test split while ``holdout.test``
    holds the moved items, so the holdout can be evaluated exactly like
    a test split.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    remaining = []
    moved = []
    for u in range(ds.num_users):
        items = ds.train[u]
        if len(items) <= 1:
            remaining.append(items)
            moved.append(_empty_items())
            continue
        n_move = min(math.ceil(fraction * len(items)), len(items) - 1)
        picked = rng.choice(items, size=n_move, replace=False)
        picked = np.sort(picked)
        remaining.append(np.setdiff1d(items, picked))
        moved.append(picked)
    total = sum(len(a) for a in remaining)
    main = InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        train=tuple(remaining),
        test=ds.test,
        num_train_interactions=total,
    )
    holdout = InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        train=tuple(remaining),
        test=tuple(moved),
        num_train_interactions=total,
    )
    return main, holdout
