"""Interaction logs, leave-one-out splits, batching and synthetic tasks."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import SequenceBatch

MIN_INTERACTIONS = 3


class DataError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences with dense ids in [1, num_items]."""

    sequences: list[list[int]]
    num_items: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)  # raw id of dense id j at index j - 1

    def __post_init__(self):
        if not self.user_ids:
            self.user_ids = [str(i) for i in range(len(self.sequences))]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(1, self.num_items + 1)]

    def __len__(self) -> int:
        return len(self.sequences)

    def encode_item(self, raw: str) -> int:
        return self.item_ids.index(raw) + 1

    def decode_item(self, dense: int) -> str:
        return self.item_ids[dense - 1]

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for user, seq in zip(self.user_ids, self.sequences):
                for t, item in enumerate(seq):
                    fh.write(f"{user}\t{self.decode_item(item)}\t{t}\n")


def ingest(path: str | Path, min_interactions: int = MIN_INTERACTIONS) -> InteractionDataset:
    """Read ``user<TAB>item<TAB>timestamp`` lines into a dataset.

    Sequences are sorted by timestamp (stable, so ties keep input order),
    users with fewer than ``min_interactions`` events are dropped and items
    are renumbered densely in order of first appearance among kept users.
    """
    events: dict[str, list[tuple[float, int, str]]] = {}
    count = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts[0], parts[1], parts[2]
            try:
                stamp = float(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            if not user or not item:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            events.setdefault(user, []).append((stamp, count, item))
            count += 1
    if not count:
        raise DataError(f"{path}: no interactions")

    item_map: dict[str, int] = {}
    sequences, users = [], []
    for user, evs in events.items():
        if len(evs) < min_interactions:
            continue
        evs.sort(key=lambda e: (e[0], e[1]))
        seq = []
        for _, _, item in evs:
            if item not in item_map:
                item_map[item] = len(item_map) + 1
            seq.append(item_map[item])
        sequences.append(seq)
        users.append(user)
    if not sequences:
        raise DataError(f"{path}: no user has at least {min_interactions} interactions")
    return InteractionDataset(sequences, len(item_map), users, list(item_map))


# ----------------------------------------------------------------------
# splits


@dataclass
class Split:
    """Context/target pairs; ``contexts[i]`` precedes ``targets[i]``."""

    contexts: list[list[int]]
    targets: list[int]


@dataclass
class TrainView:
    """Autoregressive training rows: inputs[i][t] predicts targets[i][t]."""

    inputs: list[list[int]]
    targets: list[list[int]]


@dataclass
class Splits:
    train: TrainView
    valid: Split
    test: Split


def leave_one_out(ds: InteractionDataset) -> Splits:
    train_in, train_tg = [], []
    valid, test = Split([], []), Split([], [])
    for seq in ds.sequences:
        if len(seq) < MIN_INTERACTIONS:
            raise DataError("leave-one-out needs sequences of length >= 3")
        test.contexts.append(seq[:-1])
        test.targets.append(seq[-1])
        valid.contexts.append(seq[:-2])
        valid.targets.append(seq[-2])
        # a length-3 sequence would leave no training pair; it keeps its first transition
        prefix = seq[: max(len(seq) - 2, 2)]
        train_in.append(prefix[:-1])
        train_tg.append(prefix[1:])
    return Splits(TrainView(train_in, train_tg), valid, test)


# ----------------------------------------------------------------------
# batching


def make_batch(inputs: list[list[int]], targets: list[list[int]] | list[int] | None, max_len: int) -> SequenceBatch:
    """Left-pad every row to ``max_len``, keeping the most recent items.

    The last real item always sits in the final column, so absolute
    positions count back from the prediction point.

    ``targets`` may be per-position lists (training) or a single next item per
    row, placed at the last position (evaluation).
    """
    width = max_len
    B = len(inputs)
    ids = np.zeros((B, width), dtype=np.int64)
    tg = np.zeros((B, width), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for i, seq in enumerate(inputs):
        seq = seq[-width:]
        n = len(seq)
        lengths[i] = n
        if n:
            ids[i, width - n:] = seq
        if targets is None:
            continue
        t = targets[i]
        if isinstance(t, (list, tuple, np.ndarray)):
            t = list(t)[-width:]
            if n:
                tg[i, width - n:] = t
        else:
            tg[i, width - 1] = t
    return SequenceBatch(ids, lengths, tg)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled epochs of row indices."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


# ----------------------------------------------------------------------
# synthetic tasks


def synth_copy_offset(k: int, num_users: int, vocab: int, length: int, seed: int) -> InteractionDataset:
    """Next item after step t equals the item at step t - k (1-based steps).

    Each sequence repeats a random block of ``k + 1`` items.
    """
    if k < 1:
        raise DataError(f"copy offset must be >= 1, got {k}")
    if length <= k:
        raise DataError(f"length {length} must exceed offset {k}")
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(num_users):
        block = rng.integers(1, vocab + 1, size=k + 1)
        seqs.append([int(block[t % (k + 1)]) for t in range(length)])
    return InteractionDataset(seqs, vocab)


def synth_position_parity(num_users: int, vocab: int, length: int, seed: int) -> InteractionDataset:
    """Next item is ``perm[t mod 2][last item]`` for two fixed random permutations."""
    if length < MIN_INTERACTIONS:
        raise DataError("length must be >= 3")
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(vocab) + 1 for _ in range(2)]
    seqs = []
    for _ in range(num_users):
        seq = [int(rng.integers(1, vocab + 1))]
        for t in range(1, length):
            seq.append(int(perms[(t - 1) % 2][seq[-1] - 1]))
        seqs.append(seq)
    return InteractionDataset(seqs, vocab)


def synth_positional(task: str, num_users: int, vocab: int, length: int, seed: int, k: int = 2) -> InteractionDataset:
    if task == "copy_offset":
        return synth_copy_offset(k, num_users, vocab, length, seed)
    if task == "position_parity":
        return synth_position_parity(num_users, vocab, length, seed)
    raise DataError(f"unknown synthetic task {task!r}")


def position_blind_bound(contexts: list[list[int]], k: int) -> float:
    """Best accuracy of any predictor that sees only the item counts of the
    context and its last item, on ``copy_offset(k)`` data.

    For each case every block of ``k + 1`` items drawn from the context's
    items is enumerated; blocks that reproduce the observed counts and last
    item are equally likely a priori, so the Bayes-optimal guess is the most
    common continuation and its success probability is its share.
    """
    period = k + 1
    total = 0.0
    for ctx in contexts:
        counts = Counter(ctx)
        n = len(ctx)
        continuations: Counter = Counter()
        for block in itertools.product(sorted(counts), repeat=period):
            if block[(n - 1) % period] != ctx[-1]:
                continue
            seq_counts = Counter(block[t % period] for t in range(n))
            if seq_counts == counts:
                continuations[block[n % period]] += 1
        if not continuations:
            continue
        best = max(continuations.values())
        total += best / sum(continuations.values())
    return total / len(contexts)
