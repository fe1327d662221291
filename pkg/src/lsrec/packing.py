"""First-fit sequence packing into fixed-length rows.

Attention inside a row is block-diagonal (a token sees only earlier tokens of
its own example) and positions restart at 0 for each example, so a packed
example produces the same logits as the example run alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import segment_mask
from .promptgen import TrainingExample

__all__ = ["PackedBatch", "first_fit", "build_rows", "pack"]


@dataclass(frozen=True)
class PackedBatch:
    """Rows of packed examples.

    ``targets[r, j]`` is the next token of the same example and
    ``loss_mask[r, j]`` says whether position ``j`` is trained to predict it.
    ``spans`` lists ``(row, start, length, example_index)`` per example.
    Padding positions form one trailing segment per row with mask 0.
    """

    tokens: np.ndarray
    positions: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray
    segment_ids: np.ndarray
    spans: tuple[tuple[int, int, int, int], ...]

    @property
    def attention_mask(self) -> np.ndarray:
        return segment_mask(self.segment_ids)

    @property
    def num_rows(self) -> int:
        return self.tokens.shape[0]


def first_fit(lengths: Sequence[int], row_length: int) -> list[list[int]]:
    """Assign items to the first row with room, in input order.

    A max-segment-tree over remaining capacities makes each placement
    O(log n). Returns the item indices of each row.
    """
    n = len(lengths)
    if n == 0:
        return []
    size = 1
    while size < n:
        size *= 2
    tree = np.full(2 * size, row_length, dtype=np.int64)
    rows: list[list[int]] = []
    for i, length in enumerate(lengths):
        if length > row_length:
            raise ValueError(f"example of length {length} exceeds row length {row_length}")
        node = 1
        while node < size:
            node = 2 * node if tree[2 * node] >= length else 2 * node + 1
        r = node - size
        if r == len(rows):
            rows.append([])
        rows[r].append(i)
        tree[node] -= length
        node //= 2
        while node:
            tree[node] = max(tree[2 * node], tree[2 * node + 1])
            node //= 2
    return rows


def build_rows(
    seqs: Sequence[Sequence[int]],
    masks: Sequence[Sequence[int]] | None,
    row_assign: Sequence[Sequence[int]],
    row_length: int,
    pad_id: int = 0,
) -> PackedBatch:
    b = len(row_assign)
    tokens = np.full((b, row_length), pad_id, dtype=np.int64)
    positions = np.zeros((b, row_length), dtype=np.int64)
    loss_mask = np.zeros((b, row_length), dtype=np.int8)
    targets = np.zeros((b, row_length), dtype=np.int64)
    seg = np.zeros((b, row_length), dtype=np.int64)
    spans = []
    for r, idxs in enumerate(row_assign):
        off = 0
        for s, i in enumerate(idxs):
            toks = np.asarray(seqs[i], dtype=np.int64)
            n = len(toks)
            tokens[r, off : off + n] = toks
            positions[r, off : off + n] = np.arange(n)
            seg[r, off : off + n] = s
            targets[r, off : off + n - 1] = toks[1:]
            if masks is not None:
                loss_mask[r, off : off + n - 1] = np.asarray(masks[i][1:], dtype=np.int8)
            spans.append((r, off, n, i))
            off += n
        seg[r, off:] = len(idxs)
        positions[r, off:] = np.arange(row_length - off)
    return PackedBatch(tokens, positions, loss_mask, targets, seg, tuple(spans))


def pack(
    examples: Iterable[TrainingExample],
    row_length: int,
    batch_rows: int | None = None,
    pad_id: int = 0,
) -> list[PackedBatch]:
    """First-fit pack examples into rows; group rows into batches.

    With ``batch_rows=None`` all rows go into one batch. No example is split.
    """
    examples = list(examples)
    rows = first_fit([len(e) for e in examples], row_length)
    if batch_rows is None:
        batch_rows = max(len(rows), 1)
    toks = [e.tokens for e in examples]
    masks = [e.loss_mask for e in examples]
    return [
        build_rows(toks, masks, rows[i : i + batch_rows], row_length, pad_id)
        for i in range(0, len(rows), batch_rows)
    ]
