"""Evaluation metrics for multi-label and sequence labeling outputs."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def example_f1(pred_sets: Sequence[Iterable[int]], gold_sets: Sequence[Iterable[int]]) -> float:
    """Example-averaged F1; an example with empty prediction and empty gold scores 1."""
    if len(pred_sets) != len(gold_sets):
        raise ValueError(f"{len(pred_sets)} predictions for {len(gold_sets)} gold sets")
    if not pred_sets:
        return 0.0
    total = 0.0
    for pred, gold in zip(pred_sets, gold_sets):
        pred, gold = set(pred), set(gold)
        if not pred and not gold:
            total += 1.0
            continue
        hit = len(pred & gold)
        # 2PR/(P+R) simplifies to 2|p&g| / (|p| + |g|)
        total += 2.0 * hit / (len(pred) + len(gold))
    return total / len(pred_sets)


def _flatten_pairs(pred, gold):
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences for {len(gold)} gold sequences")
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError(f"sequence length mismatch: {len(p)} vs {len(g)}")
        yield p, g


def token_accuracy(pred, gold) -> float:
    """Fraction of positions where the predicted tag equals the gold tag.

    Accepts either one flat sequence or a list of sequences.
    """
    if len(pred) and not isinstance(pred[0], (list, tuple, np.ndarray)):
        pred, gold = [pred], [gold]
    correct = total = 0
    for p, g in _flatten_pairs(pred, gold):
        correct += sum(a == b for a, b in zip(p, g))
        total += len(g)
    return correct / total if total else 0.0


def bioes_chunks(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Extract (type, start, end) chunks from BIOES tags, inclusive ends.

    Ill-formed transitions close the open chunk and start a new one, so
    predictions that break the scheme still yield well-defined chunks.
    """
    chunks = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, label = tag.partition("-")
        continues = start is not None and label == kind and prefix in ("I", "E")
        if start is not None and not continues:
            chunks.add((kind, start, i - 1))
            start, kind = None, None
        if prefix == "O" or not label:
            continue
        if start is None:
            start, kind = i, label
        if prefix in ("E", "S"):
            chunks.add((kind, start, i))
            start, kind = None, None
    return chunks


def chunk_f1(pred, gold) -> tuple[float, float, float]:
    """Precision, recall and F1 over exact (type, span) chunk matches."""
    if len(pred) and isinstance(pred[0], str):
        pred, gold = [pred], [gold]
    n_pred = n_gold = n_hit = 0
    for p, g in _flatten_pairs(pred, gold):
        pc, gc = bioes_chunks(p), bioes_chunks(g)
        n_pred += len(pc)
        n_gold += len(gc)
        n_hit += len(pc & gc)
    precision = n_hit / n_pred if n_pred else 0.0
    recall = n_hit / n_gold if n_gold else 0.0
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
