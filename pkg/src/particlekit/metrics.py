"""Instance-segmentation evaluation: voxel, match, and instance F1 scores
plus merger/splitter analysis.

Three confusion-matrix views feed the F1 variants: over all voxels, over
matched/mismatched particles (a match needs pairwise voxel F1 of at least
0.1), and over the voxels of each matched instance. Mergers and splitters
are groups of reference (resp. predicted) particles whose plurality-overlap
counterpart coincides; their ratios are normalized by the reference particle
count so methods predicting different particle numbers stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .volume import LabelVolume

MATCH_MIN_F1 = 0.1


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion matrix counts must be non-negative")

    def f1(self, empty_value: float = 1.0) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else empty_value


@dataclass(frozen=True)
class MatchSet:
    """One-to-one instance matching with pairwise F1 scores."""

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_pred: tuple[int, ...]
    unmatched_ref: tuple[int, ...]


@dataclass(frozen=True)
class MetricsReport:
    f1_voxel: float
    f1_match: float
    f1_instance: float
    merger_ratio: float
    splitter_ratio: float
    mergers: tuple[tuple[int, ...], ...]
    splitters: tuple[tuple[int, ...], ...]
    particle_count: int

    def to_dict(self) -> dict:
        return {
            "f1_voxel": self.f1_voxel,
            "f1_match": self.f1_match,
            "f1_instance": self.f1_instance,
            "merger_ratio": self.merger_ratio,
            "splitter_ratio": self.splitter_ratio,
            "mergers": [list(g) for g in self.mergers],
            "splitters": [list(g) for g in self.splitters],
            "particle_count": self.particle_count,
        }


def _as_array(vol) -> np.ndarray:
    return vol.labels if isinstance(vol, LabelVolume) else np.asarray(vol)


def _check_shapes(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ValidationError(f"prediction shape {pred.shape} != reference shape {ref.shape}")


class _OverlapTable:
    """Sparse pairwise voxel-overlap counts between two labelings."""

    def __init__(self, pred: np.ndarray, ref: np.ndarray):
        sel = (pred > 0) | (ref > 0)
        p = pred[sel].astype(np.int64)
        r = ref[sel].astype(np.int64)
        stride = int(ref.max(initial=0)) + 1
        keys, counts = np.unique(p * stride + r, return_counts=True)
        self.pairs = {(int(k // stride), int(k % stride)): int(c) for k, c in zip(keys, counts)}
        self.pred_sizes: dict[int, int] = {}
        self.ref_sizes: dict[int, int] = {}
        for (pid, rid), c in self.pairs.items():
            if pid > 0:
                self.pred_sizes[pid] = self.pred_sizes.get(pid, 0) + c
            if rid > 0:
                self.ref_sizes[rid] = self.ref_sizes.get(rid, 0) + c

    def positive_pairs(self):
        for (pid, rid), c in self.pairs.items():
            if pid > 0 and rid > 0:
                yield pid, rid, c


def f1_voxel(pred, ref) -> float:
    """Foreground-vs-background F1 (Dice) over all voxels."""
    pred, ref = _as_array(pred), _as_array(ref)
    _check_shapes(pred, ref)
    p = pred > 0
    r = ref > 0
    tp = int((p & r).sum())
    fp = int((p & ~r).sum())
    fn = int((~p & r).sum())
    return ConfusionMatrix(tp, fp, fn).f1(empty_value=1.0)


def match_instances(pred, ref) -> MatchSet:
    """Greedy one-to-one matching by descending pairwise F1.

    Candidate pairs need nonzero overlap and pairwise F1 >= 0.1. Ties are
    broken by ascending (reference id, predicted id).
    """
    pred, ref = _as_array(pred), _as_array(ref)
    _check_shapes(pred, ref)
    return _match_from_table(_OverlapTable(pred, ref))


def _match_from_table(table: _OverlapTable) -> MatchSet:
    candidates = []
    for pid, rid, c in table.positive_pairs():
        f1 = 2.0 * c / (table.pred_sizes[pid] + table.ref_sizes[rid])
        if f1 >= MATCH_MIN_F1:
            candidates.append((-f1, rid, pid, f1))
    candidates.sort()
    used_pred: set[int] = set()
    used_ref: set[int] = set()
    pairs = []
    for _, rid, pid, f1 in candidates:
        if pid in used_pred or rid in used_ref:
            continue
        used_pred.add(pid)
        used_ref.add(rid)
        pairs.append((pid, rid, f1))
    unmatched_pred = tuple(sorted(set(table.pred_sizes) - used_pred))
    unmatched_ref = tuple(sorted(set(table.ref_sizes) - used_ref))
    return MatchSet(tuple(pairs), unmatched_pred, unmatched_ref)


def f1_match(matches: MatchSet) -> float:
    """F1 over matched and mismatched particle counts."""
    cm = ConfusionMatrix(len(matches.pairs), len(matches.unmatched_pred), len(matches.unmatched_ref))
    return cm.f1(empty_value=1.0)


def f1_instance(pred, ref, matches: MatchSet) -> float:
    """Mean per-instance voxel F1; unmatched instances contribute zero."""
    pred, ref = _as_array(pred), _as_array(ref)
    _check_shapes(pred, ref)
    total = sum(f1 for _, _, f1 in matches.pairs)
    denom = len(matches.pairs) + len(matches.unmatched_pred) + len(matches.unmatched_ref)
    return total / denom if denom else 1.0


def _plurality_groups(table: _OverlapTable, by_pred: bool):
    """Group ids by their majority-overlap counterpart.

    ``by_pred=True`` assigns each reference id to the predicted instance
    holding most of its voxels (merger view); ``False`` mirrors it. An id
    with no unique plurality winner joins no group, which keeps the metric
    invariant under label permutations.
    """
    best: dict[int, tuple[int, int, bool]] = {}
    for pid, rid, c in table.positive_pairs():
        key, counterpart = (rid, pid) if by_pred else (pid, rid)
        cur = best.get(key)
        if cur is None or c > cur[0]:
            best[key] = (c, counterpart, False)
        elif c == cur[0]:
            best[key] = (cur[0], cur[1], True)
    groups: dict[int, list[int]] = {}
    for key, (_, counterpart, tied) in best.items():
        if not tied:
            groups.setdefault(counterpart, []).append(key)
    return tuple(
        tuple(sorted(members))
        for _, members in sorted(groups.items())
        if len(members) >= 2
    )


def _group_ratio(groups, particle_count: int) -> float:
    if particle_count == 0:
        return 0.0
    return (sum(len(g) for g in groups) - len(groups)) / particle_count


def merger_ratio(pred, ref) -> tuple[float, tuple[tuple[int, ...], ...]]:
    """Fraction of reference particles lost to merged predictions.

    Each group lists reference ids whose plurality-overlap prediction is one
    and the same predicted instance.
    """
    pred, ref = _as_array(pred), _as_array(ref)
    _check_shapes(pred, ref)
    table = _OverlapTable(pred, ref)
    groups = _plurality_groups(table, by_pred=True)
    return _group_ratio(groups, len(table.ref_sizes)), groups


def splitter_ratio(pred, ref) -> tuple[float, tuple[tuple[int, ...], ...]]:
    """Fraction of reference particles spuriously split into several
    predictions; groups list the predicted ids of each splitter."""
    pred, ref = _as_array(pred), _as_array(ref)
    _check_shapes(pred, ref)
    table = _OverlapTable(pred, ref)
    groups = _plurality_groups(table, by_pred=False)
    return _group_ratio(groups, len(table.ref_sizes)), groups


def evaluate(pred, ref) -> MetricsReport:
    """All five scores plus the merger/splitter inventories."""
    pred_arr, ref_arr = _as_array(pred), _as_array(ref)
    _check_shapes(pred_arr, ref_arr)
    table = _OverlapTable(pred_arr, ref_arr)
    matches = _match_from_table(table)
    particle_count = len(table.ref_sizes)
    merger_groups = _plurality_groups(table, by_pred=True)
    splitter_groups = _plurality_groups(table, by_pred=False)
    return MetricsReport(
        f1_voxel=f1_voxel(pred_arr, ref_arr),
        f1_match=f1_match(matches),
        f1_instance=f1_instance(pred_arr, ref_arr, matches),
        merger_ratio=_group_ratio(merger_groups, particle_count),
        splitter_ratio=_group_ratio(splitter_groups, particle_count),
        mergers=merger_groups,
        splitters=splitter_groups,
        particle_count=particle_count,
    )
