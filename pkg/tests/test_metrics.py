import numpy as np
import pytest

from particlekit.exceptions import ValidationError
from particlekit.metrics import (
    MatchSet,
    evaluate,
    f1_instance,
    f1_match,
    f1_voxel,
    match_instances,
    merger_ratio,
    splitter_ratio,
)


# -- exhaustive brute-force oracle ---------------------------------------------


def brute_force_metrics(pred, ref):
    """All five scores from first principles: explicit per-id voxel sets."""
    pred_ids = sorted(int(i) for i in np.unique(pred) if i > 0)
    ref_ids = sorted(int(i) for i in np.unique(ref) if i > 0)
    pred_sets = {p: set(map(tuple, np.argwhere(pred == p))) for p in pred_ids}
    ref_sets = {r: set(map(tuple, np.argwhere(ref == r))) for r in ref_ids}

    p_fg = (pred > 0).sum()
    r_fg = (ref > 0).sum()
    tp = ((pred > 0) & (ref > 0)).sum()
    voxel = 2 * tp / (p_fg + r_fg) if (p_fg + r_fg) else 1.0

    cands = []
    for p in pred_ids:
        for r in ref_ids:
            ov = len(pred_sets[p] & ref_sets[r])
            if ov:
                f1 = 2 * ov / (len(pred_sets[p]) + len(ref_sets[r]))
                if f1 >= 0.1:
                    cands.append((-f1, r, p, f1))
    cands.sort()
    used_p, used_r, pairs = set(), set(), []
    for _, r, p, f1 in cands:
        if p in used_p or r in used_r:
            continue
        used_p.add(p)
        used_r.add(r)
        pairs.append((p, r, f1))
    tp_m = len(pairs)
    fp_m = len(pred_ids) - tp_m
    fn_m = len(ref_ids) - tp_m
    match = 2 * tp_m / (2 * tp_m + fp_m + fn_m) if (tp_m + fp_m + fn_m) else 1.0
    denom = tp_m + fp_m + fn_m
    instance = sum(f1 for _, _, f1 in pairs) / denom if denom else 1.0

    def plurality(sets_a, sets_b):
        # unique majority counterpart of each id in sets_a among sets_b;
        # ids whose top overlap is tied have no majority
        out = {}
        for a, voxels in sets_a.items():
            overlaps = {b: len(voxels & other) for b, other in sets_b.items()}
            overlaps = {b: ov for b, ov in overlaps.items() if ov > 0}
            if not overlaps:
                continue
            top = max(overlaps.values())
            winners = [b for b, ov in overlaps.items() if ov == top]
            if len(winners) == 1:
                out[a] = winners[0]
        return out

    groups_m = {}
    for r, p in plurality(ref_sets, pred_sets).items():
        groups_m.setdefault(p, []).append(r)
    mergers = sorted(tuple(sorted(v)) for v in groups_m.values() if len(v) >= 2)
    groups_s = {}
    for p, r in plurality(pred_sets, ref_sets).items():
        groups_s.setdefault(r, []).append(p)
    splitters = sorted(tuple(sorted(v)) for v in groups_s.values() if len(v) >= 2)
    n_ref = len(ref_ids)
    m_ratio = (sum(len(g) for g in mergers) - len(mergers)) / n_ref if n_ref else 0.0
    s_ratio = (sum(len(g) for g in splitters) - len(splitters)) / n_ref if n_ref else 0.0
    return voxel, match, instance, m_ratio, s_ratio, mergers, splitters


def vol_from(spec: str) -> np.ndarray:
    """Tiny 1D-as-3D label volume from a space-separated id string."""
    row = np.array([int(v) for v in spec.split()], dtype=np.int32)
    return row.reshape(-1, 1, 1)


class TestF1Voxel:
    def test_identity(self):
        a = vol_from("0 1 1 2 0")
        assert f1_voxel(a, a) == 1.0

    def test_enumerated_overlap(self):
        # pred fg 3 voxels, ref fg 4, overlap 2 -> 2*2/(2*2+1+2) = 4/7
        pred = vol_from("1 1 1 0 0 0")
        ref = vol_from("0 2 2 2 2 0")
        tp, fp, fn = 2, 1, 2
        assert f1_voxel(pred, ref) == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert f1_voxel(pred, ref) == pytest.approx(4 / 7)

    def test_empty_pred(self):
        assert f1_voxel(vol_from("0 0 0"), vol_from("1 1 0")) == 0.0

    def test_both_empty(self):
        assert f1_voxel(vol_from("0 0"), vol_from("0 0")) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            f1_voxel(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


class TestMatchInstances:
    def test_perfect(self):
        a = vol_from("1 1 0 2 2 2")
        m = match_instances(a, a)
        assert {(p, r) for p, r, _ in m.pairs} == {(1, 1), (2, 2)}
        assert all(f1 == 1.0 for _, _, f1 in m.pairs)
        assert m.unmatched_pred == () and m.unmatched_ref == ()

    def test_blob_covering_two_refs(self):
        pred = vol_from("1 1 1 1 1 1")
        ref = vol_from("1 1 1 2 2 2")
        m = match_instances(pred, ref)
        assert len(m.pairs) == 1
        assert len(m.unmatched_ref) == 1

    def test_subthreshold_overlap_is_no_match(self):
        # pair F1 = 2*1/(1+39) = 0.05 < 0.1
        pred = np.zeros((40, 1, 1), np.int32)
        pred[0] = 1
        ref = np.zeros((40, 1, 1), np.int32)
        ref[:39] = 5
        m = match_instances(pred, ref)
        assert m.pairs == ()
        assert m.unmatched_pred == (1,)
        assert m.unmatched_ref == (5,)


class TestF1Match:
    def test_half(self):
        m = MatchSet(((1, 1, 0.9),), (2,), (3,))
        assert f1_match(m) == pytest.approx(2 / 4)

    def test_perfect(self):
        m = MatchSet(((1, 1, 1.0), (2, 2, 1.0)), (), ())
        assert f1_match(m) == 1.0

    def test_total_mismatch(self):
        m = MatchSet((), (1, 2), (3,))
        assert f1_match(m) == 0.0


class TestF1Instance:
    def test_perfect(self):
        a = vol_from("1 2 0")
        m = match_instances(a, a)
        assert f1_instance(a, a, m) == 1.0

    def test_pair_plus_unmatched_ref(self):
        # one matched pair at F1 4/7 plus one unmatched reference -> mean 2/7
        pred = vol_from("1 1 1 0 0 0 0 0")
        ref = vol_from("0 2 2 2 2 0 0 3")
        m = match_instances(pred, ref)
        assert len(m.pairs) == 1 and m.pairs[0][2] == pytest.approx(4 / 7)
        assert f1_instance(pred, ref, m) == pytest.approx((4 / 7) / 2)

    def test_vacuous(self):
        empty = vol_from("0 0")
        assert f1_instance(empty, empty, match_instances(empty, empty)) == 1.0


class TestMergerSplitter:
    def test_single_merger_among_ten(self):
        # one prediction swallows refs 1 and 2; refs 3..10 match their own
        pred = np.zeros((30, 1, 1), np.int32)
        ref = np.zeros((30, 1, 1), np.int32)
        pred[0:6] = 99
        ref[0:3] = 1
        ref[3:6] = 2
        for i in range(8):
            pred[8 + 2 * i] = i + 1
            ref[8 + 2 * i] = i + 3
        ratio, groups = merger_ratio(pred, ref)
        assert groups == ((1, 2),)
        assert ratio == pytest.approx((2 - 1) / 10)

    def test_perfect_no_mergers(self):
        a = vol_from("1 0 2 0 3")
        assert merger_ratio(a, a) == (0.0, ())

    def test_triple_merge(self):
        pred = vol_from("7 7 7 7 7 7")
        ref = vol_from("1 1 2 2 3 3")
        ratio, groups = merger_ratio(pred, ref)
        assert groups == ((1, 2, 3),)
        assert ratio == pytest.approx((3 - 1) / 3)

    def test_single_splitter_among_ten(self):
        pred = np.zeros((30, 1, 1), np.int32)
        ref = np.zeros((30, 1, 1), np.int32)
        ref[0:6] = 1
        pred[0:3] = 11
        pred[3:6] = 12
        for i in range(9):
            pred[8 + 2 * i] = i + 1
            ref[8 + 2 * i] = i + 2
        ratio, groups = splitter_ratio(pred, ref)
        assert groups == ((11, 12),)
        assert ratio == pytest.approx((2 - 1) / 10)

    def test_quad_split(self):
        pred = vol_from("1 1 2 2 3 3 4 4 0 5 0 6 0 7")
        ref = vol_from("9 9 9 9 9 9 9 9 0 1 0 2 0 3")
        ratio, groups = splitter_ratio(pred, ref)
        assert groups == ((1, 2, 3, 4),)
        assert ratio == pytest.approx((4 - 1) / 4)

    def test_empty_reference(self):
        ratio, groups = merger_ratio(vol_from("1 0"), vol_from("0 0"))
        assert ratio == 0.0 and groups == ()


class TestEvaluate:
    def test_perfect(self):
        a = vol_from("1 1 0 2 0 3")
        rep = evaluate(a, a)
        assert (rep.f1_voxel, rep.f1_match, rep.f1_instance) == (1.0, 1.0, 1.0)
        assert (rep.merger_ratio, rep.splitter_ratio) == (0.0, 0.0)
        assert rep.particle_count == 3

    def test_composition_identity(self, rng):
        pred = rng.integers(0, 5, size=(10, 10, 10)).astype(np.int32)
        ref = rng.integers(0, 5, size=(10, 10, 10)).astype(np.int32)
        rep = evaluate(pred, ref)
        m = match_instances(pred, ref)
        assert rep.f1_voxel == f1_voxel(pred, ref)
        assert rep.f1_match == f1_match(m)
        assert rep.f1_instance == f1_instance(pred, ref, m)
        assert rep.merger_ratio == merger_ratio(pred, ref)[0]
        assert rep.splitter_ratio == splitter_ratio(pred, ref)[0]

    def test_mixed_merger_and_splitter_among_six(self):
        # refs 1,2 merged into pred 10; ref 3 split into preds 11,12;
        # refs 4,5,6 predicted cleanly -> ratios 1/6 each
        pred = np.zeros((40, 1, 1), np.int32)
        ref = np.zeros((40, 1, 1), np.int32)
        pred[0:6] = 10
        ref[0:3] = 1
        ref[3:6] = 2
        pred[8:11] = 11
        pred[11:14] = 12
        ref[8:14] = 3
        for i, base in enumerate((20, 25, 30)):
            pred[base : base + 3] = 13 + i
            ref[base : base + 3] = 4 + i
        rep = evaluate(pred, ref)
        assert rep.mergers == ((1, 2),)
        assert rep.splitters == ((11, 12),)
        assert rep.merger_ratio == pytest.approx(1 / 6)
        assert rep.splitter_ratio == pytest.approx(1 / 6)

    def test_report_serializes(self):
        a = vol_from("1 0 2")
        d = evaluate(a, a).to_dict()
        assert set(d) == {
            "f1_voxel", "f1_match", "f1_instance", "merger_ratio",
            "splitter_ratio", "mergers", "splitters", "particle_count",
        }


class TestInvariants:
    def test_random_volumes_match_brute_force_oracle(self, rng):
        for trial in range(100):
            shape = tuple(int(rng.integers(3, 13)) for _ in range(3))
            pred = (rng.random(shape) < 0.7) * rng.integers(0, 5, size=shape)
            ref = (rng.random(shape) < 0.7) * rng.integers(0, 5, size=shape)
            pred = pred.astype(np.int32)
            ref = ref.astype(np.int32)
            rep = evaluate(pred, ref)
            ov, om, oi, omr, osr, omg, osg = brute_force_metrics(pred, ref)
            assert abs(rep.f1_voxel - ov) < 1e-9
            assert abs(rep.f1_match - om) < 1e-9
            assert abs(rep.f1_instance - oi) < 1e-9
            assert abs(rep.merger_ratio - omr) < 1e-9
            assert abs(rep.splitter_ratio - osr) < 1e-9
            assert sorted(rep.mergers) == omg
            assert sorted(rep.splitters) == osg

    def test_scores_in_range_and_permutation_invariance(self, rng):
        for _ in range(10):
            pred = rng.integers(0, 6, size=(8, 8, 8)).astype(np.int32)
            ref = rng.integers(0, 6, size=(8, 8, 8)).astype(np.int32)
            rep = evaluate(pred, ref)
            for score in (rep.f1_voxel, rep.f1_match, rep.f1_instance):
                assert 0.0 <= score <= 1.0
            assert rep.merger_ratio >= 0 and rep.splitter_ratio >= 0
            perm = rng.permutation(10) + 1
            pred_p = np.where(pred > 0, perm[pred - 1], 0).astype(np.int32)
            rep_p = evaluate(pred_p, ref)
            assert rep_p.f1_voxel == rep.f1_voxel
            assert rep_p.f1_match == rep.f1_match
            assert rep_p.f1_instance == pytest.approx(rep.f1_instance, abs=1e-12)
            assert rep_p.merger_ratio == rep.merger_ratio
            assert rep_p.splitter_ratio == rep.splitter_ratio

    def test_f1_match_swap_symmetry(self, rng):
        pred = rng.integers(0, 5, size=(9, 9, 9)).astype(np.int32)
        ref = rng.integers(0, 5, size=(9, 9, 9)).astype(np.int32)
        a = f1_match(match_instances(pred, ref))
        b = f1_match(match_instances(ref, pred))
        assert a == pytest.approx(b)
