import math

import numpy as np
import pytest
from scipy import ndimage

from particlekit.exceptions import CapacityError, ValidationError
from particlekit.synth import InstanceStats, PhantomSpec, generate, measure

from conftest import make_labels, sphere_mask


def pairwise_min_distance(labels, id_a, id_b):
    """Brute oracle: min Euclidean distance between two instance masks."""
    a = np.argwhere(labels == id_a)
    b = np.argwhere(labels == id_b)
    best = np.inf
    for v in a:
        d2 = ((b - v) ** 2).sum(axis=1).min()
        best = min(best, math.sqrt(d2))
    return best


def face_adjacent_pairs(labels):
    pairs = set()
    for axis in range(3):
        hi = labels[tuple(slice(1, None) if a == axis else slice(None) for a in range(3))]
        lo = labels[tuple(slice(None, -1) if a == axis else slice(None) for a in range(3))]
        touching = (hi > 0) & (lo > 0) & (hi != lo)
        for x, y in zip(hi[touching], lo[touching]):
            pairs.add((int(min(x, y)), int(max(x, y))))
    return pairs


class TestGenerate:
    def test_zero_particles(self):
        vol, lab = generate(PhantomSpec(shape=(24, 24, 24), particle_count=0, rng_seed=1))
        assert not lab.labels.any()
        assert vol.values.shape == (24, 24, 24)

    def test_separated_particles_keep_two_voxel_gap(self):
        spec = PhantomSpec(
            shape=(48, 48, 48), particle_count=7, radius_range_vox=(4, 7),
            touching_pair_fraction=0.0, rng_seed=3,
        )
        _, lab = generate(spec)
        ids = lab.instance_ids()
        assert len(ids) == 7
        # sample a handful of pairs against the brute-force oracle
        for i in range(len(ids) - 1):
            assert pairwise_min_distance(lab.labels, ids[i], ids[i + 1]) >= 2.0
        assert not face_adjacent_pairs(lab.labels)

    def test_touching_pairs_are_adjacent_and_disjoint(self):
        spec = PhantomSpec(
            shape=(64, 64, 64), particle_count=10, radius_range_vox=(5, 8),
            touching_pair_fraction=0.4, rng_seed=11,
        )
        _, lab = generate(spec)
        pairs = face_adjacent_pairs(lab.labels)
        assert pairs == {(1, 2), (3, 4)}
        counts = np.bincount(lab.labels.ravel())
        assert (counts[1:11] > 0).all()

    def test_deterministic(self):
        spec = PhantomSpec(shape=(32, 32, 32), particle_count=5, rng_seed=42,
                           radius_range_vox=(3, 6), streak_artifact_count=2)
        v1, l1 = generate(spec)
        v2, l2 = generate(spec)
        np.testing.assert_array_equal(v1.values, v2.values)
        np.testing.assert_array_equal(l1.labels, l2.labels)

    def test_labels_coincide_with_foreground_before_noise(self):
        spec = PhantomSpec(
            shape=(32, 32, 32), particle_count=4, radius_range_vox=(3, 6),
            intensity_fg=(1.0, 0.0), intensity_bg=(0.0, 0.0), rng_seed=5,
        )
        vol, lab = generate(spec)
        np.testing.assert_array_equal(vol.values > 0.5, lab.labels > 0)

    def test_streaks_brighten_lines(self):
        base = PhantomSpec(shape=(32, 32, 32), particle_count=3, radius_range_vox=(3, 5),
                           intensity_fg=(1.0, 0.0), intensity_bg=(0.0, 0.0), rng_seed=9)
        with_streaks = PhantomSpec(
            shape=(32, 32, 32), particle_count=3, radius_range_vox=(3, 5),
            intensity_fg=(1.0, 0.0), intensity_bg=(0.0, 0.0), rng_seed=9,
            streak_artifact_count=2,
        )
        v0, _ = generate(base)
        v1, _ = generate(with_streaks)
        assert (v1.values > v0.values).any()

    def test_capacity_error(self):
        spec = PhantomSpec(shape=(20, 20, 20), particle_count=60,
                           radius_range_vox=(4, 6), rng_seed=0)
        with pytest.raises(CapacityError, match="fewer or smaller"):
            generate(spec)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            PhantomSpec(shape=(20, 20, 20), particle_count=1, radius_range_vox=(1, 5))
        with pytest.raises(ValidationError):
            PhantomSpec(shape=(20, 20, 20), particle_count=1, radius_range_vox=(4, 15))
        with pytest.raises(ValidationError):
            PhantomSpec(shape=(20, 20, 20), particle_count=1, shape_kinds=("cube",))


class TestMeasure:
    def test_single_voxel_diameter(self):
        arr = np.zeros((5, 5, 5), np.int32)
        arr[2, 2, 2] = 1
        rows = measure(make_labels(arr))
        expected = 2.0 * (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
        assert rows[0].eq_diameter_vox == pytest.approx(expected, abs=1e-4)
        assert expected == pytest.approx(1.2407, abs=1e-4)

    def test_sphere_equivalent_diameter(self):
        mask = sphere_mask((25, 25, 25), (12, 12, 12), 10.0)
        rows = measure(make_labels(mask.astype(np.int32)))
        # voxelized-count oracle
        count = int(mask.sum())
        oracle = 2.0 * (3.0 * count / (4.0 * math.pi)) ** (1.0 / 3.0)
        assert rows[0].eq_diameter_vox == pytest.approx(oracle)
        assert abs(rows[0].eq_diameter_vox - 20.0) / 20.0 < 0.03

    def test_empty(self):
        assert measure(make_labels(np.zeros((4, 4, 4), np.int32))) == []

    def test_monotone_in_count(self):
        arr = np.zeros((16, 16, 16), np.int32)
        arr[1:3, 1:3, 1:3] = 1
        arr[6:11, 6:11, 6:11] = 2
        arr[12, 12, 12] = 3
        rows = sorted(measure(make_labels(arr)), key=lambda r: r.voxels)
        diams = [r.eq_diameter_vox for r in rows]
        assert diams == sorted(diams)

    def test_bounding_boxes(self):
        arr = np.zeros((10, 10, 10), np.int32)
        arr[2:5, 3:7, 1:9] = 2
        row = measure(make_labels(arr))[0]
        assert row.bb_lo == (2, 3, 1)
        assert row.bb_hi == (5, 7, 9)
