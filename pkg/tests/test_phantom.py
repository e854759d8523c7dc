import numpy as np
import pytest

from noduleaug.errors import CapacityError
from noduleaug.phantom import (
    LUNG_INTENSITY,
    NODULE_AMPLITUDE,
    default_class_mix,
    generate_phantom,
)
from noduleaug.volume import Box3, iou


def measured_box(volume, annotation):
    """Threshold-crossing oracle: bounding box of the half-peak region.

    Scans the annotation neighborhood for voxels at or above
    lung background + amplitude/2 and returns their bounding box.
    """
    amp = NODULE_AMPLITUDE[annotation.attenuation_class]
    threshold = LUNG_INTENSITY + amp / 2.0
    search = annotation.box.dilate(3).clip_to(volume.shape)
    sub = volume.data[search.min_corner[0]:search.max_corner[0],
                      search.min_corner[1]:search.max_corner[1],
                      search.min_corner[2]:search.max_corner[2]]
    hits = np.argwhere(sub >= threshold)
    assert hits.size > 0, "no voxels above half peak near the annotation"
    mins = hits.min(axis=0) + np.array(search.min_corner)
    maxs = hits.max(axis=0) + np.array(search.min_corner) + 1
    return Box3(tuple(mins), tuple(maxs))


class TestPhantom:
    def test_no_nodules_gives_background_only(self):
        vol, anns = generate_phantom(seed=3, shape=(48, 48, 48), n_nodules=0, n_vessels=0)
        assert anns == []
        # nothing brighter than the wall shell
        assert vol.data.max() <= 0.55
        assert vol.data.min() >= -1.0

    def test_deterministic(self):
        a, anns_a = generate_phantom(seed=11, shape=(64, 64, 96), n_nodules=3)
        b, anns_b = generate_phantom(seed=11, shape=(64, 64, 96), n_nodules=3)
        np.testing.assert_array_equal(a.data, b.data)
        assert anns_a == anns_b

    def test_different_seeds_differ(self):
        a, _ = generate_phantom(seed=1, shape=(48, 48, 64), n_nodules=1)
        b, _ = generate_phantom(seed=2, shape=(48, 48, 64), n_nodules=1)
        assert not np.array_equal(a.data, b.data)

    def test_boxes_disjoint_and_diameters_match_class(self):
        vol, anns = generate_phantom(seed=5, shape=(72, 80, 96), n_nodules=3,
                                     classes=[("small", "solid"), ("medium", "ggn"),
                                              ("large", "part_solid")])
        assert len(anns) == 3
        for i in range(3):
            for j in range(i + 1, 3):
                assert anns[i].box.intersect(anns[j].box) is None
        for ann in anns:
            box = measured_box(vol, ann)
            # measured half-peak box matches the annotation within 1 voxel per face
            assert all(abs(box.min_corner[k] - ann.box.min_corner[k]) <= 1 for k in range(3))
            assert all(abs(box.max_corner[k] - ann.box.max_corner[k]) <= 1 for k in range(3))
            measured_diameter = np.mean(box.extents) * vol.spacing[0]
            lo, hi = {"small": (3, 10), "medium": (10.5, 20), "large": (20.5, 30)}[ann.size_class]
            assert lo <= measured_diameter <= hi

    def test_annotation_iou_with_measured_box(self):
        vol, anns = generate_phantom(seed=9, shape=(72, 80, 96), n_nodules=4)
        for ann in anns:
            box = measured_box(vol, ann)
            # shaving one voxel per face from either box must still overlap heavily
            assert iou(box, ann.box) > 0.6

    def test_attenuation_orders_peak_intensity(self):
        vol, anns = generate_phantom(
            seed=21, shape=(72, 96, 96), n_nodules=3,
            classes=[("medium", "solid"), ("medium", "part_solid"), ("medium", "ggn")])
        peaks = {}
        for ann in anns:
            b = ann.box
            peaks[ann.attenuation_class] = vol.data[b.min_corner[0]:b.max_corner[0],
                                                    b.min_corner[1]:b.max_corner[1],
                                                    b.min_corner[2]:b.max_corner[2]].max()
        assert peaks["solid"] > peaks["part_solid"] > peaks["ggn"]

    def test_impossible_packing_raises(self):
        with pytest.raises(CapacityError):
            generate_phantom(seed=0, shape=(40, 40, 40), n_nodules=30,
                             classes=[("large", "solid")] * 30)

    def test_values_in_declared_range(self):
        vol, _ = generate_phantom(seed=2, shape=(64, 64, 64), n_nodules=2)
        assert vol.data.min() >= vol.intensity_range[0]
        assert vol.data.max() <= vol.intensity_range[1]

    def test_default_mix_covers_all_combos(self):
        mix = default_class_mix(9)
        assert len(set(mix)) == 9
