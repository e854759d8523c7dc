import itertools

import numpy as np
import pytest

from noduleaug.conditioning import (
    CHANNEL_ORDER,
    ConditionLabel,
    ConditionedInput,
    assemble_input,
    insert_noise_box,
    tile_conditions,
)
from noduleaug.dataset import ATTENUATION_CLASSES, SIZE_CLASSES
from noduleaug.errors import InvalidArgumentError
from noduleaug.volume import Box3, Voi

ALL_LABELS = [ConditionLabel(s, a) for s, a in itertools.product(SIZE_CLASSES, ATTENUATION_CLASSES)]


def make_voi(seed=0):
    rng = np.random.default_rng(seed)
    return Voi(data=rng.uniform(-1, 1, (64, 64, 64)).astype(np.float32),
               source_scan_id="s", source_origin=Box3((0, 0, 0), (64, 64, 64)))


class TestNoiseBox:
    def test_inside_values_within_noise_range(self):
        out = insert_noise_box(make_voi(), rng_seed=1)
        inner = out.data[16:48, 16:48, 16:48]
        assert inner.min() >= -0.5
        assert inner.max() <= 0.5

    def test_outside_bitwise_unchanged(self):
        voi = make_voi()
        out = insert_noise_box(voi, rng_seed=1)
        mask = np.ones((64, 64, 64), dtype=bool)
        mask[16:48, 16:48, 16:48] = False
        np.testing.assert_array_equal(out.data[mask], voi.data[mask])

    def test_moments_match_uniform(self):
        out = insert_noise_box(make_voi(), rng_seed=123)
        inner = out.data[16:48, 16:48, 16:48].astype(np.float64)
        assert abs(inner.mean()) <= 0.01
        assert abs(inner.var() - 1.0 / 12.0) <= 0.01

    def test_deterministic_given_seed(self):
        voi = make_voi()
        a = insert_noise_box(voi, rng_seed=7)
        b = insert_noise_box(voi, rng_seed=7)
        np.testing.assert_array_equal(a.data, b.data)

    def test_input_not_mutated(self):
        voi = make_voi()
        before = np.array(voi.data)
        insert_noise_box(voi, rng_seed=3)
        np.testing.assert_array_equal(voi.data, before)


class TestTileConditions:
    def test_paper_example_small_solid(self):
        tiles = tile_conditions(ConditionLabel("small", "solid"))
        assert tiles.shape == (64, 64, 64, 6)
        assert np.all(tiles[..., 0] == 1.0)  # small
        assert np.all(tiles[..., 3] == 1.0)  # solid
        for ch in (1, 2, 4, 5):
            assert np.all(tiles[..., ch] == 0.0)

    def test_large_ggn_channels(self):
        tiles = tile_conditions(ConditionLabel("large", "ggn"))
        assert np.all(tiles[..., 2] == 1.0)
        assert np.all(tiles[..., 5] == 1.0)

    def test_exactly_two_hot_everywhere(self):
        for label in ALL_LABELS:
            tiles = tile_conditions(label)
            np.testing.assert_array_equal(tiles.sum(axis=-1), 2.0)

    def test_injective_over_all_labels(self):
        signatures = {tuple(tile_conditions(lbl)[0, 0, 0]) for lbl in ALL_LABELS}
        assert len(signatures) == 9

    def test_unknown_class_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ConditionLabel("tiny", "solid")


class TestAssembleInput:
    def test_shape_and_channel_content(self):
        voi = insert_noise_box(make_voi(), rng_seed=2)
        label = ConditionLabel("medium", "part_solid")
        out = assemble_input(voi, label)
        assert out.tensor.shape == (64, 64, 64, 7)
        np.testing.assert_array_equal(out.tensor[..., 0], voi.data)
        np.testing.assert_array_equal(out.tensor[..., 1:], tile_conditions(label))
        assert out.noise_box == voi.nodule_box

    def test_inputs_not_mutated(self):
        voi = insert_noise_box(make_voi(), rng_seed=2)
        before = np.array(voi.data)
        assemble_input(voi, ConditionLabel("small", "ggn"))
        np.testing.assert_array_equal(voi.data, before)

    def test_invariants_for_all_labels(self):
        voi = insert_noise_box(make_voi(), rng_seed=5)
        for label in ALL_LABELS:
            out = assemble_input(voi, label)
            cond = out.tensor[..., 1:]
            assert set(np.unique(cond)) <= {0.0, 1.0}
            # each condition channel is constant over the cube
            flat = cond.reshape(-1, 6)
            assert np.all(flat == flat[0])
            assert int(flat[0].sum()) == 2

    def test_bad_tensor_shape_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ConditionedInput(tensor=np.zeros((64, 64, 64, 6), dtype=np.float32),
                             label=ALL_LABELS[0], noise_box=Box3((16, 16, 16), (48, 48, 48)))

    def test_channel_order_table(self):
        assert CHANNEL_ORDER == ("voi", "small", "medium", "large", "solid", "part_solid", "ggn")
