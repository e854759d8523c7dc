import itertools

import numpy as np
import pytest
import torch
import torch.nn as nn

from noduleaug.conditioning import ConditionLabel, assemble_input, insert_noise_box
from noduleaug.dataset import ATTENUATION_CLASSES, SIZE_CLASSES
from noduleaug.errors import InvalidArgumentError
from noduleaug.models import (
    ContextDiscriminator,
    ContextDiscriminatorSpec,
    GeneratorSpec,
    NoduleCritic,
    NoduleCriticSpec,
    NoduleGenerator,
    composite,
    composite_batch,
    generator_forward,
    init_gan_weights,
)
from noduleaug.volume import Box3, Voi


@pytest.fixture(scope="module")
def small_models():
    torch.manual_seed(0)
    gen = NoduleGenerator(GeneratorSpec(base_channels=4))
    d1 = ContextDiscriminator(ContextDiscriminatorSpec(base_channels=4))
    d2 = NoduleCritic(NoduleCriticSpec(base_channels=4))
    for m in (gen, d1, d2):
        init_gan_weights(m)
    return gen, d1, d2


def make_input(seed=0, label=("small", "solid")):
    rng = np.random.default_rng(seed)
    voi = Voi(data=rng.uniform(-1, 1, (64, 64, 64)).astype(np.float32),
              source_scan_id="s", source_origin=Box3((0, 0, 0), (64, 64, 64)))
    return assemble_input(insert_noise_box(voi, seed), ConditionLabel(*label))


class TestGenerator:
    def test_output_shape_and_range_all_conditions(self, small_models):
        gen, _, _ = small_models
        gen.eval()
        for i, (s, a) in enumerate(itertools.product(SIZE_CLASSES, ATTENUATION_CLASSES)):
            out = generator_forward(gen, make_input(seed=i, label=(s, a)))
            assert out.shape == (32, 32, 32)
            assert out.min() >= -1.0 and out.max() <= 1.0

    def test_inference_deterministic(self, small_models):
        gen, _, _ = small_models
        x = make_input(seed=3)
        a = generator_forward(gen, x)
        b = generator_forward(gen, x)
        np.testing.assert_array_equal(a, b)

    def test_dropout_active_in_training_mode(self, small_models):
        gen, _, _ = small_models
        gen.train()
        x = torch.randn(1, 7, 64, 64, 64)
        torch.manual_seed(1)
        a = gen(x)
        torch.manual_seed(2)
        b = gen(x)
        gen.eval()
        assert not torch.equal(a, b)

    def test_bottleneck_is_four_cubed(self, small_models):
        gen, _, _ = small_models
        x = torch.randn(1, 7, 64, 64, 64)
        h = gen.enc4(gen.enc3(gen.enc2(gen.enc1(x))))
        assert h.shape[2:] == (4, 4, 4)

    def test_scaled_output_range(self):
        torch.manual_seed(4)
        gen = NoduleGenerator(GeneratorSpec(base_channels=4, intensity_range=(0.0, 2.0)))
        gen.eval()
        with torch.no_grad():
            out = gen(torch.randn(1, 7, 64, 64, 64))
        assert out.min().item() >= 0.0 and out.max().item() <= 2.0

    def test_wrong_shape_rejected(self, small_models):
        gen, _, _ = small_models
        with pytest.raises(InvalidArgumentError):
            gen(torch.randn(1, 7, 32, 32, 32))


class TestDiscriminators:
    def test_context_patch_grid(self, small_models):
        _, d1, _ = small_models
        out = d1(torch.randn(2, 1, 64, 64, 64))
        assert out.shape == (2, 1, 4, 4, 4)

    def test_critic_scalar_per_sample(self, small_models):
        _, _, d2 = small_models
        out = d2(torch.randn(3, 7, 32, 32, 32))
        assert out.shape == (3,)

    def test_critic_has_no_batchnorm(self, small_models):
        _, _, d2 = small_models
        assert not any(isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d))
                       for m in d2.modules())

    def test_input_shape_checks(self, small_models):
        _, d1, d2 = small_models
        with pytest.raises(InvalidArgumentError):
            d1(torch.randn(1, 7, 64, 64, 64))
        with pytest.raises(InvalidArgumentError):
            d2(torch.randn(1, 1, 32, 32, 32))


class TestComposite:
    def test_reassembly_identity(self):
        rng = np.random.default_rng(0)
        voi = rng.uniform(-1, 1, (64, 64, 64)).astype(np.float32)
        center = voi[16:48, 16:48, 16:48].copy()
        np.testing.assert_array_equal(composite(voi, center), voi)

    def test_zero_paste_changes_exactly_center(self):
        rng = np.random.default_rng(1)
        voi = rng.uniform(0.5, 1.0, (64, 64, 64)).astype(np.float32)  # nonzero everywhere
        out = composite(voi, np.zeros((32, 32, 32), dtype=np.float32))
        assert int(np.sum(out != voi)) == 32 ** 3

    def test_surroundings_bitwise_preserved(self):
        rng = np.random.default_rng(2)
        voi = rng.uniform(-1, 1, (64, 64, 64)).astype(np.float32)
        out = composite(voi, rng.uniform(-1, 1, (32, 32, 32)).astype(np.float32))
        mask = np.ones((64, 64, 64), dtype=bool)
        mask[16:48, 16:48, 16:48] = False
        np.testing.assert_array_equal(out[mask], voi[mask])

    def test_batch_composite_matches_numpy(self):
        rng = np.random.default_rng(3)
        voi = rng.uniform(-1, 1, (64, 64, 64)).astype(np.float32)
        nod = rng.uniform(-1, 1, (32, 32, 32)).astype(np.float32)
        t = composite_batch(torch.from_numpy(voi)[None, None], torch.from_numpy(nod)[None, None])
        np.testing.assert_array_equal(t[0, 0].numpy(), composite(voi, nod))

    def test_shape_validation(self):
        with pytest.raises(InvalidArgumentError):
            composite(np.zeros((32, 32, 32)), np.zeros((32, 32, 32)))
        with pytest.raises(InvalidArgumentError):
            composite(np.zeros((64, 64, 64)), np.zeros((16, 16, 16)))
