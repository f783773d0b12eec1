import pytest
import torch

from pwl.blocknet import BlockNetSpec, ShapeError, SpecError, count_parameters, mini_spec, \
    full_spec, toy_spec
from pwl.converter import (CONVERTER_LR_SCALE, TIERS, ConverterBank, ConverterPair, build_bank,
                           reconstruction_error)


def _set(layer, weight, bias):
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(weight, dtype=layer.weight.dtype))
        layer.bias.copy_(torch.as_tensor(bias, dtype=layer.bias.dtype))


class TestTiers:
    def test_resnet_heavy_to_tiny_ratio(self):
        t, s = full_spec("resnet", "teacher"), full_spec("resnet", "student")
        counts = {tier: count_parameters(build_bank(t, s, tier)) for tier in TIERS}
        assert abs(counts["heavy"] / counts["tiny"] - 3.2) <= 0.5

    # one affine map per direction over the listed widths is already ~350k parameters
    @pytest.mark.xfail(strict=True, reason="reference bank sizes not reachable with these widths")
    def test_resnet_absolute_sizes(self):
        t, s = full_spec("resnet", "teacher"), full_spec("resnet", "student")
        tiny = count_parameters(build_bank(t, s, "tiny"))
        heavy = count_parameters(build_bank(t, s, "heavy"))
        assert abs(tiny - 98_000) / 98_000 < 0.1 and abs(heavy - 310_000) / 310_000 < 0.1

    @pytest.mark.parametrize("arch", ["vgg", "resnet", "vit", "lenet"])
    def test_monotone_in_tier(self, arch):
        t = full_spec("vgg" if arch == "lenet" else arch, "teacher")
        s = full_spec(arch, "student")
        n = [count_parameters(build_bank(t, s, tier)) for tier in TIERS]
        assert n[0] < n[1] < n[2]

    def test_tiny_is_single_affine_map(self):
        pair = ConverterPair(1, (8, 4, 4), (3, 4, 4), "tiny")
        assert count_parameters(pair.encoder) == 8 * 3 + 3
        assert count_parameters(pair.decoder) == 3 * 8 + 8

    def test_heavy_has_nonlinearity(self):
        pair = ConverterPair(1, (8, 4, 4), (3, 4, 4), "heavy")
        assert any(isinstance(m, torch.nn.ReLU) for m in pair.encoder.modules())
        medium = ConverterPair(1, (8, 4, 4), (3, 4, 4), "medium")
        assert not any(isinstance(m, torch.nn.ReLU) for m in medium.encoder.modules())

    def test_unknown_tier(self):
        with pytest.raises(ValueError):
            build_bank(toy_spec("teacher"), toy_spec("student"), "huge")

    def test_spatial_mismatch_rejected(self):
        s = BlockNetSpec("vgg", "student", ((2,), (2, "M")), num_classes=2, in_channels=1,
                         image_size=4, batchnorm=False)
        with pytest.raises(SpecError):
            build_bank(toy_spec("teacher"), s)

    def test_lr_scale_metadata(self):
        assert ConverterBank.lr_scale == CONVERTER_LR_SCALE == 0.1

    def test_seeded(self):
        a = build_bank(mini_spec("vgg", "teacher"), mini_spec("vgg", "student"), seed=4)
        b = build_bank(mini_spec("vgg", "teacher"), mini_spec("vgg", "student"), seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestEncodeDecode:
    def test_identity_init(self):
        pair = ConverterPair(1, (4, 2, 2), (4, 2, 2))
        pair.set_identity()
        x = torch.randn(3, 4, 2, 2)
        assert torch.equal(pair.encode(x), x)
        assert torch.equal(pair.decode(x), x)

    def test_encode_zero_is_bias(self):
        pair = ConverterPair(1, (5, 3, 3), (2, 3, 3))
        with torch.no_grad():
            pair.encoder.bias.copy_(torch.tensor([0.5, -1.0]))
        out = pair.encode(torch.zeros(2, 5, 3, 3))
        assert torch.equal(out, torch.tensor([0.5, -1.0])[None, :, None, None].expand(2, 2, 3, 3))

    @pytest.mark.parametrize("a", [-2.0, 0.5, 3.0])
    def test_affine_identity(self, a):
        pair = ConverterPair(1, (6, 2, 2), (3, 2, 2))
        x = torch.randn(2, 6, 2, 2)
        zero = pair.encode(torch.zeros_like(x))
        assert torch.allclose(pair.encode(a * x), a * pair.encode(x) - (a - 1) * zero, atol=1e-5)

    @pytest.mark.parametrize("tier", TIERS[:2])
    def test_linear_tiers_are_additive(self, tier):
        pair = ConverterPair(1, (6, 2, 2), (3, 2, 2), tier)
        x, y = torch.randn(2, 6, 2, 2), torch.randn(2, 6, 2, 2)
        zero = pair.encode(torch.zeros_like(x))
        assert torch.allclose(pair.encode(x + y), pair.encode(x) + pair.encode(y) - zero,
                              atol=1e-5)

    def test_hand_weighted_channel_sum(self):
        pair = ConverterPair(1, (2, 2, 2), (1, 2, 2))
        _set(pair.encoder, [[0.3, -1.2]], [0.05])
        x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.0], [0.5, 2.0]]]])
        expected = torch.tensor([[[[0.3 * 1 + 1.2 + 0.05, 0.6 + 0.05],
                                   [0.9 - 0.6 + 0.05, 1.2 - 2.4 + 0.05]]]])
        assert torch.allclose(pair.encode(x), expected, atol=1e-6)

    def test_token_features(self):
        pair = ConverterPair(1, (17, 48), (17, 32), "medium")
        z = pair.encode(torch.randn(2, 17, 48))
        assert z.shape == (2, 17, 32)
        assert pair.decode(z).shape == (2, 17, 48)

    @pytest.mark.parametrize("tier", TIERS)
    def test_shape_duality(self, tier):
        bank = build_bank(mini_spec("resnet", "teacher"), mini_spec("resnet", "student"), tier)
        for pair in bank.pairs:
            x = torch.randn(2, *pair.teacher_shape)
            assert pair.decode(pair.encode(x)).shape == x.shape

    def test_wrong_side_rejected(self):
        pair = ConverterPair(2, (8, 4, 4), (3, 4, 4))
        with pytest.raises(ShapeError, match="converter 2"):
            pair.encode(torch.randn(1, 3, 4, 4))
        with pytest.raises(ShapeError):
            pair.decode(torch.randn(1, 3, 2, 2))


class TestReconstruction:
    def test_exact_inverse_gives_zero(self):
        pair = ConverterPair(1, (2, 1, 1), (2, 1, 1))
        m = torch.tensor([[2.0, 1.0], [1.0, 1.0]])
        _set(pair.encoder, m, [0.0, 0.0])
        _set(pair.decoder, torch.linalg.inv(m), [0.0, 0.0])
        ft, fs = torch.randn(4, 2, 1, 1), torch.randn(4, 2, 1, 1)
        assert reconstruction_error(pair, ft, fs).item() < 1e-10

    def test_zero_everything(self):
        pair = ConverterPair(1, (3, 2, 2), (2, 2, 2))
        with torch.no_grad():
            pair.encoder.bias.zero_()
            pair.decoder.bias.zero_()
        assert float(reconstruction_error(pair, torch.zeros(1, 3, 2, 2),
                                          torch.zeros(1, 2, 2, 2))) == 0.0

    def test_scalar_case(self):
        pair = ConverterPair(1, (1, 1, 1), (1, 1, 1))
        _set(pair.encoder, [[2.0]], [0.0])
        _set(pair.decoder, [[1.0]], [0.0])
        one = torch.ones(1, 1, 1, 1)
        assert float(reconstruction_error(pair, one, one)) == pytest.approx(2.0)

    def test_trained_pair_is_near_invertible(self):
        # features that live in a 3-d subspace of an 8-channel space, 3-channel student side
        gen = torch.Generator().manual_seed(0)
        basis = torch.randn(8, 3, generator=gen)
        pair = ConverterPair(1, (8, 1, 1), (3, 1, 1))
        opt = torch.optim.Adam(pair.parameters(), lr=0.02)

        def sample(n):
            z = torch.randn(n, 3, generator=gen)
            return (z @ basis.T)[:, :, None, None], z[:, :, None, None]

        for _ in range(800):
            ft, fs = sample(64)
            loss = reconstruction_error(pair, ft, fs)
            opt.zero_grad()
            loss.backward()
            opt.step()
        ft, _ = sample(256)
        with torch.no_grad():
            rel = (pair.decode(pair.encode(ft)) - ft).norm() / ft.norm()
        assert rel < 0.10
