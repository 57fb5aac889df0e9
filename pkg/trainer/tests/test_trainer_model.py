import numpy as np
import pytest
import torch

from ynet_trainer.model import (
    YNetConfig,
    build_network,
    channels_to_complex,
    complex_to_channels,
)


def n_params(model):
    return sum(p.numel() for p in model.parameters())


class TestConfig:
    def test_defaults(self):
        cfg = YNetConfig()
        assert cfg.levels == 4
        assert cfg.base_channels == 16
        assert cfg.kernel == 3
        assert cfg.final_kernel == 1
        assert cfg.out_channels == 2
        assert cfg.batch_size == 64
        assert cfg.learning_rate == pytest.approx(1e-3)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"levels": 0},
            {"base_channels": 0},
            {"kernel": 2},
            {"final_kernel": 4},
            {"merge": "average"},
            {"lr_schedule": "linear"},
            {"val_fraction": 0.0},
            {"val_fraction": 1.0},
        ],
    )
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            YNetConfig(**kwargs)


class TestNetwork:
    def test_shape_contract_512(self):
        model = build_network()
        x = torch.randn(2, 2, 512)
        out = model(x, x.clone())
        assert out.shape == (2, 2, 512)

    def test_shape_contract_odd_length(self):
        # lengths that are not multiples of the pooling stride are padded
        # internally and cropped back
        model = build_network()
        x = torch.randn(3, 2, 451)
        out = model(x, x.clone())
        assert out.shape == (3, 2, 451)

    def test_parameter_count_deterministic(self):
        cfg = YNetConfig()
        assert n_params(build_network(cfg)) == n_params(build_network(cfg))

    def test_channel_doubling_per_level(self):
        model = build_network(YNetConfig())
        chans = [block[0].out_channels for block in model.enc1.blocks]
        assert chans == [16, 32, 64, 128]

    def test_zero_input_finite(self):
        model = build_network()
        z = torch.zeros(1, 2, 451)
        out = model(z, z.clone())
        assert torch.isfinite(out).all()

    def test_input_validation(self):
        model = build_network()
        with pytest.raises(ValueError):
            model(torch.randn(1, 2, 64), torch.randn(1, 2, 32))
        with pytest.raises(ValueError):
            model(torch.randn(1, 3, 64), torch.randn(1, 3, 64))
        with pytest.raises(ValueError):
            model(torch.randn(2, 64), torch.randn(2, 64))

    def test_sum_merge_variant(self):
        model = build_network(YNetConfig(merge="sum"))
        x = torch.randn(1, 2, 128)
        out = model(x, x.clone())
        assert out.shape == (1, 2, 128)
        # summing halves the merged channel count, so fewer parameters
        assert n_params(model) < n_params(build_network(YNetConfig()))

    def test_translation_covariance_at_pool_stride(self):
        # shifting the inputs by one pooling stride shifts the output the
        # same way; only the interior is compared because zero padding at the
        # ends breaks exact equivariance within one receptive field
        torch.manual_seed(3)
        model = build_network()
        model.eval()
        n = 1024
        shift = model.pool_stride
        assert shift == 8
        x1 = torch.randn(1, 2, n)
        x2 = torch.randn(1, 2, n)
        with torch.no_grad():
            base = model(x1, x2)
            shifted = model(torch.roll(x1, shift, dims=2),
                            torch.roll(x2, shift, dims=2))
        margin = 256
        inner = slice(margin, n - margin)
        expected = torch.roll(base, shift, dims=2)
        assert torch.allclose(shifted[..., inner], expected[..., inner],
                              rtol=1e-4, atol=1e-5)


class TestChannelConversion:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 32)) + 1j * rng.normal(size=(5, 32))
        back = channels_to_complex(complex_to_channels(a))
        np.testing.assert_allclose(back, a, rtol=1e-6, atol=1e-6)

    def test_channel_layout(self):
        a = np.array([[1.0 + 2.0j, 3.0 - 4.0j]])
        t = complex_to_channels(a)
        assert t.shape == (1, 2, 2)
        np.testing.assert_allclose(t[0, 0].numpy(), [1.0, 3.0])
        np.testing.assert_allclose(t[0, 1].numpy(), [2.0, -4.0])
