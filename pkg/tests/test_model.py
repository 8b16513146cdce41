import numpy as np
import pytest

from rheovision import model as m
from rheovision.exceptions import (CheckpointMagicError, CheckpointShapeError,
                                   CheckpointTruncatedError, ConfigurationError, InputError)
from rheovision.kernels import NesterovSGD, gradient_check


def tiny_net(image_size=16, in_channels=4, mix_dim=18, seed=0, dtype=np.float32):
    cfg = m.tiny_config(image_size=image_size, in_channels=in_channels, mix_dim=mix_dim)
    return m.PropertyNet(cfg, seed=seed, dtype=dtype)


def random_batch(cfg, n=2, rng=None, dtype=np.float32):
    rng = rng or np.random.default_rng(0)
    h, w = cfg.input_size
    return (rng.standard_normal((n, cfg.in_channels, h, w)).astype(dtype),
            rng.standard_normal((n, cfg.delta_t_dim)).astype(dtype),
            rng.standard_normal((n, cfg.mix_dim)).astype(dtype))


class TestModelConfig:
    def test_full_scale_default_embedding(self):
        cfg = m.full_scale_config()
        cfg.validate()
        assert cfg.conv_output_size() == (4, 4)
        assert cfg.conv_channels[-1] * 4 * 4 == 640

    def test_fc_sizes_linear_decline(self):
        assert m.default_fc_sizes(660) == (441, 222, 3)
        cfg = m.full_scale_config()
        assert cfg.fc_sizes == (441, 222, 3)
        assert cfg.fused_width == 660

    def test_desk_config_64(self):
        cfg = m.desk_config(64)
        cfg.validate()
        assert cfg.conv_output_size() == (1, 1)
        assert cfg.embedding_len == 640

    def test_embedding_sweep_over_input_sizes(self):
        presets = {
            128: m.desk_config(128),
            256: m.ModelConfig(input_size=(256, 256), conv_channels=(8, 16, 32, 64, 64, 128, 160),
                               fc_sizes=m.default_fc_sizes(660)),
            512: m.full_scale_config(),
        }
        for size, cfg in presets.items():
            cfg.validate()
            net = m.PropertyNet(cfg, seed=1)
            images, dt, mix = random_batch(cfg, n=2)
            out = net.forward(images, dt, mix, train=True)
            assert out.shape == (2, 3)

    def test_embedding_mismatch_rejected(self):
        cfg = m.ModelConfig(input_size=(512, 512), conv_channels=(8, 16, 32, 32, 40, 40, 39))
        with pytest.raises(ConfigurationError, match="embedding"):
            cfg.validate()

    def test_wrong_layer_counts_rejected(self):
        with pytest.raises(ConfigurationError, match="conv"):
            m.ModelConfig(conv_channels=(8, 16, 32)).validate()
        with pytest.raises(ConfigurationError, match="emit 3"):
            m.ModelConfig(fc_sizes=(441, 222, 4)).validate()


class TestForward:
    def test_zero_weights_output_is_fc3_bias(self):
        net = tiny_net()
        for p in net.params():
            p.value[:] = 0.0
        bias = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        net.fcs[-1].bias.value[:] = bias
        cfg = net.config
        h, w = cfg.input_size
        out = net.forward(np.zeros((2, 4, h, w), np.float32), np.zeros((2, 2), np.float32),
                          np.zeros((2, cfg.mix_dim), np.float32))
        np.testing.assert_allclose(out, np.tile(bias, (2, 1)), atol=1e-6)

    def test_sample_permutation_commutes_in_eval(self):
        net = tiny_net(seed=3)
        images, dt, mix = random_batch(net.config, n=4, rng=np.random.default_rng(5))
        out = net.forward(images, dt, mix, train=False)
        perm = np.array([2, 0, 3, 1])
        out_p = net.forward(images[perm], dt[perm], mix[perm], train=False)
        np.testing.assert_array_equal(out_p, out[perm])

    def test_eval_forward_is_pure(self):
        net = tiny_net(seed=4)
        images, dt, mix = random_batch(net.config, n=3, rng=np.random.default_rng(6))
        a = net.forward(images, dt, mix, train=False)
        b = net.forward(images, dt, mix, train=False)
        np.testing.assert_array_equal(a, b)

    def test_same_seed_identical_parameter_bytes(self):
        a, b = tiny_net(seed=7), tiny_net(seed=7)
        for pa, pb in zip(a.params(), b.params()):
            assert pa.value.tobytes() == pb.value.tobytes()

    def test_mix_influences_output(self):
        net = tiny_net(seed=8)
        images, dt, mix = random_batch(net.config, n=1, rng=np.random.default_rng(9))
        out_a = net.forward(images, dt, mix, train=False)
        out_b = net.forward(images, dt, mix + 1.0, train=False)
        assert np.abs(out_a - out_b).max() > 1e-6

    def test_fusion_segment_order_matters(self):
        cfg = m.tiny_config(image_size=16, mix_dim=2)
        net = m.PropertyNet(cfg, seed=10)
        images, _, _ = random_batch(cfg, n=1, rng=np.random.default_rng(11))
        dt = np.array([[0.3, -0.7]], dtype=np.float32)
        mix = np.array([[1.2, 0.1]], dtype=np.float32)
        out = net.forward(images, dt, mix, train=False)
        swapped = net.forward(images, mix, dt, train=False)
        assert np.abs(out - swapped).max() > 1e-6

    def test_wrong_channel_count_rejected(self):
        net = tiny_net()
        with pytest.raises(InputError, match="4 channels"):
            net.forward(np.zeros((1, 3, 16, 16), np.float32), np.zeros((1, 2), np.float32),
                        np.zeros((1, 18), np.float32))

    def test_full_model_gradient_check_small(self):
        net = tiny_net(image_size=16, mix_dim=4, seed=12, dtype=np.float64)
        images, dt, mix = random_batch(net.config, n=2, rng=np.random.default_rng(13),
                                       dtype=np.float64)
        report = gradient_check(net, [images, dt, mix], tolerance=1e-4, max_coords=40)
        assert report.passed, str(report)


class TestCheckpoint:
    def test_round_trip_identical_outputs(self, tmp_path):
        net = tiny_net(seed=20)
        rng = np.random.default_rng(21)
        # move running stats off their init values so they must round-trip too
        images, dt, mix = random_batch(net.config, n=4, rng=rng)
        net.forward(images, dt, mix, train=True)
        out_before = net.forward(images, dt, mix, train=False)

        path = tmp_path / "model.rhc"
        m.save_checkpoint(net, path, extra={"norm.delta": np.array([43.97, 7.47])},
                          meta={"combination": "O+D+m+OF"})
        bundle = m.load_checkpoint(path)
        out_after = bundle.model.forward(images, dt, mix, train=False)
        np.testing.assert_array_equal(out_before, out_after)
        assert bundle.meta["combination"] == "O+D+m+OF"
        np.testing.assert_allclose(bundle.extra["norm.delta"], [43.97, 7.47], rtol=1e-6)

    def test_round_trip_bit_exact_values(self, tmp_path):
        net = tiny_net(seed=22)
        path = tmp_path / "model.rhc"
        m.save_checkpoint(net, path)
        bundle = m.load_checkpoint(path)
        for pa, pb in zip(net.params(), bundle.model.params()):
            assert pa.value.tobytes() == pb.value.tobytes()

    def test_optimizer_velocities_round_trip(self, tmp_path):
        net = tiny_net(seed=23)
        opt = NesterovSGD()
        for p in net.params():
            p.grad[:] = 0.01
        opt.step(net.params())
        path = tmp_path / "model.rhc"
        m.save_checkpoint(net, path, optimizer=opt)
        bundle = m.load_checkpoint(path)
        assert set(bundle.velocities) == set(opt.velocities)
        for name, v in opt.velocities.items():
            np.testing.assert_array_equal(bundle.velocities[name], v)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rhc"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(CheckpointMagicError):
            m.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        net = tiny_net(seed=24)
        path = tmp_path / "model.rhc"
        m.save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointTruncatedError):
            m.load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        net = tiny_net(seed=25)
        path = tmp_path / "model.rhc"
        m.save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        # grow conv1 weight channel dim in the stored shape table
        idx = blob.find(b"conv1.weight")
        rank_at = idx + len(b"conv1.weight")
        import struct
        dims = list(struct.unpack("<4I", blob[rank_at + 1: rank_at + 17]))
        dims[0] += 1
        blob[rank_at + 1: rank_at + 17] = struct.pack("<4I", *dims)
        path.write_bytes(bytes(blob))
        with pytest.raises((CheckpointShapeError, CheckpointTruncatedError)):
            m.load_checkpoint(path)
