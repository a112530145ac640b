import numpy as np
import pytest

from trackid import autodiff as ad
from trackid.autodiff import Prng, Tensor
from trackid.checkpoint import (Checkpoint, decode, encode, load_checkpoint, load_into,
                                save_checkpoint)
from trackid.errors import ConfigError, DimensionError, FormatError
from trackid.models import (DESK_MODEL, PAPER_MODEL, FusionCNN, ModelConfig, ResNet10,
                            ResNetLSTM, base_mask, build_fusion_cnn, freeze, score_tracklet,
                            transfer_weights, window_bounds)
from trackid.training import OptimizerState, SGD

TINY = ModelConfig(input_h=24, input_w=24, precrop_h=28, precrop_w=28,
                   width_factor=0.125, num_classes=5, lstm_hidden=64)


def frames(n, seed=0, size=32):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


# -- configuration and shapes -------------------------------------------------

def test_feature_dimensions():
    assert PAPER_MODEL.feature_dim == 512
    assert DESK_MODEL.feature_dim == 128
    assert PAPER_MODEL.hidden == 256 and PAPER_MODEL.num_classes == 81


def test_default_conv1_parameter_count():
    net = ResNet10(PAPER_MODEL, Prng(0))
    conv1 = net.base.conv1
    assert conv1.weight.data.size + conv1.bias.data.size == 64 * 3 * 7 * 7 + 64 == 9472


@pytest.mark.parametrize("kw", [dict(width_factor=0), dict(num_classes=1), dict(window=0),
                                dict(dropout=1.0), dict(input_h=300)])
def test_invalid_model_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_resnet10_output_shape():
    net = ResNet10(TINY, Prng(1))
    net.eval()
    assert net(Tensor(np.zeros((2, 3, 24, 24)))).shape == (2, 5)
    assert net.features(Tensor(np.zeros((2, 3, 24, 24)))).shape == (2, TINY.feature_dim)


def test_sequence_model_window_rows_are_probabilities():
    net = ResNetLSTM(DESK_MODEL, Prng(2))
    S = score_tracklet(net, frames(16))
    assert S.shape == (16, 12)
    assert np.all(S >= 0)
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-6)


def test_sequence_model_window_of_one():
    net = ResNetLSTM(TINY, Prng(3))
    assert score_tracklet(net, frames(1, size=28)).shape == (1, 5)


def test_sequence_model_rejects_rank4():
    net = ResNetLSTM(TINY, Prng(3))
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((4, 3, 24, 24))))


def test_inference_is_deterministic_and_restores_mode():
    net = ResNetLSTM(TINY, Prng(4))
    net.train()
    x = frames(20, 4, 28)
    a, b = score_tracklet(net, x), score_tracklet(net, x)
    np.testing.assert_array_equal(a, b)
    assert net.training


# -- fusion network -----------------------------------------------------------

def test_fusion_cnn_shape_arithmetic():
    net = build_fusion_cnn(81, Prng(0))
    assert net.conv4_len == 82 and net.pool_len == 41 and net.flat_dim == 70 * 41 == 2870
    assert net.fc1.weight.shape == (2870, 256)
    assert net(Tensor(np.full((3, 81), 1 / 81))).shape == (3, 81)


def test_fusion_cnn_layer_table():
    net = FusionCNN(81, Prng(0))
    shapes = [(n, p.shape) for n, p in net.named_parameters() if n.endswith("weight")]
    assert shapes == [("conv1.weight", (20, 1, 3)), ("conv2_1.weight", (50, 20, 3)),
                      ("conv2_2.weight", (50, 50, 3)), ("conv3_1.weight", (70, 50, 3)),
                      ("conv3_2.weight", (70, 70, 3)), ("conv4.weight", (70, 70, 2)),
                      ("fc1.weight", (2870, 256)), ("fc2.weight", (256, 256)),
                      ("fc3.weight", (256, 81))]


def test_fusion_cnn_uniform_input_gives_distribution():
    net = FusionCNN(81, Prng(5))
    p = ad.softmax(net(Tensor(np.full((1, 81), 1 / 81)))).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6


def test_fusion_cnn_seed_determinism():
    x = Tensor(np.random.default_rng(6).dirichlet(np.ones(12), 4))
    a = FusionCNN(12, Prng(9))(x).data
    b = FusionCNN(12, Prng(9))(x).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, FusionCNN(12, Prng(10))(x).data)


def test_fusion_cnn_rejects_wrong_length():
    with pytest.raises(DimensionError):
        FusionCNN(12, Prng(0))(Tensor(np.zeros((1, 11))))


# -- windowing ----------------------------------------------------------------

def test_window_bounds_79():
    b = window_bounds(79)
    assert [e - s for s, e in b] == [16, 16, 16, 16, 15]
    assert b[0][0] == 0 and b[-1][1] == 79
    assert window_bounds(16) == [(0, 16)]
    with pytest.raises(DimensionError):
        window_bounds(0)


def test_score_tracklet_79_frames():
    net = ResNetLSTM(TINY, Prng(7))
    S = score_tracklet(net, frames(79, 7, 28))
    assert S.shape == (79, 5)
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-6)


def test_window_independence():
    net = ResNetLSTM(TINY, Prng(8))
    x = frames(33, 8, 28)
    full = score_tracklet(net, x)
    np.testing.assert_array_equal(full[:16], score_tracklet(net, x[:16]))
    np.testing.assert_array_equal(full[16:32], score_tracklet(net, x[16:32]))
    y = x.copy()
    y[16:] = frames(17, 9, 28)
    np.testing.assert_array_equal(score_tracklet(net, y)[:16], full[:16])


def test_lstm_state_carries_within_window():
    net = ResNetLSTM(TINY, Prng(8))
    x = frames(16, 10, 28)
    y = x.copy()
    y[0] = 1.0 - y[0]
    a, b = score_tracklet(net, x), score_tracklet(net, y)
    assert not np.array_equal(a[5], b[5])


# -- transfer, freezing, checkpoints -------------------------------------------

def test_transfer_reports_sequence_parts_missing_from_source():
    src = Checkpoint.from_network(ResNet10(TINY, Prng(11)))
    target = ResNetLSTM(TINY, Prng(12))
    report = transfer_weights(src, target)
    assert report.skipped["lstm.w_ih"] == "not in source"
    assert report.skipped["fc.weight"] == "not in source"
    assert "base.conv1.weight" in report.copied
    assert "base.input_bn.running_mean" in report.copied
    assert not any(n.startswith("base.") for n in report.skipped)
    np.testing.assert_array_equal(target.base.conv1.weight.data, src.params["base.conv1.weight"])
    assert any(l.startswith("skipped: lstm.w_ih (not in source)") for l in report.lines())


def test_transfer_name_map_skips_unmapped():
    src = Checkpoint.from_network(ResNet10(TINY, Prng(11)))
    report = transfer_weights(src, ResNet10(TINY, Prng(13)), {"base.": "base."})
    assert report.skipped["classifier.weight"] == "not mapped"


def test_transfer_shape_mismatch_names_parameter():
    src = Checkpoint.from_network(ResNet10(TINY, Prng(11)))
    wider = ResNetLSTM(TINY.__class__(**{**TINY.echo(), "width_factor": 0.25}), Prng(0))
    with pytest.raises(DimensionError) as e:
        transfer_weights(src, wider)
    assert "base.conv1.weight" in str(e.value)


def test_freeze_then_100_sgd_steps_keeps_base_bit_identical():
    net = ResNet10(TINY, Prng(14))
    freeze(net, base_mask(net))
    before = {n: v.copy() for n, v in net.state_dict().items() if n.startswith("base.")}
    head_before = net.classifier.weight.data.copy()
    opt = SGD(net, OptimizerState(0.05, 0.9))
    rng = np.random.default_rng(14)
    net.train()
    for _ in range(100):
        opt.zero_grad()
        x = Tensor(rng.random((4, 3, 24, 24)))
        loss = ad.cross_entropy(ad.softmax(net(x)), rng.integers(0, 5, 4))
        loss.backward()
        opt.step()
    after = net.state_dict()
    for n, v in before.items():
        assert after[n].tobytes() == v.tobytes(), n
    assert not np.array_equal(net.classifier.weight.data, head_before)


def test_freeze_unknown_name():
    with pytest.raises(KeyError):
        freeze(ResNet10(TINY, Prng(0)), {"nope"})


def random_checkpoint(seed):
    rng = np.random.default_rng(seed)
    params = {"a.weight": rng.standard_normal((3, 4, 2)).astype(np.float32),
              "a.bias": rng.standard_normal(3).astype(np.float32),
              "scalar": np.float32(rng.standard_normal()).reshape(()),
              "empty": np.zeros((0, 5), np.float32),
              "naïve.name": rng.standard_normal(7).astype(np.float32)}
    return Checkpoint(params, {"kind": "test"})


def test_checkpoint_round_trip_byte_identical(tmp_path):
    ck = random_checkpoint(15)
    p1, p2 = tmp_path / "a.tidc", tmp_path / "b.tidc"
    save_checkpoint(ck, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert list(loaded.params) == list(ck.params)
    for k in ck.params:
        assert loaded.params[k].shape == ck.params[k].shape
        np.testing.assert_array_equal(loaded.params[k], ck.params[k])
    assert loaded.config == {"kind": "test"}


def test_checkpoint_layout_is_documented_little_endian():
    buf = encode(Checkpoint({"w": np.array([1.0, -2.0], np.float32)}))
    assert buf[:4] == b"TIDC"
    assert buf[4:8] == (1).to_bytes(4, "little")
    assert buf[8:12] == (1).to_bytes(4, "little") and buf[12:13] == b"w"
    assert buf[13:17] == (1).to_bytes(4, "little") and buf[17:21] == (2).to_bytes(4, "little")
    assert buf[21:] == np.array([1.0, -2.0], "<f4").tobytes()


def test_network_checkpoint_round_trip_identity(tmp_path):
    net = ResNetLSTM(TINY, Prng(16))
    net.base.bn1._buffers["running_var"] = np.random.default_rng(16).uniform(0.5, 2, net.base.bn1.gamma.shape[0]).astype(np.float32)
    save_checkpoint(Checkpoint.from_network(net, {"kind": "resnet_lstm"}), tmp_path / "n.tidc")
    other = ResNetLSTM(TINY, Prng(17))
    load_into(other, load_checkpoint(tmp_path / "n.tidc"))
    for (n, a), (m, b) in zip(net.state_dict().items(), other.state_dict().items()):
        assert n == m and a.tobytes() == b.tobytes()
    x = frames(18, 18, 28)
    np.testing.assert_array_equal(score_tracklet(net, x), score_tracklet(other, x))


def test_load_into_missing_entry_is_mismatch():
    ck = Checkpoint.from_network(ResNet10(TINY, Prng(0)))
    del ck.params["classifier.bias"]
    with pytest.raises(FormatError) as e:
        load_into(ResNet10(TINY, Prng(0)), ck)
    assert e.value.kind == "mismatch"


@pytest.mark.parametrize("mutate,kind", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b[:6], "truncated"),
    (lambda b: b[:8] + (1 << 30).to_bytes(4, "little") + b[12:], "truncated"),
])
def test_corrupted_checkpoint_is_categorised(tmp_path, mutate, kind):
    path = tmp_path / "c.tidc"
    path.write_bytes(mutate(encode(random_checkpoint(19))))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.kind == kind


def test_random_garbage_never_crashes():
    rng = np.random.default_rng(20)
    good = encode(random_checkpoint(20))
    for i in range(200):
        buf = bytearray(good)
        for j in rng.integers(0, len(buf), 3):
            buf[j] = int(rng.integers(0, 256))
        buf = bytes(buf[:int(rng.integers(0, len(buf) + 1))])
        try:
            decode(buf)
        except FormatError:
            pass
