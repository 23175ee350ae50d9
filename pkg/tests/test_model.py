import numpy as np
import pytest

from fbsnet import ModelConfig, build, forward, init_weights, load_weights, predict_labels, save_weights
from fbsnet.layers import BatchNorm2d, Conv2d
from fbsnet.model import (BadMagicError, ChecksumError, MissingParameterError, ShapeConflictError,
                          TruncatedFileError, UnexpectedParameterError, VersionMismatchError,
                          decode_weights, encode_weights)
from fbsnet.tensor import ShapeError, Tensor, backward, mul, sum_all

TOY = ModelConfig(num_classes=4, input_size=(64, 128), seed=3)


@pytest.fixture(scope="module")
def toy():
    return build(TOY)


@pytest.fixture(scope="module")
def default_graph():
    return build(ModelConfig())


def test_default_layout(default_graph):
    rows = sorted({d.row for d in default_graph.layers})
    assert rows == list(range(1, 46))
    stage3 = [d for d in default_graph.layers if d.name.startswith("encoder.stage3.")]
    assert len(stage3) == 20
    assert [d.module.dilation for d in stage3] == [1, 2, 5, 9, 17] * 4
    decoder = [d for d in default_graph.layers if d.name.startswith("decoder.stage")]
    assert {d.module.dilation for d in decoder} == {1}


def test_deepest_shapes(default_graph, toy):
    assert default_graph.layer("encoder.stage3.bru19").expected_shape[1:] == (128, 64, 128)
    assert toy.layer("encoder.stage3.bru19").expected_shape[1:] == (128, 8, 16)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=(60, 128)).validate()
    with pytest.raises(ValueError):
        ModelConfig(widths=(16, 64)).validate()
    with pytest.raises(ValueError):
        ModelConfig(widths=(16, 63, 128)).validate()
    with pytest.raises(ValueError):
        ModelConfig(num_classes=0).validate()


def test_init_is_deterministic():
    a, b = build(TOY), build(TOY)
    for (na, va), (nb, vb) in zip(a.registry().items(), b.registry().items()):
        assert na == nb and np.array_equal(va, vb)
    c = build(ModelConfig(num_classes=4, input_size=(64, 128), seed=4))
    assert not np.array_equal(c.registry()["head.classifier.weight"], a.registry()["head.classifier.weight"])


def test_init_statistics(toy):
    checked = 0
    for _, mod in toy.root.named_modules():
        if isinstance(mod, BatchNorm2d):
            assert np.all(mod.gamma.data == 1) and np.all(mod.beta.data == 0)
        if isinstance(mod, Conv2d) and mod.spec.fan_in >= 144 and mod.weight.data.size >= 2000:
            var = mod.weight.data.var()
            assert abs(var / (2.0 / mod.spec.fan_in) - 1) < 0.2
            checked += 1
    assert checked > 5


def test_forward_shapes(toy):
    x = Tensor(np.random.default_rng(0).random((2, 3, 64, 128), dtype=np.float32))
    assert forward(toy, x).shape == (2, 4, 64, 128)
    labels = predict_labels(toy, x)
    assert labels.shape == (2, 1, 64, 128) and labels.max() < 4
    with pytest.raises(ShapeError):
        forward(toy, Tensor(np.zeros((1, 3, 32, 64), np.float32)))
    with pytest.raises(ValueError):
        forward(toy, x, mode="bogus")


def test_eval_forward_is_pure(toy):
    x = Tensor(np.random.default_rng(1).random((1, 3, 64, 128), dtype=np.float32))
    before = {k: v.copy() for k, v in toy.registry().items()}
    a, b = forward(toy, x).data, forward(toy, x).data
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], v) for k, v in toy.registry().items())


def test_every_parameter_gets_gradient():
    g = build(ModelConfig(num_classes=4, input_size=(32, 64), seed=5))
    x = Tensor(np.random.default_rng(2).random((2, 3, 32, 64), dtype=np.float32))
    out = forward(g, x, "train")
    backward(sum_all(mul(out, Tensor(np.random.default_rng(3).standard_normal(out.shape).astype(np.float32)))))
    dead = [n for n, p in g.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_save_load_round_trip(tmp_path, toy):
    path = tmp_path / "w.fbsw"
    save_weights(toy, path)
    other = build(ModelConfig(num_classes=4, input_size=(64, 128), seed=99))
    load_weights(path, other)
    for k, v in toy.registry().items():
        assert np.array_equal(other.registry()[k], v)
    x = Tensor(np.random.default_rng(4).random((1, 3, 64, 128), dtype=np.float32))
    assert np.array_equal(forward(toy, x).data, forward(other, x).data)
    assert path.read_bytes() == encode_weights(other.registry())


def test_file_header(tmp_path, toy):
    path = tmp_path / "w.fbsw"
    save_weights(toy, path)
    blob = path.read_bytes()
    assert blob[:4] == b"FBSW"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == len(toy.registry())


def _blob(toy):
    return encode_weights(toy.registry())


def test_truncated_and_corrupt_files(toy):
    blob = _blob(toy)
    with pytest.raises((TruncatedFileError, ChecksumError)):
        decode_weights(blob[:-100])
    with pytest.raises(TruncatedFileError):
        decode_weights(blob[:10])
    flipped = bytearray(blob)
    flipped[200] ^= 1
    with pytest.raises(ChecksumError):
        decode_weights(bytes(flipped))
    with pytest.raises(BadMagicError):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatchError):
        decode_weights(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_renamed_tensor_is_reported(toy):
    reg = dict(toy.registry())
    reg["head.classifier.weightX"] = reg.pop("head.classifier.weight")
    with pytest.raises(MissingParameterError, match="head.classifier.weight"):
        load_weights_from(encode_weights(reg), toy)


def test_extra_and_misshapen_tensors(toy):
    reg = dict(toy.registry())
    reg["extra"] = np.zeros((1,), np.float32)
    with pytest.raises(UnexpectedParameterError, match="extra"):
        load_weights_from(encode_weights(reg), toy)
    reg = dict(toy.registry())
    reg["head.classifier.bias"] = np.zeros((1, 5, 1, 1), np.float32)
    with pytest.raises(ShapeConflictError):
        load_weights_from(encode_weights(reg), toy)


def load_weights_from(blob, graph):
    from fbsnet.model import assign_registry
    assign_registry(graph, decode_weights(blob))


def test_init_weights_reseeds(toy):
    g = build(TOY)
    init_weights(g, 12345)
    assert not np.array_equal(g.registry()["head.up.weight"], toy.registry()["head.up.weight"])
    init_weights(g, TOY.seed)
    assert np.array_equal(g.registry()["head.up.weight"], toy.registry()["head.up.weight"])
