import struct

import numpy as np
import pytest

from fqpack.errors import CorruptionError, FormatError, ValidationError
from fqpack.model_store import (
    KIND_CONV2D,
    KIND_DENSE,
    LayerSpec,
    ModelFile,
    decode_model,
    encode_model,
    load_cifar10_batch,
    load_model,
    save_cifar10_batch,
    save_model,
    synthetic_blobs,
    weight_payload_bytes,
)


def _dense(name, w):
    w = np.asarray(w, dtype=np.float32)
    return LayerSpec(name, KIND_DENSE, w, w.shape)


def _random_model(rng):
    conv_w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    bn = tuple(rng.normal(size=4).astype(np.float32) for _ in range(4))
    return ModelFile([
        LayerSpec("conv", KIND_CONV2D, conv_w, (3, 3, 2, 4, 1, 1), bn),
        _dense("fc1", rng.normal(size=(8, 5)).astype(np.float32)),
        _dense("fc2", rng.normal(size=(5, 3)).astype(np.float32)),
    ])


def test_identity_dense_round_trip(tmp_path):
    model = ModelFile([_dense("fc", np.eye(2, dtype=np.float32))])
    path = tmp_path / "m.fqm"
    save_model(model, path)
    loaded = load_model(path)
    assert len(loaded.layers) == 1
    assert loaded.layers[0].name == "fc"
    assert np.array_equal(loaded.layers[0].weight, np.eye(2, dtype=np.float32))


def test_three_layer_round_trip_bitwise(tmp_path):
    model = _random_model(np.random.default_rng(0))
    path = tmp_path / "m.fqm"
    save_model(model, path)
    loaded = load_model(path)
    for orig, back in zip(model.layers, loaded.layers):
        assert orig.name == back.name and orig.kind == back.kind
        assert orig.geometry == back.geometry
        assert orig.weight.tobytes() == back.weight.tobytes()
        if orig.bn_params is None:
            assert back.bn_params is None
        else:
            for a, b in zip(orig.bn_params, back.bn_params):
                assert a.tobytes() == b.tobytes()


def test_empty_model_is_header_only():
    data = encode_model(ModelFile([]))
    assert len(data) == 10  # 4 magic + 2 version + 4 layer count
    assert data[:4] == b"FQM1"


def test_dense_record_size_recomputable():
    # sum the format's field sizes independently for one 2x2 dense layer
    model = ModelFile([_dense("fc", np.eye(2, dtype=np.float32))])
    data = encode_model(model)
    header = 10
    record = (
        2 + len(b"fc")  # name length + name
        + 1              # kind byte
        + 2 * 4          # geometry (in, out) as u32
        + 1 + 2 * 4      # shape rank u8 + dims u32
        + 4 * 4          # f32 payload
        + 1              # bn-presence byte
    )
    assert len(data) == header + record


def test_save_is_deterministic(tmp_path):
    model = _random_model(np.random.default_rng(3))
    a, b = tmp_path / "a.fqm", tmp_path / "b.fqm"
    na = save_model(model, a)
    nb = save_model(model, b)
    assert na == nb == len(a.read_bytes())
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic_rejected():
    data = bytearray(encode_model(ModelFile([])))
    data[:4] = b"NOPE"
    with pytest.raises(FormatError):
        decode_model(bytes(data))


def test_truncated_payload_rejected():
    model = ModelFile([_dense("fc", np.eye(4, dtype=np.float32))])
    data = encode_model(model)
    with pytest.raises(CorruptionError):
        decode_model(data[:-3])


def test_nan_payload_rejected():
    model = ModelFile([_dense("fc", np.eye(2, dtype=np.float32))])
    data = bytearray(encode_model(model))
    # payload is the 16 bytes before the trailing bn-flag byte
    data[-17:-13] = struct.pack("<f", float("nan"))
    with pytest.raises(ValidationError):
        decode_model(bytes(data))


def test_duplicate_layer_names_rejected():
    w = np.eye(2, dtype=np.float32)
    with pytest.raises(ValueError):
        ModelFile([_dense("fc", w), _dense("fc", w)])


def test_weight_payload_bytes_is_4_per_weight():
    model = _random_model(np.random.default_rng(1))
    count = sum(l.weight.size for l in model.layers)
    assert weight_payload_bytes(model) == 4 * count


# --- CIFAR-10 binary batches -------------------------------------------------


def test_cifar_single_record(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(bytes([7]) + b"\xff" * 3072)
    images, labels = load_cifar10_batch(path)
    assert images.shape == (1, 3, 32, 32)
    assert labels.tolist() == [7]
    assert np.all(images == 1.0)


def test_cifar_two_records(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes((bytes([1]) + b"\x00" * 3072) * 2)
    images, labels = load_cifar10_batch(path)
    assert images.shape[0] == 2


def test_cifar_bad_length(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(b"\x00" * 3072)
    with pytest.raises(FormatError):
        load_cifar10_batch(path)


def test_blobs_survive_cifar_round_trip(tmp_path):
    images, labels = synthetic_blobs(12, seed=4)
    as_u8 = np.rint(images * 255.0).astype(np.uint8)
    path = tmp_path / "blobs.bin"
    save_cifar10_batch(path, as_u8, labels)
    back_images, back_labels = load_cifar10_batch(path)
    assert np.array_equal(back_labels, labels)
    assert np.array_equal(back_images, images)


def test_blobs_deterministic():
    a = synthetic_blobs(20, seed=9)
    b = synthetic_blobs(20, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = synthetic_blobs(20, seed=10)
    assert not np.array_equal(a[0], c[0])
