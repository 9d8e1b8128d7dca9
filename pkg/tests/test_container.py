import json
import math
import struct

import numpy as np
import pytest

from conftest import random_layer
from qalora import container
from qalora.adapter import AdapterPair, DenseLayer, QuantLinearLayer
from qalora.training import ToyModel, merge_model


def adapter_model(rng):
    l1 = random_layer(rng, 64, 16, 3, 32, 4)
    l2 = random_layer(rng, 16, 4, 2, 8, 2)
    return ToyModel((l1, l2), ("relu", "identity"))


def parse(data):
    """Stand-alone reader used as an oracle for the layout."""
    magic, version, header_len = struct.unpack_from("<4sII", data)
    header = json.loads(data[12 : 12 + header_len])
    start = math.ceil((12 + header_len) / 8) * 8
    return magic, version, header, start


def test_preamble_and_alignment(rng):
    data = container.dumps(adapter_model(rng))
    magic, version, header, start = parse(data)
    assert magic == b"QALM" and version == 1
    assert set(data[12 + len(json.dumps(header, sort_keys=True, separators=(",", ":"))) : start]) <= {0}
    kinds = sorted(e["kind"] for e in header["tensors"])
    assert kinds == ["adapterA", "adapterA", "adapterB", "adapterB", "quant", "quant"]
    for e in header["tensors"]:
        assert e["offset"] % 8 == 0
        assert (start + e["offset"]) % 8 == 0
    assert len(data) % 8 == 0


def test_quant_blob_layout(rng):
    model = adapter_model(rng)
    data = container.dumps(model)
    _, _, header, start = parse(data)
    entry = next(e for e in header["tensors"] if e["name"] == "layer0.weight")
    q = model.layers[0].base
    blob = data[start + entry["offset"] : start + entry["offset"] + entry["length"]]
    n_codes = math.ceil(64 * 3 / 8) * 16
    assert blob[:n_codes] == q.packed
    scales = np.frombuffer(blob[n_codes : n_codes + 4 * 2 * 16], dtype="<f4").reshape(2, 16)
    zeros = np.frombuffer(blob[n_codes + 4 * 2 * 16 :], dtype="<f4").reshape(2, 16)
    np.testing.assert_array_equal(scales, q.scales.astype(np.float32))
    np.testing.assert_array_equal(zeros, q.zeros.astype(np.float32))


def test_fp_blob_is_float64(rng):
    w = rng.normal(size=(5, 3))
    data = container.dumps(ToyModel((DenseLayer(w),), ("identity",)))
    _, _, header, start = parse(data)
    (entry,) = header["tensors"]
    assert entry["kind"] == "fp" and entry["length"] == 5 * 3 * 8
    np.testing.assert_array_equal(np.frombuffer(data[start : start + 120], dtype="<f8").reshape(5, 3), w)


def test_round_trip_payloads_bitwise(rng):
    data = container.dumps(adapter_model(rng))
    again = container.dumps(container.loads(data))
    assert again == data
    assert container.tensor_payloads(again) == container.tensor_payloads(data)


def test_round_trip_preserves_model(rng):
    model = adapter_model(rng)
    loaded = container.loads(container.dumps(model))
    assert loaded.activations == model.activations and loaded.loss == model.loss
    for a, b in zip(model.layers, loaded.layers):
        assert a.base.packed == b.base.packed
        np.testing.assert_array_equal(a.adapter.A, b.adapter.A)
        np.testing.assert_array_equal(a.adapter.B, b.adapter.B)
        assert a.adapter.s == b.adapter.s
        np.testing.assert_allclose(b.base.scales, a.base.scales, rtol=2**-23)


def test_merged_model_has_no_adapter_tensors(rng):
    data = container.dumps(merge_model(adapter_model(rng)))
    _, _, header, _ = parse(data)
    assert {e["kind"] for e in header["tensors"]} == {"quant"}
    assert all("adapterA" not in lm for lm in header["model"]["layers"])


def test_expected_size_matches(rng):
    for model in (adapter_model(rng), merge_model(adapter_model(rng))):
        data = container.dumps(model)
        assert container.expected_file_size(data) == len(data)


def test_has_adapters(rng):
    model = adapter_model(rng)
    assert container.has_adapters(model)
    assert not container.has_adapters(merge_model(model))


def _rewrite(data, mutate):
    _, version, header, start = parse(data)
    payload = data[start:]
    mutate(header)
    raw = json.dumps(header).encode()
    head = struct.pack("<4sII", b"QALM", version, len(raw)) + raw
    head += b"\0" * (-len(head) % 8)
    return head + payload


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + struct.pack("<I", 2) + d[8:],
        lambda d: d[:10],
        lambda d: d[:-8],
        lambda d: d[:12] + b"\xff" + d[13:],
    ],
)
def test_corrupt_files_rejected(rng, corrupt):
    data = container.dumps(adapter_model(rng))
    with pytest.raises(container.ContainerFormatError):
        container.loads(corrupt(data))


def test_overlapping_and_misaligned_offsets_rejected(rng):
    data = container.dumps(adapter_model(rng))

    def overlap(h):
        h["tensors"][1]["offset"] = h["tensors"][0]["offset"]

    def misalign(h):
        h["tensors"][0]["offset"] += 4

    def wrong_kind(h):
        h["tensors"][0]["kind"] = "weird"

    def bad_length(h):
        h["tensors"][0]["length"] -= 1

    def missing_tensor(h):
        h["model"]["layers"][0]["weight"] = "nope"

    for mutate in (overlap, misalign, wrong_kind, bad_length, missing_tensor):
        with pytest.raises(container.ContainerFormatError):
            container.loads(_rewrite(data, mutate))


def test_save_and_load_file(tmp_path, rng):
    model = adapter_model(rng)
    path = tmp_path / "m.qalm"
    container.save(model, path)
    assert path.read_bytes() == container.dumps(model)
    assert container.dumps(container.load(path)) == path.read_bytes()


def test_dense_adapter_round_trip(rng):
    layer = DenseLayer(rng.normal(size=(6, 4)), AdapterPair(rng.normal(size=(6, 2)), rng.normal(size=(2, 4)), 0.5))
    data = container.dumps(ToyModel((layer,), ("identity",)))
    loaded = container.loads(data).layers[0]
    assert isinstance(loaded, DenseLayer) and not isinstance(loaded, QuantLinearLayer)
    np.testing.assert_array_equal(loaded.adapter.A, layer.adapter.A)
