"""Binary model container.

Layout (all integers little-endian)::

    b"QALM" | format_version u32 | header_len u32 | header (UTF-8 JSON)
    | zero padding to an 8-byte boundary | payload

Every tensor blob in the payload starts on an 8-byte boundary; offsets in the
header are relative to the start of the payload. FP tensors are float64. A
quantized tensor is one blob: packed codes (column-major, byte-padded per
column) immediately followed by the scales and then the zeros, each a
``num_groups x d_out`` float32 array in row-major order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .adapter import AdapterPair, DenseLayer, QuantLinearLayer
from .quant import QuantizedMatrix, packed_column_bytes
from .training import ACTIVATIONS, LOSSES, ToyModel

MAGIC = b"QALM"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sII")
ALIGN = 8
KINDS = ("fp", "quant", "adapterA", "adapterB")


class ContainerFormatError(ValueError):
    pass


def align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def quant_blob_size(d_in: int, d_out: int, bits: int, group_size: int) -> int:
    groups = d_in // group_size
    return packed_column_bytes(d_in, bits) * d_out + 2 * 4 * groups * d_out


def fp_blob_size(rows: int, cols: int) -> int:
    return 8 * rows * cols


def _fp_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _quant_bytes(q: QuantizedMatrix) -> bytes:
    return (
        q.packed
        + np.ascontiguousarray(q.scales, dtype="<f4").tobytes()
        + np.ascontiguousarray(q.zeros, dtype="<f4").tobytes()
    )


def model_tensors(model: ToyModel):
    """Yield ``(name, kind, array_or_quantized)`` and build the layer metadata."""
    tensors, layers = [], []
    for i, layer in enumerate(model.layers):
        name = f"layer{i}"
        meta = {"name": name, "activation": model.activations[i]}
        if isinstance(layer, QuantLinearLayer):
            meta["weight"] = f"{name}.weight"
            tensors.append((f"{name}.weight", "quant", layer.base))
        else:
            meta["weight"] = f"{name}.weight"
            tensors.append((f"{name}.weight", "fp", layer.weight))
        if layer.adapter is not None:
            meta["adapterA"] = f"{name}.adapterA"
            meta["adapterB"] = f"{name}.adapterB"
            meta["scale"] = layer.adapter.s
            tensors.append((f"{name}.adapterA", "adapterA", layer.adapter.A))
            tensors.append((f"{name}.adapterB", "adapterB", layer.adapter.B))
        layers.append(meta)
    return tensors, {"layers": layers, "loss": model.loss}


def dumps(model: ToyModel) -> bytes:
    tensors, meta = model_tensors(model)
    table, blobs, offset = [], [], 0
    for name, kind, value in tensors:
        if kind == "quant":
            blob = _quant_bytes(value)
            entry = {"shape": [value.d_in, value.d_out], "bits": value.bits, "group_size": value.group_size}
        else:
            blob = _fp_bytes(value)
            entry = {"shape": list(value.shape)}
        entry.update({"name": name, "kind": kind, "offset": offset, "length": len(blob)})
        table.append(entry)
        padded = align(len(blob))
        blobs.append(blob + b"\0" * (padded - len(blob)))
        offset += padded
    header = json.dumps({"tensors": table, "model": meta}, sort_keys=True, separators=(",", ":")).encode()
    head = PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header
    head += b"\0" * (align(len(head)) - len(head))
    return head + b"".join(blobs)


def save(model: ToyModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def read_header(data: bytes) -> tuple[dict, int]:
    """Return the parsed header and the payload start offset."""
    if len(data) < PREAMBLE.size:
        raise ContainerFormatError("file too short for a container preamble")
    magic, version, header_len = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported format version {version}")
    end = PREAMBLE.size + header_len
    if end > len(data):
        raise ContainerFormatError("header runs past end of file")
    try:
        header = json.loads(data[PREAMBLE.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or "tensors" not in header or "model" not in header:
        raise ContainerFormatError("header needs 'tensors' and 'model'")
    return header, align(end)


def _check_table(table, payload_len: int) -> dict:
    by_name, spans = {}, []
    for entry in table:
        try:
            name, kind = entry["name"], entry["kind"]
            offset, length = int(entry["offset"]), int(entry["length"])
            shape = [int(s) for s in entry["shape"]]
        except (KeyError, TypeError, ValueError):
            raise ContainerFormatError(f"malformed tensor entry {entry!r}") from None
        if kind not in KINDS:
            raise ContainerFormatError(f"tensor {name}: unknown kind {kind!r}")
        if name in by_name:
            raise ContainerFormatError(f"duplicate tensor name {name}")
        if len(shape) != 2 or min(shape) < 1:
            raise ContainerFormatError(f"tensor {name}: bad shape {shape}")
        if offset < 0 or offset % ALIGN or offset + length > payload_len:
            raise ContainerFormatError(f"tensor {name}: blob [{offset}, {offset + length}) out of bounds")
        if kind == "quant":
            bits, g = entry.get("bits"), entry.get("group_size")
            if not isinstance(bits, int) or not isinstance(g, int) or g < 1 or shape[0] % g:
                raise ContainerFormatError(f"tensor {name}: bad bits/group_size")
            expected = quant_blob_size(shape[0], shape[1], bits, g)
        else:
            expected = fp_blob_size(*shape)
        if length != expected:
            raise ContainerFormatError(f"tensor {name}: length {length} != expected {expected}")
        spans.append((offset, offset + length, name))
        by_name[name] = dict(entry, shape=shape)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise ContainerFormatError(f"tensors {a} and {b} overlap")
    return by_name


def _decode(entry: dict, payload: bytes):
    blob = payload[entry["offset"] : entry["offset"] + entry["length"]]
    rows, cols = entry["shape"]
    if entry["kind"] != "quant":
        return np.frombuffer(blob, dtype="<f8").reshape(rows, cols).astype(np.float64)
    bits, g = entry["bits"], entry["group_size"]
    groups = rows // g
    n_codes = packed_column_bytes(rows, bits) * cols
    n_params = groups * cols * 4
    scales = np.frombuffer(blob[n_codes : n_codes + n_params], dtype="<f4").reshape(groups, cols)
    zeros = np.frombuffer(blob[n_codes + n_params :], dtype="<f4").reshape(groups, cols)
    try:
        return QuantizedMatrix(rows, cols, bits, g, blob[:n_codes], scales.astype(np.float64), zeros.astype(np.float64))
    except ValueError as exc:
        raise ContainerFormatError(f"tensor {entry['name']}: {exc}") from None


def loads(data: bytes) -> ToyModel:
    header, start = read_header(data)
    payload = data[start:]
    tensors = _check_table(header["tensors"], len(payload))
    meta = header["model"]
    layers_meta = meta.get("layers") if isinstance(meta, dict) else None
    if not layers_meta:
        raise ContainerFormatError("model metadata lists no layers")
    loss = meta.get("loss", "mse")
    if loss not in LOSSES:
        raise ContainerFormatError(f"unknown loss {loss!r}")
    layers, activations = [], []
    for lm in layers_meta:
        try:
            weight = tensors[lm["weight"]]
            act = lm["activation"]
        except (KeyError, TypeError):
            raise ContainerFormatError(f"layer metadata {lm!r} does not resolve to tensors") from None
        if act not in ACTIVATIONS:
            raise ContainerFormatError(f"unknown activation {act!r}")
        if weight["kind"] not in ("fp", "quant"):
            raise ContainerFormatError(f"layer weight {weight['name']} has kind {weight['kind']}")
        base = _decode(weight, payload)
        pair = None
        if "adapterA" in lm or "adapterB" in lm:
            try:
                a_entry, b_entry = tensors[lm["adapterA"]], tensors[lm["adapterB"]]
                scale = float(lm["scale"])
            except (KeyError, TypeError, ValueError):
                raise ContainerFormatError(f"layer {lm.get('name')}: incomplete adapter metadata") from None
            if a_entry["kind"] != "adapterA" or b_entry["kind"] != "adapterB":
                raise ContainerFormatError(f"layer {lm.get('name')}: adapter tensors have wrong kinds")
            pair = AdapterPair(_decode(a_entry, payload), _decode(b_entry, payload), scale)
        try:
            if weight["kind"] == "quant":
                layers.append(QuantLinearLayer(base, pair))
            else:
                layers.append(DenseLayer(base, pair))
        except ValueError as exc:
            raise ContainerFormatError(f"layer {lm.get('name')}: {exc}") from None
        activations.append(act)
    try:
        return ToyModel(tuple(layers), tuple(activations), loss)
    except ValueError as exc:
        raise ContainerFormatError(str(exc)) from None


def load(path) -> ToyModel:
    with open(path, "rb") as fh:
        return loads(fh.read())


def tensor_payloads(data: bytes) -> dict:
    """Raw bytes of every tensor blob keyed by name (for byte-level comparisons)."""
    header, start = read_header(data)
    payload = data[start:]
    return {e["name"]: payload[e["offset"] : e["offset"] + e["length"]] for e in header["tensors"]}


def expected_file_size(data: bytes) -> int:
    """Closed-form size from the header and the tensor shapes alone."""
    header, start = read_header(data)
    total = start
    for e in header["tensors"]:
        rows, cols = e["shape"]
        if e["kind"] == "quant":
            total += align(quant_blob_size(rows, cols, e["bits"], e["group_size"]))
        else:
            total += align(fp_blob_size(rows, cols))
    return total


def has_adapters(model: ToyModel) -> bool:
    return any(layer.adapter is not None for layer in model.layers)
