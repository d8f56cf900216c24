import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from l2caf.errors import ChecksumError, ManifestError, ModelFileError, TruncatedBlobError
from l2caf.modelio import load_model, model_bytes, model_from_bytes, save_model
from l2caf.network import PRESETS, build_preset, forward


def split(data):
    newline = data.index(b"\n")
    return json.loads(data[:newline]), data[newline + 1:]


def join(manifest, blob):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n" + blob


@pytest.mark.parametrize("name", PRESETS)
def test_round_trip_is_bitwise(tmp_path, name):
    model = build_preset(name, 3)
    path = tmp_path / "m.tnet"
    save_model(model, path)
    back = load_model(path)
    assert back.layers == model.layers and back.head == model.head and back.endpoints == model.endpoints
    for a, b in zip(model.weights, back.weights):
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    assert model_bytes(back) == path.read_bytes()


def test_loaded_model_computes_same_output():
    model = build_preset("tiny-cls", 1)
    x = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert np.array_equal(forward(model_from_bytes(model_bytes(model)), x)[0], forward(model, x)[0])


def test_manifest_is_first_line():
    manifest, blob = split(model_bytes(build_preset("tiny-ret", 0)))
    assert manifest["format"] == "tnet/1" and manifest["endian"] == "little"
    assert manifest["blob_size"] == len(blob)
    assert sum(t["nbytes"] for t in manifest["tensors"]) == len(blob)


def test_corrupt_byte_is_checksum_error():
    data = bytearray(model_bytes(build_preset("tiny-cls", 0)))
    data[-5] ^= 0x01
    with pytest.raises(ChecksumError) as info:
        model_from_bytes(bytes(data))
    assert info.value.code == 13


def test_missing_layer_weights_is_manifest_error():
    manifest, blob = split(model_bytes(build_preset("tiny-cls", 0)))
    manifest["tensors"] = [t for t in manifest["tensors"] if t["layer"] != 2]
    with pytest.raises(ManifestError) as info:
        model_from_bytes(join(manifest, blob))
    assert info.value.code == 11


def test_truncated_blob():
    data = model_bytes(build_preset("tiny-cls", 0))
    with pytest.raises(TruncatedBlobError) as info:
        model_from_bytes(data[:-8])
    assert info.value.code == 12


@pytest.mark.parametrize("payload", [b"", b"not json\n", b'{"format":"other"}\n', b"[1,2]\n"])
def test_malformed_manifest(payload):
    with pytest.raises(ManifestError):
        model_from_bytes(payload + b"\x00" * 8)


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_model(tmp_path / "nope.tnet")


_SMALL = model_bytes(build_preset("tiny-cls", 0, image_size=16))


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.tuples(st.integers(0, len(_SMALL) - 1), st.integers(0, 255)), min_size=1, max_size=4))
def test_mutations_raise_only_model_file_errors(edits):
    data = bytearray(_SMALL)
    for pos, value in edits:
        data[pos] = value
    try:
        model_from_bytes(bytes(data))
    except ModelFileError:
        pass


_HEADER_END = _SMALL.index(b"\n")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, _HEADER_END - 1), st.integers(32, 126)), min_size=1, max_size=3))
def test_manifest_mutations_raise_only_model_file_errors(edits):
    data = bytearray(_SMALL)
    for pos, value in edits:
        data[pos] = value
    try:
        model_from_bytes(bytes(data))
    except ModelFileError:
        pass
