"""``.tnet`` model files: one JSON manifest line followed by a little-endian float64 blob."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ManifestError, ShapeError, TruncatedBlobError
from .network import Head, NetworkModel, infer_shapes, layer_from_dict, layer_to_dict, param_shapes

FORMAT = "tnet/1"
_DTYPE = np.dtype("<f8")


def model_bytes(model: NetworkModel) -> bytes:
    tensors, chunks, offset = [], [], 0
    for i, w in enumerate(model.weights):
        for name in sorted(w):
            arr = np.ascontiguousarray(w[name], dtype=_DTYPE)
            raw = arr.tobytes()
            tensors.append({"layer": i, "name": name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "endian": "little",
        "input_shape": list(model.input_shape),
        "layers": [layer_to_dict(s) for s in model.layers],
        "head": {"kind": model.head.kind, "size": model.head.size},
        "endpoints": dict(sorted(model.endpoints.items())),
        "tensors": tensors,
        "blob_size": offset,
    }
    header = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8") + b"\n"
    return header + b"".join(chunks)


def save_model(model: NetworkModel, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(model))


def _parse_manifest(header: bytes) -> dict:
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ManifestError("not a tnet manifest")
    if manifest.get("endian") != "little":
        raise ManifestError(f"unsupported endian tag {manifest.get('endian')!r}")
    for key in ("input_shape", "layers", "head", "endpoints", "tensors", "blob_size"):
        if key not in manifest:
            raise ManifestError(f"manifest is missing {key!r}")
    types = {"input_shape": list, "layers": list, "head": dict, "endpoints": dict, "tensors": list, "blob_size": int}
    for key, kind in types.items():
        if not isinstance(manifest[key], kind) or isinstance(manifest[key], bool):
            raise ManifestError(f"manifest field {key!r} should be a {kind.__name__}")
    if not all(isinstance(e, dict) for e in manifest["tensors"]):
        raise ManifestError("tensor entries must be objects")
    return manifest


def model_from_bytes(data: bytes) -> NetworkModel:
    newline = data.find(b"\n")
    if newline < 0:
        raise ManifestError("manifest terminator not found")
    manifest = _parse_manifest(data[:newline])
    blob = data[newline + 1:]
    if len(blob) < manifest["blob_size"]:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, manifest declares {manifest['blob_size']}")
    try:
        layers = [layer_from_dict(d) for d in manifest["layers"]]
        head = Head(manifest["head"]["kind"], int(manifest["head"]["size"]))
        input_shape = tuple(int(s) for s in manifest["input_shape"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ManifestError(f"bad layer or head description: {exc}") from exc
    weights: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for entry in manifest["tensors"]:
        try:
            layer, name = int(entry["layer"]), str(entry["name"])
            start, nbytes, crc = int(entry["offset"]), int(entry["nbytes"]), int(entry["crc32"])
            shape = tuple(int(d) for d in entry["shape"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ManifestError(f"bad tensor entry {entry!r}") from exc
        if not 0 <= layer < len(layers):
            raise ManifestError(f"tensor {name!r} refers to missing layer {layer}")
        if start < 0 or nbytes < 0 or any(d < 0 for d in shape):
            raise ManifestError(f"tensor {layer}.{name}: negative offset, size or dimension")
        if start + nbytes > len(blob):
            raise TruncatedBlobError(f"tensor {layer}.{name} runs past the end of the blob")
        raw = blob[start:start + nbytes]
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"checksum mismatch in tensor {layer}.{name}")
        if int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != nbytes:
            raise ManifestError(f"tensor {layer}.{name}: shape {shape} does not match {nbytes} bytes")
        weights[layer][name] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
    try:
        shapes = infer_shapes(input_shape, layers)
        for i, (spec, in_shape) in enumerate(zip(layers, [input_shape] + shapes[:-1])):
            missing = set(param_shapes(spec, in_shape)) - set(weights[i])
            if missing:
                raise ManifestError(f"layer {i} has no weights for {sorted(missing)}")
        return NetworkModel(input_shape, layers, weights, head, dict(manifest["endpoints"]))
    except (ShapeError, TypeError, ValueError) as exc:
        raise ManifestError(f"inconsistent model description: {exc}") from exc


def load_model(path: str | Path) -> NetworkModel:
    return model_from_bytes(Path(path).read_bytes())
