"""Per-neuron deployment bundles.

A bundle directory holds one binary blob per computing neuron plus a
``manifest.txt`` of key=value lines. Blob layout (little-endian)::

    magic "NB" | version u8 | activation u8 | fan_in u16 | bias f32 | fan_in x f32 | crc32

The CRC covers every preceding byte of the blob and is repeated in the
manifest. Weights are quantised to float32 when written.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import nn
from .exceptions import FtnetError
from .wire import ACTIVATION_CODES, ACTIVATION_NAMES, NeuronParams

BLOB_MAGIC = b"NB"
BLOB_VERSION = 1
BUNDLE_FORMAT = "ftnet-bundle/1"
_BLOB_HEAD = struct.Struct("<2sBBH")


class CorruptBundleError(FtnetError):
    pass


class UnknownNodeError(FtnetError, KeyError):
    pass


def node_id(layer: int, neuron: int) -> str:
    return f"{layer}:{neuron}"


def parse_node_id(text: str) -> tuple[int, int]:
    try:
        l, n = text.split(":")
        return int(l), int(n)
    except ValueError:
        raise ValueError(f"node id must look like LAYER:NEURON, got {text!r}") from None


def encode_blob(neuron: NeuronParams) -> bytes:
    head = _BLOB_HEAD.pack(BLOB_MAGIC, BLOB_VERSION, ACTIVATION_CODES[neuron.activation], neuron.fan_in)
    body = head + struct.pack("<f", neuron.bias) + neuron.weights.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_blob(data: bytes, layer: int, neuron: int) -> NeuronParams:
    if len(data) < _BLOB_HEAD.size + 8:
        raise CorruptBundleError("blob truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptBundleError(f"CRC mismatch in blob for node {node_id(layer, neuron)}")
    magic, version, act, fan_in = _BLOB_HEAD.unpack_from(data)
    if magic != BLOB_MAGIC or version != BLOB_VERSION or act not in ACTIVATION_NAMES:
        raise CorruptBundleError("bad blob header")
    if len(data) != _BLOB_HEAD.size + 4 + 4 * fan_in + 4:
        raise CorruptBundleError("blob length does not match fan_in")
    (bias,) = struct.unpack_from("<f", data, _BLOB_HEAD.size)
    weights = np.frombuffer(data, dtype="<f4", count=fan_in, offset=_BLOB_HEAD.size + 4).astype(np.float32)
    return NeuronParams(layer, neuron, weights, bias, ACTIVATION_NAMES[act])


def neurons_of(spec: nn.NetworkSpec, params: nn.Parameters):
    p32 = params.astype(np.float32)
    for l in range(1, spec.n_layers + 1):
        for j in range(spec.layer_sizes[l]):
            yield NeuronParams(l, j, p32.weights[l - 1][j], p32.biases[l - 1][j], spec.neuron_activation(l))


def write_bundle(spec: nn.NetworkSpec, params: nn.Parameters, out_dir) -> Path:
    params.check(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format={BUNDLE_FORMAT}",
        "layers=" + ",".join(str(n) for n in spec.layer_sizes),
        f"hidden_activation={spec.hidden_activation}",
        f"output_activation={spec.output_activation}",
    ]
    for neuron in neurons_of(spec, params):
        blob = encode_blob(neuron)
        name = f"n{neuron.layer}_{neuron.neuron}.bin"
        (out / name).write_bytes(blob)
        crc = struct.unpack("<I", blob[-4:])[0]
        lines.append(f"node.{node_id(neuron.layer, neuron.neuron)}={name},crc32={crc:08x}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(bundle_dir) -> dict[str, str]:
    path = Path(bundle_dir) / "manifest.txt"
    entries = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptBundleError(f"malformed manifest line {raw!r}")
        entries[key.strip()] = value.strip()
    if entries.get("format") != BUNDLE_FORMAT:
        raise CorruptBundleError(f"unsupported bundle format {entries.get('format')!r}")
    return entries


def bundle_spec(manifest: dict[str, str]) -> nn.NetworkSpec:
    sizes = tuple(int(v) for v in manifest["layers"].split(","))
    return nn.NetworkSpec(sizes, manifest["hidden_activation"], manifest["output_activation"])


def read_neuron(bundle_dir, node: str | tuple[int, int], manifest: dict[str, str] | None = None) -> NeuronParams:
    if isinstance(node, str):
        node = parse_node_id(node)
    manifest = manifest or read_manifest(bundle_dir)
    entry = manifest.get(f"node.{node_id(*node)}")
    if entry is None:
        raise UnknownNodeError(f"node {node_id(*node)} is not in the bundle")
    name, _, crc_field = entry.partition(",crc32=")
    data = (Path(bundle_dir) / name).read_bytes()
    neuron = decode_blob(data, *node)
    if f"{struct.unpack('<I', data[-4:])[0]:08x}" != crc_field:
        raise CorruptBundleError(f"blob CRC for node {node_id(*node)} disagrees with the manifest")
    return neuron


def read_bundle(bundle_dir) -> tuple[nn.NetworkSpec, nn.Parameters]:
    """Reassemble full float32 parameters from a bundle."""
    manifest = read_manifest(bundle_dir)
    spec = bundle_spec(manifest)
    weights, biases = [], []
    for l in range(1, spec.n_layers + 1):
        rows = [read_neuron(bundle_dir, (l, j), manifest) for j in range(spec.layer_sizes[l])]
        weights.append(np.stack([r.weights for r in rows]))
        biases.append(np.array([r.bias for r in rows], dtype=np.float32))
    params = nn.Parameters(weights, biases)
    params.check(spec)
    return spec, params
