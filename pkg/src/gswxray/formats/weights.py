"""Network parameter documents (``weights.w``).

JSON text; floats are written with ``repr`` so they parse back bit-identical.
The architecture travels with the parameters so a network can be rebuilt
from the file alone.
"""

from __future__ import annotations

import json
import math

import numpy as np

from gswxray.formats.errors import FormatError

FORMAT_TAG = "gswxray-weights"
FORMAT_VERSION = 1


def _reject_constant(name):
    raise FormatError(f"non-finite value {name}")


def save_weights(net, layers=None) -> bytes:
    """Serialize ``net`` (optionally only the named layers)."""
    entries = []
    for layer in net.layers:
        if not layer.param_names or (layers is not None and layer.name not in layers):
            continue
        params = {}
        for pname in layer.param_names:
            arr = np.asarray(layer.params[pname], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise FormatError("non-finite parameter value", f"{layer.name}/{pname}")
            params[pname] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
        entries.append({"name": layer.name, "params": params})
    doc = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "architecture": net.architecture(),
        "layers": entries,
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


def read_weights(data: bytes) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Parse a document into ``(architecture, {(layer, param): array})``."""
    try:
        doc = json.loads(data.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed weights document: {exc}") from None
    if doc.get("format") != FORMAT_TAG or doc.get("version") != FORMAT_VERSION:
        raise FormatError("not a weights document")
    params = {}
    for entry in doc["layers"]:
        for pname, blob in entry["params"].items():
            where = f"{entry['name']}/{pname}"
            values = blob["values"]
            if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values):
                raise FormatError("non-finite value", where)
            shape = tuple(blob["shape"])
            if int(np.prod(shape)) != len(values):
                raise FormatError(f"{len(values)} values do not fill shape {shape}", where)
            params[(entry["name"], pname)] = np.array(values, dtype=np.float64).reshape(shape)
    return doc["architecture"], params


def load_weights(net, data: bytes, partial: bool = False) -> None:
    """Copy parameters from ``data`` into ``net``.

    Every layer named in the document must exist in ``net`` with the same
    shapes. With ``partial`` the document may cover a subset of layers
    (e.g. a pretrained backbone).
    """
    _, params = read_weights(data)
    names = {layer.name: layer for layer in net.layers}
    for (lname, pname), value in params.items():
        layer = names.get(lname)
        if layer is None or pname not in layer.param_names:
            raise FormatError("unknown layer name", f"{lname}/{pname}")
        expected = layer.params[pname].shape
        if value.shape != expected:
            raise FormatError(f"shape mismatch: file {value.shape}, network {expected}", lname)
    if not partial:
        missing = {k for k, _ in net.named_parameters()} - set(params)
        if missing:
            raise FormatError(f"document lacks parameters {sorted(missing)}")
    for (lname, pname), value in params.items():
        names[lname].params[pname] = value


def network_from_weights(data: bytes):
    from gswxray.nn.network import Network

    arch, _ = read_weights(data)
    net = Network.from_architecture(arch)
    load_weights(net, data)
    return net
