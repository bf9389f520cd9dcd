"""Versioned checkpoint container.

A checkpoint is a zip archive with ``manifest.json`` (schema version,
architecture description and hash, array index, RNG state) and ``arrays.bin``
holding the arrays back to back as raw little-endian float64.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .model import LayerSpec, Network, build_network
from .normalization import NormKind

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    network: Network,
    rng: np.random.Generator | None = None,
    extra: dict | None = None,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> None:
    arrays = dict(network.state())
    for k, v in (optimizer_state or {}).items():
        arrays[f"optimizer.{k}"] = v
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "schema_version": CHECKPOINT_VERSION,
        "architecture_hash": network.architecture_hash(),
        "architecture": network.describe(),
        "arrays": index,
        "dtype": "<f8",
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        zf.writestr("arrays.bin", b"".join(chunks))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("arrays.bin")
    except (zipfile.BadZipFile, KeyError, OSError, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint schema {manifest.get('schema_version')} != {CHECKPOINT_VERSION}")
    arrays = {}
    for entry in manifest["arrays"]:
        start, count = entry["offset"], entry["count"]
        if start + 8 * count > len(blob):
            raise CheckpointError(f"array {entry['name']} extends past end of data")
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    return manifest, arrays


def network_from_description(desc: dict) -> Network:
    layers = desc["layers"]
    arch = [LayerSpec(l["kind"], l["out"], l["ksize"], l["stride"]) for l in layers[:-1]]
    variational = layers[0]["variational"]
    project = any(l["project"] for l in layers)
    return build_network(
        arch,
        tuple(desc["in_shape"]),
        desc["classes"],
        NormKind(desc["kind"]),
        np.random.default_rng(0),
        variational=variational,
        project=project,
        slope=desc.get("slope", 0.01),
    )


def load_checkpoint(
    path: str | Path, network: Network | None = None
) -> tuple[Network, np.random.Generator | None, dict]:
    """Restore a network (built from the manifest when ``network`` is None).

    Returns ``(network, rng, extra)``; ``extra["optimizer"]`` holds optimizer
    arrays if any were saved.
    """
    manifest, arrays = read_checkpoint(path)
    if network is None:
        network = network_from_description(manifest["architecture"])
    if network.architecture_hash() != manifest["architecture_hash"]:
        raise CheckpointError("checkpoint architecture does not match the network")
    try:
        network.load_state({k: v for k, v in arrays.items() if not k.startswith("optimizer.")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint arrays do not match the network: {exc}") from exc
    rng = None
    if manifest.get("rng_state") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng_state"]
    extra = dict(manifest.get("extra", {}))
    extra["optimizer"] = {k[len("optimizer.") :]: v for k, v in arrays.items() if k.startswith("optimizer.")}
    return network, rng, extra
